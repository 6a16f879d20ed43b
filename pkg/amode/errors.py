from __future__ import annotations


class AModeError(Exception):
    """所有领域错误的基类，CLI 按子类映射退出码"""
    exit_code = 1
    kind = "error"


class RangeError(AModeError, ValueError):
    kind = "range"


class ShapeError(AModeError, ValueError):
    exit_code = 4
    kind = "shape"


class AugmentationError(AModeError):
    kind = "augmentation"


class ConfigError(AModeError, ValueError):
    exit_code = 2
    kind = "config"


class TrainingError(AModeError):
    exit_code = 5
    kind = "training"


class DatasetError(AModeError):
    kind = "dataset"


class GeneratorError(AModeError):
    kind = "generator"


class EvaluationError(AModeError):
    kind = "evaluation"


class StorageError(AModeError, OSError):
    exit_code = 3
    kind = "io"
