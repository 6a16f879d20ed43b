"""
A 超骨峰定位服务模块
"""
from .model_service import ModelService, get_model_service
from .inference_service import InferenceService
from .train_service import TrainService
from .eval_service import EvalService

__all__ = ["ModelService", "get_model_service", "InferenceService", "TrainService", "EvalService"]
