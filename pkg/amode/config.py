"""
配置：环境变量默认值 (Settings) 与一次运行的完整配置 (RunConfig)

优先级：代码默认值 < --config JSON 文件 < --set 点号覆盖 < 命令行参数
"""
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Literal, Mapping, Optional, Sequence, Tuple

import orjson
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import ConfigError
from .signal_core import Area
from .utils import read_json

load_dotenv()


def _env_int(name: str, default: str) -> int:
    raw = os.getenv(name, default)
    try:
        return int(raw)
    except ValueError as e:
        raise ConfigError(f"Environment variable {name} must be an integer, got {raw!r}") from e


def _env_float(name: str, default: str) -> float:
    raw = os.getenv(name, default)
    try:
        return float(raw)
    except ValueError as e:
        raise ConfigError(f"Environment variable {name} must be a number, got {raw!r}") from e


@dataclass
class Settings:
    data_dir: str = field(default_factory=lambda: os.getenv("AMODE_DATA_DIR", "data"))
    seed: int = field(default_factory=lambda: _env_int("SEED", "42"))
    workers: int = field(default_factory=lambda: _env_int("AMODE_WORKERS", "1"))
    tau: float = field(default_factory=lambda: _env_float("AMODE_TAU", "0.5"))


def get_settings() -> Settings:
    return Settings()


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PathsConfig(_Section):
    dataset: Optional[str] = None
    checkpoint: Optional[str] = None
    report: Optional[str] = None
    output: Optional[str] = None
    profiles: Optional[str] = None


class SynthConfig(_Section):
    frames_per_region: int = Field(default=200, gt=0)
    signal_len: int = Field(default=6760, gt=0)
    v: float = Field(default=1540.0, gt=0)
    fs: float = Field(default=40e6, gt=0)
    motion: Literal["random", "flexion"] = "random"
    flexion_period: int = Field(default=50, gt=1)
    workers: int = Field(default=1, gt=0)
    # 生成数据集时同时写出 8:2 切分
    split: bool = True


class ModelSection(_Section):
    channels_per_layer: Tuple[int, int, int, int, int] = (16, 32, 64, 128, 256)
    kernel_size: int = 5
    classifier_hidden: Tuple[int, int] = (256, 64)
    # None 表示按信号长度取默认值
    window_w: Optional[int] = None
    dtype: Literal["float32", "float64"] = "float32"


class TrainConfig(_Section):
    """训练超参数：RMSprop, lr 1e-5, batch 10, 50 epochs, 8:2 切分"""
    lr: float = Field(default=1e-5, gt=0)
    batch_size: int = Field(default=10, gt=0)
    epochs: int = Field(default=50, ge=0)
    test_ratio: float = 0.2
    epsilon_dice: float = Field(default=1e-6, gt=0)
    alpha: float = Field(default=0.99, gt=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)
    # 数据预取队列长度
    prefetch: int = Field(default=2, gt=0)
    augment: bool = True
    # 训练时 SBP 取样方式；deterministic 仅用于调试与单调性检查
    sbp_mode: Literal["stochastic", "deterministic"] = "stochastic"

    @field_validator("test_ratio")
    @classmethod
    def _fixed_split(cls, v: float) -> float:
        if v != 0.2:
            raise ValueError("train/test split is fixed at 8:2")
        return v


class InferConfig(_Section):
    tau: float = Field(default=0.5, gt=0, lt=1)
    deterministic: bool = True
    use_refined: bool = True
    batch_size: int = Field(default=10, gt=0)
    split: Literal["test", "train", "all"] = "test"


class BenchConfig(_Section):
    batch_size: int = Field(default=10, gt=0)
    reps: int = Field(default=30, ge=30)
    warmup: int = Field(default=5, ge=5)
    threads: int = Field(default=2, gt=0)


Command = Literal["synth", "train", "infer", "eval", "bench", "compare"]


class RunConfig(_Section):
    command: Command
    area: Area = Area.FEMUR
    seed: int = 42
    verbose: bool = True
    ablation: bool = False
    # eval 报告中附带耗时基准
    with_latency: bool = False
    paths: PathsConfig = Field(default_factory=PathsConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    model: ModelSection = Field(default_factory=ModelSection)
    train: TrainConfig = Field(default_factory=TrainConfig)
    infer: InferConfig = Field(default_factory=InferConfig)
    bench: BenchConfig = Field(default_factory=BenchConfig)


def _parse_override_value(raw: str) -> Any:
    try:
        return orjson.loads(raw)
    except orjson.JSONDecodeError:
        return raw


def _set_dotted(data: Dict[str, Any], key: str, value: Any, known: Dict[str, Any]) -> None:
    parts = key.split(".")
    node, schema = data, known
    for i, part in enumerate(parts):
        if not isinstance(schema, dict) or part not in schema:
            raise ConfigError(f"Unknown config key: {key}")
        if i == len(parts) - 1:
            if isinstance(schema[part], dict):
                raise ConfigError(f"Config key {key} names a section, not a value")
            node[part] = value
        else:
            node = node.setdefault(part, {})
            schema = schema[part]


def _validate(data: Dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        err = e.errors()[0]
        loc = ".".join(str(x) for x in err["loc"])
        raise ConfigError(f"Invalid config {loc}: {err['msg']}") from e


def apply_overrides(cfg: RunConfig, overrides: Sequence[str] | Mapping[str, Any]) -> RunConfig:
    """
    应用点号覆盖，例如 train.lr=1e-4、model.channels_per_layer=[4,8,16,32,64]

    值按 JSON 解析，解析失败时按字符串处理；未知键报 ConfigError
    """
    if isinstance(overrides, Mapping):
        items = list(overrides.items())
    else:
        items = []
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"Override must look like key=value: {item!r}")
            key, raw = item.split("=", 1)
            items.append((key.strip(), _parse_override_value(raw.strip())))
    data = cfg.model_dump(mode="json")
    known = cfg.model_dump(mode="json")
    for key, value in items:
        _set_dotted(data, key, value, known)
    return _validate(data)


def build_run_config(
    command: str,
    config_path: Optional[str] = None,
    overrides: Sequence[str] = (),
    flags: Optional[Mapping[str, Any]] = None,
    settings: Optional[Settings] = None,
) -> RunConfig:
    """
    组装 RunConfig

    Args:
        command: 子命令名
        config_path: JSON 配置文件
        overrides: --set 的 key=value 列表
        flags: 命令行参数（点号键 -> 值，None 表示未给出）
        settings: 环境变量默认值
    """
    settings = settings or get_settings()
    base: Dict[str, Any] = {
        "command": command,
        "seed": settings.seed,
        "synth": {"workers": settings.workers},
        "infer": {"tau": settings.tau},
    }
    cfg = _validate(base)
    if config_path:
        file_data = read_json(config_path)
        file_data.pop("command", None)
        cfg = apply_overrides(cfg, _flatten(file_data))
    if overrides:
        cfg = apply_overrides(cfg, list(overrides))
    given = {k: v for k, v in (flags or {}).items() if v is not None}
    if given:
        cfg = apply_overrides(cfg, given)
    return cfg


def _flatten(data: Mapping[str, Any], prefix: str = "") -> Dict[str, Any]:
    flat: Dict[str, Any] = {}
    for key, value in data.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, Mapping):
            flat.update(_flatten(value, f"{dotted}."))
        else:
            flat[dotted] = value
    return flat


def default_path(settings: Settings, area: Area | str, kind: str) -> str:
    """数据目录下的默认文件名，例如 data/femur.amds、data/femur.ckpt"""
    suffix = {
        "dataset": "amds",
        "checkpoint": "ckpt",
        "report": "report.json",
        "output": "predictions.csv",
    }[kind]
    return os.path.join(settings.data_dir, f"{Area(area).value}.{suffix}")


def describe(cfg: RunConfig) -> List[str]:
    """供日志打印的关键配置行"""
    return [
        f"  - 命令: {cfg.command}",
        f"  - 部位: {cfg.area.value}",
        f"  - 种子: {cfg.seed}",
        f"  - 数据集: {cfg.paths.dataset}",
        f"  - checkpoint: {cfg.paths.checkpoint}",
    ]
