"""
传统骨峰检测：在专家给定的深度窗口内取最高峰
"""
from __future__ import annotations

from typing import Dict, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .errors import ConfigError
from .signal_core import AcousticModel, AModeFrame, depth_to_index
from .synthgen import TissueProfile

# 专家窗口在骨深度范围两侧各放宽的比例
WINDOW_MARGIN = 0.10
PROMINENCE_FACTOR = 5.0


class BaselineConfig(BaseModel):
    """单个通道的检测窗口 [window_start, window_end]（闭区间）与最小峰高"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    window_start: int
    window_end: int
    min_prominence: float = Field(default=0.0, ge=0)

    def check(self, signal_len: int) -> None:
        if not 0 <= self.window_start < self.window_end < signal_len:
            raise ConfigError(
                f"Invalid baseline window [{self.window_start}, {self.window_end}] for signal_len {signal_len}"
            )


def windowed_argmax(frame: AModeFrame | np.ndarray, cfg: BaselineConfig) -> Optional[int]:
    """
    窗口内振幅最大的位置；最大值低于 min_prominence 时返回 None

    平局取最小下标
    """
    samples = frame.samples if isinstance(frame, AModeFrame) else np.asarray(frame)
    cfg.check(samples.shape[0])
    window = samples[cfg.window_start:cfg.window_end + 1]
    local = int(np.argmax(window))
    if window[local] < cfg.min_prominence:
        return None
    return cfg.window_start + local


def baseline_configs(profiles: Sequence[TissueProfile], ac: AcousticModel) -> Dict[int, BaselineConfig]:
    """
    由组织参数推出每个通道的专家窗口

    窗口为 bone_depth_range 两侧各放宽 10%，min_prominence 为 5 倍噪声幅度
    """
    configs = {}
    for p in profiles:
        lo, hi = p.bone_depth_range
        start = depth_to_index(max(lo * (1 - WINDOW_MARGIN), 0.0), ac)
        end = depth_to_index(min(hi * (1 + WINDOW_MARGIN), ac.max_depth_mm), ac)
        cfg = BaselineConfig(
            window_start=start,
            window_end=max(end, start + 1),
            min_prominence=PROMINENCE_FACTOR * p.noise_sigma,
        )
        cfg.check(ac.signal_len)
        configs[p.channel] = cfg
    return configs


class BaselineDetector:
    """按帧所属通道选择窗口的传统检测器"""

    def __init__(self, configs: Dict[int, BaselineConfig]):
        self.configs = configs

    @classmethod
    def from_profiles(cls, profiles: Sequence[TissueProfile], ac: AcousticModel) -> "BaselineDetector":
        return cls(baseline_configs(profiles, ac))

    def detect(self, frame: AModeFrame) -> Optional[int]:
        cfg = self.configs.get(frame.region.channel)
        if cfg is None:
            raise ConfigError(f"No baseline window for channel {frame.region.channel}")
        return windowed_argmax(frame, cfg)
