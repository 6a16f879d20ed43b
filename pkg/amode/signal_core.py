"""
A 超声信号的领域类型：声学换算、解剖区域、帧、骨峰标注与数据集
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .errors import AugmentationError, DatasetError, RangeError, ShapeError

# 振幅截断上限
AMPLITUDE_CAP = 5000.0
# 骨峰标注区段宽度（采样点）
PEAK_WIDTH = 10
# 十倍平移增强的位移量，均匀分布在 [-100, 100]
AUGMENT_SHIFTS: Tuple[int, ...] = tuple(sorted({int(round(s)) for s in np.linspace(-100, 100, 10)}))

SPLIT_TAGS = ("train", "test")


class AcousticModel(BaseModel):
    """声学模型：声速 v (m/s)、采样率 fs (Hz)、每帧采样点数"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    v: float = Field(default=1540.0, gt=0)
    fs: float = Field(default=40e6, gt=0)
    signal_len: int = Field(default=6760, gt=0)

    @property
    def d_unit_exact(self) -> Fraction:
        # 往返传播：d_unit = v / (2 fs) * 1000
        return Fraction(self.v) / (2 * Fraction(self.fs)) * 1000

    @property
    def d_unit(self) -> float:
        return self.v / (2.0 * self.fs) * 1000.0

    @property
    def max_depth_mm(self) -> float:
        return self.signal_len * self.d_unit


class Area(str, Enum):
    FEMUR = "femur"
    TIBIA = "tibia"


# 每个区域对应一个换能器通道
AREA_CHANNELS: Dict[Area, Tuple[int, ...]] = {
    Area.FEMUR: (11, 12, 15),
    Area.TIBIA: (16, 17, 18, 19, 20),
}


@dataclass(frozen=True)
class RegionLabel:
    """解剖区域标签；region_id 为该区域在所属部位内的类别序号"""
    area: Area
    channel: int
    region_id: int

    def __post_init__(self):
        area = Area(self.area)
        object.__setattr__(self, "area", area)
        channels = AREA_CHANNELS[area]
        if self.channel not in channels:
            raise RangeError(f"Channel {self.channel} does not belong to {area.value}")
        if channels.index(self.channel) != self.region_id:
            raise RangeError(f"Region id {self.region_id} does not match channel {self.channel}")

    @classmethod
    def from_channel(cls, area: Area | str, channel: int) -> "RegionLabel":
        area = Area(area)
        channels = AREA_CHANNELS[area]
        if channel not in channels:
            raise RangeError(f"Channel {channel} does not belong to {area.value}")
        return cls(area, channel, channels.index(channel))

    @classmethod
    def from_index(cls, area: Area | str, region_id: int) -> "RegionLabel":
        area = Area(area)
        channels = AREA_CHANNELS[area]
        if not 0 <= region_id < len(channels):
            raise RangeError(f"Region id {region_id} out of range for {area.value}")
        return cls(area, channels[region_id], region_id)

    @property
    def name(self) -> str:
        return f"{self.area.value}-ch{self.channel}"


def regions_of(area: Area | str) -> List[RegionLabel]:
    area = Area(area)
    return [RegionLabel.from_index(area, i) for i in range(len(AREA_CHANNELS[area]))]


@dataclass(frozen=True, eq=False)
class AModeFrame:
    """
    一帧 A 超回波

    samples 为截断到 [0, 5000] 的振幅，normalized 为除以 5000 后的 [0, 1] 副本；
    两个数组均为只读 float32
    """
    samples: np.ndarray
    normalized: np.ndarray
    region: RegionLabel
    frame_id: int = 0

    def __len__(self) -> int:
        return int(self.samples.shape[0])


@dataclass(frozen=True)
class PeakAnnotation:
    """骨峰标注：闭区间 [seg_start, seg_end]，depth_mm 为骨深度"""
    seg_start: int
    seg_end: int
    depth_mm: float
    present: bool = True

    @property
    def midpoint(self) -> int:
        return (self.seg_start + self.seg_end) // 2

    @classmethod
    def around_index(cls, idx: int, ac: AcousticModel) -> "PeakAnnotation":
        """以 idx 为中点构造宽度为 10 的区段（偶数宽度取下中点）"""
        start = int(idx) - (PEAK_WIDTH - 1) // 2
        end = start + PEAK_WIDTH - 1
        if start < 0 or end >= ac.signal_len:
            raise RangeError(f"Peak segment [{start}, {end}] outside signal of length {ac.signal_len}")
        return cls(start, end, index_to_depth(int(idx), ac), True)

    @classmethod
    def absent(cls, depth_mm: float) -> "PeakAnnotation":
        return cls(-1, -1, float(depth_mm), False)

    def validate(self, ac: AcousticModel) -> None:
        if not self.present:
            return
        if not (0 <= self.seg_start <= self.seg_end < ac.signal_len):
            raise RangeError(f"Segment [{self.seg_start}, {self.seg_end}] outside signal")
        if self.seg_end - self.seg_start + 1 != PEAK_WIDTH:
            raise RangeError(f"Segment width must be {PEAK_WIDTH}")
        if abs(index_to_depth(self.midpoint, ac) - self.depth_mm) > ac.d_unit:
            raise RangeError(f"Depth {self.depth_mm} inconsistent with segment midpoint {self.midpoint}")


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    同一部位的帧与标注集合

    split 为每帧的 train/test 标签；由合成器直接产出的原始数据集没有切分（None）
    """
    frames: Tuple[Tuple[AModeFrame, PeakAnnotation], ...]
    ac: AcousticModel
    area: Area
    split: Optional[Tuple[str, ...]] = None
    header: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        object.__setattr__(self, "area", Area(self.area))
        if self.split is not None:
            split = tuple(self.split)
            if len(split) != len(self.frames):
                raise DatasetError("Split tags must match frame count")
            unknown = set(split) - set(SPLIT_TAGS)
            if unknown:
                raise DatasetError(f"Unknown split tags: {sorted(unknown)}")
            object.__setattr__(self, "split", split)

    def __len__(self) -> int:
        return len(self.frames)

    def subset(self, tag: str) -> List[Tuple[AModeFrame, PeakAnnotation]]:
        if self.split is None:
            raise DatasetError("Dataset has no train/test split")
        return [item for item, t in zip(self.frames, self.split) if t == tag]

    def counts(self) -> Dict[str, int]:
        if self.split is None:
            return {"all": len(self.frames)}
        return {tag: sum(1 for t in self.split if t == tag) for tag in SPLIT_TAGS}

    def with_split(self, split: Sequence[str]) -> "Dataset":
        return replace(self, split=tuple(split))


def _check_depth(d: float, ac: AcousticModel) -> None:
    if d is None or not math.isfinite(d):
        raise RangeError(f"Depth must be finite, got {d}")
    if d < 0 or d - ac.max_depth_mm > 1e-9:
        raise RangeError(f"Depth {d} mm outside [0, {ac.max_depth_mm:.3f}] mm")


def depth_to_index(d: float, ac: AcousticModel) -> int:
    """
    深度 (mm) 换算为采样点序号

    使用精确有理数运算并以银行家舍入取整，结果截断到 [0, signal_len - 1]
    """
    _check_depth(d, ac)
    idx = round(Fraction(float(d)) / ac.d_unit_exact)
    return int(min(max(idx, 0), ac.signal_len - 1))


def index_to_depth(idx: int, ac: AcousticModel) -> float:
    """采样点序号换算为深度 (mm)"""
    if not 0 <= int(idx) < ac.signal_len or int(idx) != idx:
        raise RangeError(f"Index {idx} outside [0, {ac.signal_len})")
    return int(idx) * ac.d_unit


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def preprocess_frame(
    raw: Sequence[float] | np.ndarray | AModeFrame,
    ac: AcousticModel,
    region: Optional[RegionLabel] = None,
    frame_id: Optional[int] = None,
) -> AModeFrame:
    """
    振幅截断到 [0, 5000] 并归一化到 [0, 1]

    Args:
        raw: 原始振幅序列，或已有的 AModeFrame（重复预处理结果不变）
        ac: 声学模型，用于校验长度
        region: 区域标签；传入 AModeFrame 时可省略
        frame_id: 帧编号
    """
    if isinstance(raw, AModeFrame):
        region = region or raw.region
        frame_id = raw.frame_id if frame_id is None else frame_id
        values = raw.samples
    else:
        values = raw
    if region is None:
        raise ShapeError("A region label is required to build a frame")
    arr = np.asarray(values, dtype=np.float32).reshape(-1)
    if arr.shape[0] != ac.signal_len:
        raise ShapeError(f"Frame length {arr.shape[0]} != signal_len {ac.signal_len}")
    samples = np.clip(np.nan_to_num(arr, nan=0.0), 0.0, AMPLITUDE_CAP).astype(np.float32)
    normalized = (samples / np.float32(AMPLITUDE_CAP)).astype(np.float32)
    return AModeFrame(_readonly(samples), _readonly(normalized), region, int(frame_id or 0))


def _shift_array(arr: np.ndarray, shift: int) -> np.ndarray:
    out = np.zeros_like(arr)
    if shift > 0:
        out[shift:] = arr[:-shift]
    elif shift < 0:
        out[:shift] = arr[-shift:]
    else:
        out[:] = arr
    return out


def shift_augment(
    frame: AModeFrame,
    annotation: PeakAnnotation,
    shift: int,
    ac: AcousticModel,
) -> Tuple[AModeFrame, PeakAnnotation]:
    """
    沿深度方向平移帧，空出的一端补零，标注同步平移

    Args:
        shift: 有符号位移，正数向深处移动

    Raises:
        AugmentationError: 位移过大或骨峰区段被移出信号范围
    """
    shift = int(shift)
    if abs(shift) >= ac.signal_len / 10:
        raise AugmentationError(f"Shift {shift} too large for signal_len {ac.signal_len}")
    if shift == 0:
        return frame, annotation

    if annotation.present:
        start = annotation.seg_start + shift
        end = annotation.seg_end + shift
        if start < 0 or end >= ac.signal_len:
            raise AugmentationError(f"Shift {shift} moves segment to [{start}, {end}] outside signal")
        new_ann = PeakAnnotation(start, end, index_to_depth((start + end) // 2, ac), True)
    else:
        new_ann = annotation

    samples = _shift_array(frame.samples, shift)
    normalized = _shift_array(frame.normalized, shift)
    new_frame = AModeFrame(_readonly(samples), _readonly(normalized), frame.region, frame.frame_id)
    return new_frame, new_ann
