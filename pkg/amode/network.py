"""
级联 U-Net：Coarse U-Net、注意力门控跳连、瓶颈层分类头、基于采样的区域提议 (SBP)、
区域裁剪以及 Refined U-Net
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.stats import norm

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .signal_core import AREA_CHANNELS, AcousticModel, Area, RegionLabel
from .utils import rng_for

DEPTH = 5
# 每层下采样 2 倍，共 DEPTH - 1 次
STRIDE = 2 ** (DEPTH - 1)
LEAKY_SLOPE = 0.1


def default_window_w(signal_len: int) -> int:
    """Refined U-Net 的窗口宽度：signal_len / 13 取整到 16 的倍数（6760 -> 512）"""
    return max(STRIDE, int(round(signal_len / 13 / STRIDE)) * STRIDE)


def padded_len(signal_len: int) -> int:
    return -(-signal_len // STRIDE) * STRIDE


class UNetConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    depth: int = DEPTH
    channels_per_layer: Tuple[int, ...] = (16, 32, 64, 128, 256)
    kernel_size: int = Field(default=5, gt=0)
    input_len: int = Field(default=6768, gt=0)

    @model_validator(mode="after")
    def _check(self) -> "UNetConfig":
        if self.depth != DEPTH:
            raise ValueError(f"depth must be {DEPTH}")
        if len(self.channels_per_layer) != self.depth:
            raise ValueError("channels_per_layer needs one entry per layer")
        if any(c <= 0 for c in self.channels_per_layer):
            raise ValueError("channel counts must be positive")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if self.input_len % (2 ** (self.depth - 1)):
            raise ValueError(f"input_len must be divisible by {2 ** (self.depth - 1)}")
        return self


class SbpConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    window_w: int = Field(default=512, gt=0)
    candidate_factor: int = 3
    gaussian_std: float = 1.0
    mode: Literal["stochastic", "deterministic"] = "deterministic"

    @field_validator("candidate_factor")
    @classmethod
    def _three(cls, v: int) -> int:
        if v != 3:
            raise ValueError("candidate region is three times the window width")
        return v

    @field_validator("gaussian_std")
    @classmethod
    def _unit_std(cls, v: float) -> float:
        if v != 1.0:
            raise ValueError("Gaussian kernel std is fixed at 1 sample")
        return v


class ModelConfig(BaseModel):
    """完整架构配置，随 checkpoint 一起保存"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    area: Area = Area.FEMUR
    signal_len: int = Field(default=6760, gt=0)
    v: float = Field(default=1540.0, gt=0)
    fs: float = Field(default=40e6, gt=0)
    channels_per_layer: Tuple[int, ...] = (16, 32, 64, 128, 256)
    kernel_size: int = 5
    classifier_hidden: Tuple[int, int] = (256, 64)
    dtype: Literal["float32", "float64"] = "float32"
    sbp: SbpConfig = Field(default_factory=SbpConfig)

    @model_validator(mode="after")
    def _check(self) -> "ModelConfig":
        if len(self.channels_per_layer) != DEPTH or any(c <= 0 for c in self.channels_per_layer):
            raise ValueError(f"channels_per_layer needs {DEPTH} positive entries")
        if self.kernel_size <= 0 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be a positive odd number")
        if any(h <= 0 for h in self.classifier_hidden):
            raise ValueError("classifier_hidden sizes must be positive")
        return self

    @property
    def n_regions(self) -> int:
        return len(AREA_CHANNELS[self.area])

    @property
    def unet(self) -> UNetConfig:
        return UNetConfig(
            channels_per_layer=self.channels_per_layer,
            kernel_size=self.kernel_size,
            input_len=padded_len(self.signal_len),
        )

    @property
    def window_w(self) -> int:
        return self.sbp.window_w

    @property
    def acoustic(self) -> AcousticModel:
        return AcousticModel(v=self.v, fs=self.fs, signal_len=self.signal_len)

    def to_record(self) -> dict:
        return self.model_dump(mode="json")

    @classmethod
    def for_signal(cls, area: Area | str, signal_len: int, **kwargs) -> "ModelConfig":
        """按信号长度给出默认窗口宽度的配置"""
        sbp = kwargs.pop("sbp", None) or SbpConfig(window_w=default_window_w(signal_len))
        return cls(area=Area(area), signal_len=signal_len, sbp=sbp, **kwargs)


@dataclass(frozen=True, eq=False)
class RegionProposal:
    """
    SBP 的输出窗口 [start, start + width)

    distribution 是候选区间 [candidate_start, candidate_start + len(distribution)) 上的采样分布 S；
    fallback 表示全零概率时退回到信号中心
    """
    start: int
    width: int
    center: int
    candidate_start: int
    distribution: np.ndarray
    fallback: bool = False

    @property
    def end(self) -> int:
        return self.start + self.width


def _gaussian_kernel(std: float) -> np.ndarray:
    radius = int(np.ceil(6 * std))
    return norm.pdf(np.arange(-radius, radius + 1), loc=0.0, scale=std)


def sbp_propose(
    peak_prob: np.ndarray,
    cfg: SbpConfig,
    rng: Optional[np.random.Generator] = None,
    mode: Optional[str] = None,
) -> RegionProposal:
    """
    基于采样的区域提议

    1. 取 peak_prob 的 argmax
    2. 以其为中心取 3 * window_w 的候选区间（截断在信号范围内）
    3. S = sum_i p_i * N(idx_i, 1)，在候选区间上归一化
    4. stochastic 模式从 S 抽取一个中心；deterministic 模式取 argmax(S)
    5. 以该中心取 window_w 宽的窗口（截断在信号范围内）
    """
    p = np.asarray(peak_prob, dtype=np.float64).reshape(-1)
    length = p.shape[0]
    width = cfg.window_w
    if width > length:
        raise ShapeError(f"window_w {width} exceeds signal length {length}")
    mode = mode or cfg.mode
    cand_w = min(cfg.candidate_factor * width, length)

    p = np.where(np.isfinite(p), p, 0.0)
    if not np.any(p > 0):
        center = length // 2
        cand_start = int(min(max(center - cand_w // 2, 0), length - cand_w))
        dist = np.zeros(cand_w)
        dist[center - cand_start] = 1.0
        print(f"⚠️ SBP: all peak probabilities are zero, falling back to signal center {center}")
        start = int(min(max(center - width // 2, 0), length - width))
        return RegionProposal(start, width, center, cand_start, dist, fallback=True)

    k = int(np.argmax(p))
    cand_start = int(min(max(k - cand_w // 2, 0), length - cand_w))
    candidate = p[cand_start:cand_start + cand_w]
    dist = np.convolve(candidate, _gaussian_kernel(cfg.gaussian_std), mode="same")
    dist = dist / dist.sum()

    if mode == "stochastic":
        if rng is None:
            raise ConfigError("Stochastic SBP needs a random generator")
        local = int(rng.choice(cand_w, p=dist))
    elif mode == "deterministic":
        local = int(np.argmax(dist))
    else:
        raise ConfigError(f"Unknown SBP mode: {mode}")

    center = cand_start + local
    start = int(min(max(center - width // 2, 0), length - width))
    return RegionProposal(start, width, center, cand_start, dist)


def region_crop(
    decoder_feats: Sequence[Tensor],
    proposals: RegionProposal | Sequence[RegionProposal],
    layer: int,
) -> Tensor:
    """
    按提议窗口裁剪第 layer 层解码特征

    窗口先按 2^layer 下采样：[start // 2^layer, start // 2^layer + width / 2^layer)
    """
    if isinstance(proposals, RegionProposal):
        proposals = [proposals]
    if not 0 <= layer < len(decoder_feats):
        raise ShapeError(f"Layer {layer} out of range")
    width = proposals[0].width
    if width % STRIDE:
        raise ConfigError(f"window_w {width} must be divisible by {STRIDE}")
    if any(p.width != width for p in proposals):
        raise ShapeError("All proposals in a batch must share one width")
    feats = decoder_feats[layer]
    full_len = decoder_feats[0].shape[-1]
    if feats.shape[-1] * 2 ** layer != full_len:
        raise ShapeError(f"Layer {layer} resolution {feats.shape[-1]} != {full_len} / 2^{layer}")
    if feats.shape[0] != len(proposals):
        raise ShapeError(f"{len(proposals)} proposals for batch of {feats.shape[0]}")
    scale = 2 ** layer
    starts = np.array([p.start // scale for p in proposals], dtype=np.int64)
    return ad.crop(feats, starts, width // scale, axis=-1)


def _param_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    ch = config.channels_per_layer
    k = config.kernel_size
    shapes: Dict[str, Tuple[int, ...]] = {}

    def conv(name: str, cout: int, cin: int, size: int) -> None:
        shapes[f"{name}.w"] = (cout, cin, size)
        shapes[f"{name}.b"] = (cout,)

    for prefix in ("coarse", "refined"):
        for i in range(DEPTH):
            if prefix == "coarse":
                cin = 1 if i == 0 else ch[i - 1]
            else:
                # 上一层池化结果（或信号窗口）与同层裁剪特征拼接
                cin = (1 if i == 0 else ch[i - 1]) + ch[i]
            conv(f"{prefix}.enc{i}.conv1", ch[i], cin, k)
            conv(f"{prefix}.enc{i}.conv2", ch[i], ch[i], k)
        for i in range(DEPTH - 1):
            conv(f"{prefix}.dec{i}.up", ch[i], ch[i + 1], k)
            conv(f"{prefix}.dec{i}.gate_enc", ch[i], ch[i], 1)
            conv(f"{prefix}.dec{i}.gate_up", ch[i], ch[i], 1)
            conv(f"{prefix}.dec{i}.conv1", ch[i], 2 * ch[i], k)
            conv(f"{prefix}.dec{i}.conv2", ch[i], ch[i], k)
        conv(f"{prefix}.head", 2, ch[0], 1)

    sizes = [ch[-1], *config.classifier_hidden, config.n_regions]
    for j in range(len(sizes) - 1):
        shapes[f"cls.fc{j}.w"] = (sizes[j], sizes[j + 1])
        shapes[f"cls.fc{j}.b"] = (sizes[j + 1],)
    return shapes


def attention_gate(enc: Tensor, up: Tensor, w_enc: Tensor, b_enc: Tensor, w_up: Tensor, b_up: Tensor) -> Tensor:
    """门控跳连：enc * sigmoid(conv1x1(enc) + conv1x1(up))"""
    if enc.shape != up.shape:
        raise ShapeError(f"Attention gate inputs differ: {enc.shape} vs {up.shape}")
    gate = ad.sigmoid(ad.add(ad.conv1d(enc, w_enc, b_enc), ad.conv1d(up, w_up, b_up)))
    return ad.mul(enc, gate)


@dataclass
class CoarseOutput:
    peak_prob: Tensor                 # [B, signal_len]
    bottleneck: Tensor                # [B, C4, Lp / 16]
    decoder_feats: List[Tensor]       # 第 i 层分辨率 Lp / 2^i，最后一层即瓶颈
    padded_input: Tensor              # [B, 1, Lp]


@dataclass
class CascadeOutput:
    coarse: CoarseOutput
    region_probs: Tensor              # [B, x]
    proposals: List[RegionProposal] = field(default_factory=list)
    refined_prob: Optional[Tensor] = None   # [B, window_w]

    @property
    def peak_prob(self) -> Tensor:
        return self.coarse.peak_prob


class CascadedModel:
    """
    两个 U-Net 级联的骨峰分割 + 区域分类模型

    参数以扁平的 {name: Tensor} 字典保存，名称形如 coarse.enc0.conv1.w
    """

    def __init__(self, config: ModelConfig, params: Dict[str, Tensor]):
        expected = _param_shapes(config)
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        if missing or extra:
            raise ConfigError(f"Parameter set mismatch: missing={missing[:3]} unexpected={extra[:3]}")
        for name, shape in expected.items():
            if tuple(params[name].shape) != shape:
                if name.startswith("cls.") and name.endswith((".w", ".b")):
                    raise ConfigError(
                        f"Classifier parameter {name} has shape {params[name].shape}, "
                        f"{config.area.value} needs {config.n_regions} regions"
                    )
                raise ConfigError(f"Parameter {name} has shape {params[name].shape}, expected {shape}")
        if config.window_w % STRIDE:
            raise ConfigError(f"window_w {config.window_w} must be divisible by {STRIDE}")
        if config.window_w > config.signal_len:
            raise ConfigError(f"window_w {config.window_w} exceeds signal_len {config.signal_len}")
        self.config = config
        self.unet = config.unet
        self.params = params
        self.frozen = False

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int) -> "CascadedModel":
        """He 初始化，偏置置零；随机数来自 init 子流"""
        rng = rng_for(seed, "init")
        dtype = np.dtype(config.dtype)
        params: Dict[str, Tensor] = {}
        for name, shape in _param_shapes(config).items():
            if name.endswith(".b"):
                values = np.zeros(shape, dtype=dtype)
            else:
                fan_in = shape[1] * shape[2] if len(shape) == 3 else shape[0]
                values = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)
            params[name] = Tensor(values, requires_grad=True, name=name)
        return cls(config, params)

    @property
    def area(self) -> Area:
        return self.config.area

    @property
    def n_regions(self) -> int:
        return self.config.n_regions

    def parameters(self) -> Dict[str, Tensor]:
        return self.params

    def freeze(self) -> "CascadedModel":
        """推理用：关闭梯度，参数数组只读，可在线程间共享"""
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
            p.values.setflags(write=False)
        self.frozen = True
        return self

    def region(self, region_id: int) -> RegionLabel:
        return RegionLabel.from_index(self.area, region_id)

    # ------------------------------------------------------------------
    # 基本块
    # ------------------------------------------------------------------

    def _conv(self, x: Tensor, name: str) -> Tensor:
        return ad.conv1d(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def _dual_conv(self, x: Tensor, name: str) -> Tensor:
        x = ad.leaky_relu(self._conv(x, f"{name}.conv1"), LEAKY_SLOPE)
        return ad.leaky_relu(self._conv(x, f"{name}.conv2"), LEAKY_SLOPE)

    def _decode(self, prefix: str, encoder: List[Tensor]) -> List[Tensor]:
        feats: List[Optional[Tensor]] = [None] * DEPTH
        feats[DEPTH - 1] = encoder[DEPTH - 1]
        for i in range(DEPTH - 2, -1, -1):
            name = f"{prefix}.dec{i}"
            up = ad.leaky_relu(self._conv(ad.upsample1d(feats[i + 1], 2), f"{name}.up"), LEAKY_SLOPE)
            gated = attention_gate(
                encoder[i], up,
                self.params[f"{name}.gate_enc.w"], self.params[f"{name}.gate_enc.b"],
                self.params[f"{name}.gate_up.w"], self.params[f"{name}.gate_up.b"],
            )
            feats[i] = self._dual_conv(ad.concat([gated, up], axis=1), name)
        return feats

    def _head(self, prefix: str, feats0: Tensor) -> Tensor:
        """1x1 卷积 + 两类 softmax，返回前景概率 [B, 1, L]"""
        probs = ad.softmax(self._conv(feats0, f"{prefix}.head"), axis=1)
        return ad.crop(probs, 1, 1, axis=1)

    def _as_input(self, x) -> Tensor:
        t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.config.dtype))
        if t.ndim == 1:
            t = ad.reshape(t, (1, 1, t.shape[0]))
        elif t.ndim == 2:
            t = ad.reshape(t, (t.shape[0], 1, t.shape[1]))
        if t.ndim != 3 or t.shape[1] != 1:
            raise ShapeError(f"Expected a frame batch [B, L], got {t.shape}")
        return t

    # ------------------------------------------------------------------
    # 前向
    # ------------------------------------------------------------------

    def coarse_forward(self, x) -> CoarseOutput:
        """
        Coarse U-Net 前向

        Args:
            x: 归一化帧 [B, signal_len]（或 [B, 1, signal_len]）
        """
        x = self._as_input(x)
        length = self.config.signal_len
        if x.shape[-1] != length:
            raise ShapeError(f"Input length {x.shape[-1]} != signal_len {length}")
        pad = padded_len(length) - length
        if pad:
            x = ad.concat([x, Tensor(np.zeros((x.shape[0], 1, pad), dtype=x.dtype))], axis=2)

        encoder: List[Tensor] = []
        h = x
        for i in range(DEPTH):
            if i > 0:
                h, _ = ad.maxpool1d(encoder[-1], 2)
            encoder.append(self._dual_conv(h, f"coarse.enc{i}"))
        feats = self._decode("coarse", encoder)

        prob = ad.crop(self._head("coarse", feats[0]), 0, length, axis=2)
        prob = ad.reshape(prob, (prob.shape[0], length))
        return CoarseOutput(prob, feats[DEPTH - 1], feats, x)

    def classify(self, bottleneck: Tensor) -> Tensor:
        """瓶颈特征在长度上取均值，经三层全连接得到 x 类概率"""
        h = ad.mean(bottleneck, axis=2)
        n_layers = len(self.config.classifier_hidden) + 1
        for j in range(n_layers):
            h = ad.dense(h, self.params[f"cls.fc{j}.w"], self.params[f"cls.fc{j}.b"])
            if j < n_layers - 1:
                h = ad.leaky_relu(h, LEAKY_SLOPE)
        if h.shape[1] != self.n_regions:
            raise ConfigError(f"Classifier emits {h.shape[1]} classes, {self.area.value} has {self.n_regions}")
        return ad.softmax(h, axis=1)

    def refined_forward(self, x_window: Tensor, cropped_feats: Sequence[Tensor]) -> Tensor:
        """
        Refined U-Net 前向

        每层编码器输入 = concat(上一层池化结果或信号窗口, 同层裁剪特征)

        Returns:
            窗口内前景概率 [B, window_w]
        """
        x_window = self._as_input(x_window)
        width = x_window.shape[-1]
        if len(cropped_feats) != DEPTH:
            raise ShapeError(f"Expected {DEPTH} cropped feature maps, got {len(cropped_feats)}")
        for i, f in enumerate(cropped_feats):
            if f.shape[-1] * 2 ** i != width or f.shape[0] != x_window.shape[0]:
                raise ShapeError(f"Cropped layer {i} shape {f.shape} inconsistent with window {x_window.shape}")

        encoder: List[Tensor] = []
        h = x_window
        for i in range(DEPTH):
            if i > 0:
                h, _ = ad.maxpool1d(encoder[-1], 2)
            encoder.append(self._dual_conv(ad.concat([h, cropped_feats[i]], axis=1), f"refined.enc{i}"))
        feats = self._decode("refined", encoder)
        prob = self._head("refined", feats[0])
        return ad.reshape(prob, (prob.shape[0], width))

    def propose(
        self,
        peak_prob: np.ndarray,
        mode: Optional[str] = None,
        rng: Optional[np.random.Generator] = None,
    ) -> List[RegionProposal]:
        probs = np.asarray(peak_prob)
        return [sbp_propose(row, self.config.sbp, rng=rng, mode=mode) for row in probs]

    def forward(
        self,
        x,
        mode: Optional[str] = None,
        rng: Optional[np.random.Generator] = None,
        use_refined: bool = True,
    ) -> CascadeOutput:
        """完整级联：coarse -> classify -> SBP -> 区域裁剪 -> refined"""
        coarse = self.coarse_forward(x)
        region_probs = self.classify(coarse.bottleneck)
        out = CascadeOutput(coarse, region_probs)
        if not use_refined:
            return out
        out.proposals = self.propose(coarse.peak_prob.values, mode=mode, rng=rng)
        starts = np.array([p.start for p in out.proposals], dtype=np.int64)
        x_window = ad.crop(coarse.padded_input, starts, self.config.window_w, axis=-1)
        crops = [region_crop(coarse.decoder_feats, out.proposals, i) for i in range(DEPTH)]
        out.refined_prob = self.refined_forward(x_window, crops)
        return out
