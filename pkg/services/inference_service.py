"""
推理服务模块 - 网络输出后处理为骨峰位置、深度与区域标签
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from amode.errors import ConfigError, ShapeError
from amode.network import CascadedModel, RegionProposal
from amode.signal_core import AModeFrame, PeakAnnotation, RegionLabel, index_to_depth
from amode.utils import rng_for


@dataclass(frozen=True)
class Segment:
    """阈值以上的连续区段 [start, end]（闭区间）及区段内最大概率"""
    start: int
    end: int
    peak_score: float

    @property
    def midpoint(self) -> int:
        return (self.start + self.end) // 2


@dataclass(frozen=True)
class Prediction:
    """
    单帧预测

    region 为 None 表示方法不做区域分类（传统基线）；
    depth_mm 与 peak_index 同时存在或同时缺失
    """
    frame_id: int
    region: Optional[RegionLabel]
    peak_index: Optional[int]
    depth_mm: Optional[float]
    coarse_segments: Tuple[Segment, ...] = ()
    refined_segments: Tuple[Segment, ...] = ()
    proposal_start: Optional[int] = None
    latency_ms: Optional[float] = None

    def __post_init__(self):
        if (self.peak_index is None) != (self.depth_mm is None):
            raise ShapeError("depth_mm must be present exactly when peak_index is present")


def threshold_segments(prob: Sequence[float] | np.ndarray, tau: float) -> List[Segment]:
    """
    概率 >= tau 的极大连续区段

    Args:
        prob: 逐位置前景概率
        tau: 阈值，必须在 (0, 1) 内
    """
    if not 0 < tau < 1:
        raise ConfigError(f"Threshold tau must lie in (0, 1), got {tau}")
    p = np.asarray(prob, dtype=np.float64).reshape(-1)
    above = (p >= tau).astype(np.int8)
    edges = np.diff(np.concatenate(([0], above, [0])))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1) - 1
    return [Segment(int(s), int(e), float(p[s:e + 1].max())) for s, e in zip(starts, ends)]


def _best(segments: Sequence[Segment]) -> Segment:
    # 最高分优先，同分取起点最小
    return min(segments, key=lambda s: (-s.peak_score, s.start))


def resolve_peak(
    coarse_segs: Sequence[Segment],
    refined_segs: Sequence[Segment],
    proposal: RegionProposal | int | None,
) -> Optional[int]:
    """
    Coarse 分割确认骨峰存在，Refined 分割给出精确位置

    - coarse 为空: 无骨峰
    - refined 非空: proposal.start + 得分最高 refined 区段的中点
    - refined 为空: 退回得分最高 coarse 区段的中点
    """
    if not coarse_segs:
        return None
    if refined_segs:
        if proposal is None:
            raise ShapeError("Refined segments need the proposal window start")
        start = proposal.start if isinstance(proposal, RegionProposal) else int(proposal)
        return start + _best(refined_segs).midpoint
    return _best(coarse_segs).midpoint


class InferenceService:
    """
    推理服务
    - 冻结模型 + 帧 -> Prediction
    - deterministic 模式下预测结果是 (权重, 输入) 的纯函数；两种模式都记录单帧耗时
    """

    def __init__(
        self,
        model: CascadedModel,
        tau: float = 0.5,
        deterministic: bool = True,
        use_refined: bool = True,
        seed: int = 42,
    ):
        if not 0 < tau < 1:
            raise ConfigError(f"Threshold tau must lie in (0, 1), got {tau}")
        self.model = model
        self.tau = tau
        self.deterministic = deterministic
        self.use_refined = use_refined
        self.mode = "deterministic" if deterministic else "stochastic"
        self._rng = None if deterministic else rng_for(seed, "sbp", 1)

    def _check_frames(self, frames: Sequence[AModeFrame]) -> None:
        for f in frames:
            if f.region.area != self.model.area:
                raise ConfigError(
                    f"Frame {f.frame_id} is from {f.region.area.value}, model expects {self.model.area.value}"
                )
            if len(f) != self.model.config.signal_len:
                raise ShapeError(f"Frame {f.frame_id} length {len(f)} != model signal_len {self.model.config.signal_len}")

    def predict_batch(self, frames: Sequence[AModeFrame]) -> List[Prediction]:
        if not frames:
            return []
        self._check_frames(frames)
        x = np.stack([f.normalized for f in frames]).astype(self.model.config.dtype)
        t0 = time.perf_counter()
        out = self.model.forward(x, mode=self.mode, rng=self._rng, use_refined=self.use_refined)
        coarse_prob = out.peak_prob.values
        region_ids = np.argmax(out.region_probs.values, axis=1)
        refined_prob = out.refined_prob.values if out.refined_prob is not None else None
        latency = (time.perf_counter() - t0) * 1000.0 / len(frames)

        predictions = []
        for row, frame in enumerate(frames):
            coarse = threshold_segments(coarse_prob[row], self.tau)
            refined = threshold_segments(refined_prob[row], self.tau) if refined_prob is not None else []
            proposal = out.proposals[row] if out.proposals else None
            peak = resolve_peak(coarse, refined, proposal)
            predictions.append(Prediction(
                frame_id=frame.frame_id,
                region=self.model.region(int(region_ids[row])),
                peak_index=peak,
                depth_mm=None if peak is None else index_to_depth(peak, self.model.config.acoustic),
                coarse_segments=tuple(coarse),
                refined_segments=tuple(refined),
                proposal_start=None if proposal is None else proposal.start,
                latency_ms=latency,
            ))
        return predictions

    def predict(self, frame: AModeFrame) -> Prediction:
        return self.predict_batch([frame])[0]

    def predict_all(
        self,
        frames: Iterable[AModeFrame],
        batch_size: int = 10,
        verbose: bool = True,
    ) -> List[Prediction]:
        frames = list(frames)
        predictions: List[Prediction] = []
        batches = range(0, len(frames), batch_size)
        for i in tqdm(batches, desc="推理", disable=not verbose):
            predictions.extend(self.predict_batch(frames[i:i + batch_size]))
        return predictions


def predict(
    model: CascadedModel,
    frame: AModeFrame,
    tau: float = 0.5,
    use_refined: bool = True,
) -> Prediction:
    """确定性单帧推理"""
    return InferenceService(model, tau=tau, deterministic=True, use_refined=use_refined).predict(frame)


def peak_mae(predictions: Sequence[Prediction], annotations: Sequence[PeakAnnotation]) -> float:
    """有骨峰且有预测的帧上的平均绝对误差（采样点）；没有可比帧时为 inf"""
    errors = [
        abs(p.peak_index - a.midpoint)
        for p, a in zip(predictions, annotations)
        if a.present and p.peak_index is not None
    ]
    return float(np.mean(errors)) if errors else float("inf")
