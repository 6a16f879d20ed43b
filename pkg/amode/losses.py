"""
训练损失：Dice、二分类交叉熵、区域分类交叉熵及其总和
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import RangeError, ShapeError
from .network import RegionProposal
from .signal_core import PeakAnnotation

DICE_EPS = 1e-6
LOG_FLOOR = 1e-12


def _as_batch(pred: Tensor, truth: np.ndarray) -> tuple[Tensor, np.ndarray]:
    truth = np.asarray(truth, dtype=pred.dtype)
    if pred.shape != truth.shape:
        raise ShapeError(f"Prediction shape {pred.shape} != truth shape {truth.shape}")
    if pred.ndim == 1:
        pred = ad.reshape(pred, (1, pred.shape[0]))
        truth = truth.reshape(1, -1)
    if pred.ndim != 2:
        raise ShapeError(f"Expected [B, L] probabilities, got {pred.shape}")
    return pred, truth


def dice_loss(pred: Tensor, truth: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """
    1 - (2 * sum(p * t) + eps) / (sum(p) + sum(t) + eps)

    逐帧计算后在 batch 上取平均
    """
    pred, truth = _as_batch(pred, truth)
    if np.any((truth != 0) & (truth != 1)):
        raise RangeError("Dice truth mask must be binary")
    inter = ad.sum(ad.mul(pred, truth), axis=1)
    denom = ad.add(ad.add(ad.sum(pred, axis=1), truth.sum(axis=1)), eps)
    ratio = ad.div(ad.add(ad.mul(inter, 2.0), eps), denom)
    return ad.mean(ad.sub(1.0, ratio))


def ce_loss(pred: Tensor, truth: np.ndarray, floor: float = LOG_FLOOR) -> Tensor:
    """逐位置二分类交叉熵的平均值"""
    pred, truth = _as_batch(pred, truth)
    pos = ad.mul(ad.log(pred, floor), truth)
    neg = ad.mul(ad.log(ad.sub(1.0, pred), floor), 1.0 - truth)
    return ad.mul(ad.mean(ad.add(pos, neg)), -1.0)


def cls_loss(region_probs: Tensor, true_region: Sequence[int] | np.ndarray, floor: float = LOG_FLOOR) -> Tensor:
    """区域分类交叉熵，batch 平均"""
    if region_probs.ndim == 1:
        region_probs = ad.reshape(region_probs, (1, region_probs.shape[0]))
    labels = np.asarray(true_region, dtype=np.int64).reshape(-1)
    batch, n_classes = region_probs.shape
    if labels.shape[0] != batch:
        raise ShapeError(f"{labels.shape[0]} labels for batch of {batch}")
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise RangeError(f"Region labels must lie in [0, {n_classes})")
    onehot = np.zeros((batch, n_classes), dtype=region_probs.dtype)
    onehot[np.arange(batch), labels] = 1.0
    nll = ad.sum(ad.mul(ad.log(region_probs, floor), onehot), axis=1)
    return ad.mul(ad.mean(nll), -1.0)


def segment_mask(annotations: Sequence[PeakAnnotation], length: int) -> np.ndarray:
    """标注区段转为 [B, length] 的 0/1 掩码；无骨峰的帧为全零"""
    mask = np.zeros((len(annotations), length), dtype=np.float64)
    for row, ann in enumerate(annotations):
        if ann.present:
            mask[row, max(ann.seg_start, 0):min(ann.seg_end + 1, length)] = 1.0
    return mask


def window_mask(annotations: Sequence[PeakAnnotation], proposals: Sequence[RegionProposal]) -> np.ndarray:
    """
    标注区段映射到各自的提议窗口内

    真实峰（区段中点）不在窗口内时为全零掩码
    """
    if len(annotations) != len(proposals):
        raise ShapeError("One proposal per annotation is required")
    width = proposals[0].width if proposals else 0
    mask = np.zeros((len(annotations), width), dtype=np.float64)
    for row, (ann, prop) in enumerate(zip(annotations, proposals)):
        if not ann.present or not prop.start <= ann.midpoint < prop.end:
            continue
        lo = max(ann.seg_start - prop.start, 0)
        hi = min(ann.seg_end - prop.start + 1, width)
        mask[row, lo:hi] = 1.0
    return mask


@dataclass
class LossBreakdown:
    l_dice: float
    l_ce: float
    l_dice_refined: float
    l_ce_refined: float
    l_cls: float
    tensor: Optional[Tensor] = None

    @property
    def total(self) -> float:
        return self.l_dice + self.l_ce + self.l_dice_refined + self.l_ce_refined + self.l_cls

    def as_row(self) -> dict:
        return {
            "l_dice": self.l_dice,
            "l_ce": self.l_ce,
            "l_dice_refined": self.l_dice_refined,
            "l_ce_refined": self.l_ce_refined,
            "l_cls": self.l_cls,
            "total": self.total,
        }


def total_loss(
    coarse_prob: Tensor,
    refined_prob: Optional[Tensor],
    region_probs: Tensor,
    coarse_truth: np.ndarray,
    refined_truth: Optional[np.ndarray],
    region_ids: Sequence[int] | np.ndarray,
    eps: float = DICE_EPS,
) -> LossBreakdown:
    """
    五项损失的无权重和：l_dice + l_ce + l_dice' + l_ce' + l_cls

    refined_prob 为 None（仅 coarse 消融）时 refined 两项记为 0
    """
    terms = [dice_loss(coarse_prob, coarse_truth, eps), ce_loss(coarse_prob, coarse_truth)]
    if refined_prob is not None:
        if refined_truth is None:
            raise ShapeError("Refined output given without a refined target")
        terms += [dice_loss(refined_prob, refined_truth, eps), ce_loss(refined_prob, refined_truth)]
    cls_term = cls_loss(region_probs, region_ids)
    terms.append(cls_term)

    tensor = terms[0]
    for t in terms[1:]:
        tensor = ad.add(tensor, t)

    values = [t.item() for t in terms]
    if refined_prob is None:
        values = values[:2] + [0.0, 0.0] + values[2:]
    return LossBreakdown(*values, tensor=tensor)
