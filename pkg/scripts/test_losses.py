"""
损失函数测试：Dice / 交叉熵取值规律、掩码构造、五项损失之和

使用方式:
    pytest scripts/test_losses.py
"""
from __future__ import annotations

import math
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from amode.autodiff import Tape, Tensor
from amode.errors import RangeError, ShapeError
from amode.losses import DICE_EPS, ce_loss, cls_loss, dice_loss, segment_mask, total_loss, window_mask
from amode.network import RegionProposal
from amode.signal_core import AcousticModel, PeakAnnotation

AC = AcousticModel(signal_len=512)


def _mask(length, start, width):
    m = np.zeros(length)
    m[start:start + width] = 1.0
    return m


def _proposal(start, width=32):
    return RegionProposal(start=start, width=width, center=start + width // 2, candidate_start=0,
                          distribution=np.ones(1))


def test_dice_perfect_overlap():
    truth = _mask(100, 40, 10)
    assert dice_loss(Tensor(truth.copy()), truth).item() <= 1e-5


def test_dice_disjoint_masks():
    loss = dice_loss(Tensor(_mask(100, 0, 10)), _mask(100, 50, 10)).item()
    assert loss == pytest.approx(1 - DICE_EPS / (20 + DICE_EPS))
    assert loss > 0.999


def test_dice_empty_empty_is_zero():
    assert dice_loss(Tensor(np.zeros(50)), np.zeros(50)).item() == pytest.approx(0.0, abs=1e-12)


def test_dice_bounded_on_random_inputs():
    rng = np.random.default_rng(0)
    for _ in range(50):
        pred = rng.uniform(0, 1, (3, 40))
        truth = (rng.uniform(0, 1, (3, 40)) > 0.8).astype(float)
        value = dice_loss(Tensor(pred), truth).item()
        assert 0.0 <= value <= 1.0


def test_dice_rejects_bad_inputs():
    with pytest.raises(ShapeError):
        dice_loss(Tensor(np.zeros(10)), np.zeros(11))
    with pytest.raises(RangeError):
        dice_loss(Tensor(np.zeros(4)), np.array([0.0, 0.5, 1.0, 0.0]))


def test_ce_perfect_and_floored():
    truth = _mask(20, 5, 3)
    assert ce_loss(Tensor(truth.copy()), truth).item() == pytest.approx(0.0, abs=1e-9)
    wrong = ce_loss(Tensor(1.0 - truth), truth).item()
    assert math.isfinite(wrong) and wrong > 1.0


def test_cls_loss_closed_forms():
    uniform = Tensor(np.full((4, 3), 1.0 / 3.0))
    assert cls_loss(uniform, [0, 1, 2, 0]).item() == pytest.approx(math.log(3), rel=1e-12)

    onehot = np.eye(3)[[2, 0]]
    assert cls_loss(Tensor(onehot), [2, 0]).item() == pytest.approx(0.0, abs=1e-12)

    zero_on_truth = cls_loss(Tensor(onehot), [0, 1]).item()
    assert math.isfinite(zero_on_truth)
    assert zero_on_truth == pytest.approx(-math.log(1e-12))

    with pytest.raises(RangeError):
        cls_loss(uniform, [0, 1, 2, 3])


def test_segment_mask_marks_annotation():
    anns = [PeakAnnotation.around_index(100, AC), PeakAnnotation.absent(5.0)]
    mask = segment_mask(anns, 512)
    assert mask[0].sum() == 10
    assert mask[0, anns[0].seg_start] == 1 and mask[0, anns[0].seg_end] == 1
    assert not mask[1].any()


def test_window_mask_reindexes_into_proposal():
    ann = PeakAnnotation.around_index(100, AC)
    mask = window_mask([ann], [_proposal(90)])
    assert_array_equal(np.flatnonzero(mask[0]), np.arange(ann.seg_start - 90, ann.seg_end - 90 + 1))


def test_window_mask_empty_when_peak_outside_window():
    ann = PeakAnnotation.around_index(100, AC)
    assert not window_mask([ann], [_proposal(200)]).any()
    assert not window_mask([PeakAnnotation.absent(3.0)], [_proposal(0)]).any()


def test_total_loss_is_component_sum():
    rng = np.random.default_rng(1)
    coarse = Tensor(rng.uniform(0.01, 0.99, (2, 64)), requires_grad=True)
    refined = Tensor(rng.uniform(0.01, 0.99, (2, 16)), requires_grad=True)
    regions = Tensor(np.array([[0.2, 0.5, 0.3], [0.6, 0.3, 0.1]]), requires_grad=True)
    coarse_truth = np.stack([_mask(64, 10, 10), _mask(64, 30, 10)])
    refined_truth = np.stack([_mask(16, 3, 10), np.zeros(16)])

    with Tape() as tape:
        losses = total_loss(coarse, refined, regions, coarse_truth, refined_truth, [1, 0])
    parts = [losses.l_dice, losses.l_ce, losses.l_dice_refined, losses.l_ce_refined, losses.l_cls]
    assert all(p >= 0 for p in parts)
    assert losses.l_dice <= 1 and losses.l_dice_refined <= 1
    assert losses.total == sum(parts)
    assert losses.tensor.item() == pytest.approx(losses.total, rel=1e-12)
    assert losses.l_dice == pytest.approx(dice_loss(Tensor(coarse.values), coarse_truth).item())

    tape.backward(losses.tensor)
    for t in (coarse, refined, regions):
        assert t.grad is not None and np.all(np.isfinite(t.grad))


def test_total_loss_all_zero_components():
    truth = _mask(32, 4, 10)[None]
    losses = total_loss(Tensor(truth.copy()), Tensor(truth.copy()), Tensor(np.eye(3)[[1]]), truth, truth, [1])
    assert losses.l_dice == 0.0 and losses.l_dice_refined == 0.0
    assert losses.total == 0.0


def test_total_loss_without_refined_branch():
    truth = _mask(32, 4, 10)[None]
    losses = total_loss(Tensor(np.full((1, 32), 0.3)), None, Tensor(np.eye(3)[[0]]), truth, None, [0])
    assert losses.l_dice_refined == 0.0 and losses.l_ce_refined == 0.0
    assert losses.as_row()["total"] == losses.total
