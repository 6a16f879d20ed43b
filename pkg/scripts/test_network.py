"""
级联网络测试：配置校验、前向形状与概率规律、SBP 统计、区域裁剪、确定性

使用方式:
    pytest scripts/test_network.py
"""
from __future__ import annotations

import os
import sys

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from amode import autodiff as ad
from amode.autodiff import Tensor
from amode.errors import ConfigError, ShapeError
from amode.network import (
    DEPTH,
    CascadedModel,
    ModelConfig,
    SbpConfig,
    UNetConfig,
    attention_gate,
    default_window_w,
    padded_len,
    region_crop,
    sbp_propose,
)
from amode.signal_core import Area

SMALL_CHANNELS = (2, 4, 4, 8, 8)


def small_model(area=Area.FEMUR, signal_len=512, window_w=None, dtype="float64", seed=0):
    config = ModelConfig.for_signal(
        area, signal_len,
        channels_per_layer=SMALL_CHANNELS,
        classifier_hidden=(8, 4),
        dtype=dtype,
        **({"sbp": SbpConfig(window_w=window_w)} if window_w else {}),
    )
    return CascadedModel.initialize(config, seed)


def test_default_window_width():
    assert default_window_w(6760) == 512
    assert default_window_w(2048) == 160
    assert default_window_w(100) == 16
    assert padded_len(6760) == 6768


def test_config_validation():
    with pytest.raises(ValueError):
        UNetConfig(depth=4)
    with pytest.raises(ValueError):
        UNetConfig(input_len=100)
    with pytest.raises(ValueError):
        SbpConfig(candidate_factor=2)
    with pytest.raises(ValueError):
        SbpConfig(gaussian_std=2.0)
    with pytest.raises(ValueError):
        ModelConfig(channels_per_layer=(4, 8))


def test_window_must_be_multiple_of_sixteen():
    config = ModelConfig.for_signal(Area.FEMUR, 512, channels_per_layer=SMALL_CHANNELS,
                                    classifier_hidden=(8, 4), sbp=SbpConfig(window_w=40))
    with pytest.raises(ConfigError):
        CascadedModel.initialize(config, 0)


def test_classifier_size_follows_area():
    assert small_model(Area.FEMUR).n_regions == 3
    tibia = small_model(Area.TIBIA)
    assert tibia.params["cls.fc2.w"].shape == (4, 5)


def test_checkpoint_params_must_match_area():
    femur = small_model(Area.FEMUR)
    config = femur.config.model_copy(update={"area": Area.TIBIA})
    with pytest.raises(ConfigError):
        CascadedModel(config, femur.params)


def test_coarse_forward_shapes_and_probabilities():
    model = small_model()
    x = np.random.default_rng(0).uniform(0, 1, (3, 512))
    out = model.coarse_forward(x)
    assert out.peak_prob.shape == (3, 512)
    p = out.peak_prob.values
    assert np.all((p > 0) & (p < 1))
    assert len(out.decoder_feats) == DEPTH
    for i, feats in enumerate(out.decoder_feats):
        assert feats.shape == (3, SMALL_CHANNELS[i], 512 // 2 ** i)
    with pytest.raises(ShapeError):
        model.coarse_forward(np.zeros((1, 500)))


def test_coarse_forward_pads_odd_lengths():
    model = small_model(signal_len=500, window_w=32)
    out = model.coarse_forward(np.random.default_rng(1).uniform(0, 1, (2, 500)))
    assert out.peak_prob.shape == (2, 500)
    assert out.padded_input.shape == (2, 1, 512)


def test_untrained_forward_is_finite():
    model = small_model(dtype="float32")
    x = np.random.default_rng(2).uniform(0, 1, (100, 512)).astype(np.float32)
    out = model.forward(x, mode="deterministic")
    assert np.all(np.isfinite(out.peak_prob.values))
    assert np.all(np.isfinite(out.refined_prob.values))
    assert np.all(np.isfinite(out.region_probs.values))


def test_classifier_probabilities():
    model = small_model()
    out = model.coarse_forward(np.random.default_rng(3).uniform(0, 1, (4, 512)))
    probs = model.classify(out.bottleneck).values
    assert probs.shape == (4, 3)
    assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)


def test_softmax_argmax_invariant_to_shift():
    logits = np.random.default_rng(4).standard_normal((5, 3))
    a = ad.softmax(Tensor(logits), axis=1).values
    b = ad.softmax(Tensor(logits + 7.5), axis=1).values
    assert_array_equal(a.argmax(axis=1), b.argmax(axis=1))


def test_attention_gate_scales_encoder_features():
    rng = np.random.default_rng(6)
    enc = Tensor(rng.uniform(0.1, 1.0, (2, 3, 8)))
    up = Tensor(rng.standard_normal((2, 3, 8)))
    w = [Tensor(rng.standard_normal(s)) for s in ((3, 3, 1), (3,), (3, 3, 1), (3,))]
    out = attention_gate(enc, up, *w).values
    assert out.shape == enc.shape
    ratio = out / enc.values
    assert np.all((ratio > 0) & (ratio < 1))


# ----------------------------------------------------------------------
# SBP
# ----------------------------------------------------------------------

def _delta(length, *positions):
    p = np.zeros(length)
    for k in positions:
        p[k] = 1.0
    return p


def test_sbp_delta_deterministic_centers_on_peak():
    cfg = SbpConfig(window_w=32)
    prop = sbp_propose(_delta(512, 200), cfg, mode="deterministic")
    assert prop.center == 200
    assert prop.start == 200 - 16
    assert prop.width == 32
    assert prop.distribution.sum() == pytest.approx(1.0, abs=1e-9)
    assert not prop.fallback


def test_sbp_stochastic_mean_near_delta():
    cfg = SbpConfig(window_w=32)
    rng = np.random.default_rng(11)
    centers = [sbp_propose(_delta(512, 250), cfg, rng=rng, mode="stochastic").center for _ in range(10_000)]
    assert abs(np.mean(centers) - 250) < 0.05


def test_sbp_bimodal_masses_equal():
    cfg = SbpConfig(window_w=32)
    rng = np.random.default_rng(12)
    centers = np.array([
        sbp_propose(_delta(512, 240, 280), cfg, rng=rng, mode="stochastic").center for _ in range(10_000)
    ])
    left = np.mean(centers < 260)
    assert abs(left - 0.5) < 0.02


def test_sbp_windows_stay_in_bounds():
    cfg = SbpConfig(window_w=32)
    for k in (0, 1, 15, 16, 255, 495, 510, 511):
        for mode in ("deterministic", "stochastic"):
            prop = sbp_propose(_delta(512, k), cfg, rng=np.random.default_rng(k), mode=mode)
            assert 0 <= prop.start and prop.end <= 512
            assert prop.candidate_start >= 0
            assert prop.candidate_start + len(prop.distribution) <= 512


def test_sbp_all_zero_falls_back_to_center(capsys):
    prop = sbp_propose(np.zeros(512), SbpConfig(window_w=32), mode="deterministic")
    assert prop.fallback
    assert prop.center == 256
    assert "⚠️" in capsys.readouterr().out


def test_sbp_stochastic_needs_rng():
    with pytest.raises(ConfigError):
        sbp_propose(_delta(512, 100), SbpConfig(window_w=32), mode="stochastic")


# ----------------------------------------------------------------------
# 区域裁剪与 Refined U-Net
# ----------------------------------------------------------------------

def test_region_crop_widths_and_content():
    model = small_model(window_w=64)
    out = model.coarse_forward(np.random.default_rng(7).uniform(0, 1, (1, 512)))
    prop = sbp_propose(_delta(512, 300), model.config.sbp, mode="deterministic")
    crop0 = region_crop(out.decoder_feats, prop, 0)
    crop2 = region_crop(out.decoder_feats, prop, 2)
    assert crop0.shape[-1] == 64
    assert crop2.shape[-1] == 16
    full = out.decoder_feats[2].values
    assert_array_equal(crop2.values, full[:, :, prop.start // 4:prop.start // 4 + 16])


def test_refined_forward_shape_and_offset():
    model = small_model(window_w=64)
    out = model.forward(np.random.default_rng(8).uniform(0, 1, (2, 512)), mode="deterministic")
    assert out.refined_prob.shape == (2, 64)
    for row, prop in enumerate(out.proposals):
        local = int(np.argmax(out.refined_prob.values[row]))
        embedded = np.zeros(512)
        embedded[prop.start:prop.end] = out.refined_prob.values[row]
        assert prop.start + local == int(np.argmax(embedded))


def test_refined_forward_rejects_inconsistent_crops():
    model = small_model(window_w=64)
    out = model.coarse_forward(np.zeros((1, 512)))
    prop = sbp_propose(_delta(512, 100), model.config.sbp, mode="deterministic")
    crops = [region_crop(out.decoder_feats, prop, i) for i in range(DEPTH)]
    with pytest.raises(ShapeError):
        model.refined_forward(np.zeros((1, 32)), crops)


def test_deterministic_forward_is_bit_identical():
    model = small_model(dtype="float32")
    x = np.random.default_rng(9).uniform(0, 1, (3, 512)).astype(np.float32)
    a = model.forward(x, mode="deterministic")
    b = model.forward(x, mode="deterministic")
    assert_array_equal(a.peak_prob.values, b.peak_prob.values)
    assert_array_equal(a.refined_prob.values, b.refined_prob.values)
    assert [p.start for p in a.proposals] == [p.start for p in b.proposals]


def test_initialization_is_seeded():
    a, b, c = small_model(seed=1), small_model(seed=1), small_model(seed=2)
    assert_array_equal(a.params["coarse.enc0.conv1.w"].values, b.params["coarse.enc0.conv1.w"].values)
    assert not np.array_equal(a.params["coarse.enc0.conv1.w"].values, c.params["coarse.enc0.conv1.w"].values)


def test_frozen_parameters_are_read_only():
    model = small_model().freeze()
    with pytest.raises(ValueError):
        model.params["coarse.head.w"].values[...] = 0.0
