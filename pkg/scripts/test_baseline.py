"""
传统基线测试：窗口内取最高峰、窗口推导、干扰峰失效统计

使用方式:
    pytest scripts/test_baseline.py
"""
from __future__ import annotations

import os
import sys

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
import pytest

from amode.baseline import BaselineConfig, BaselineDetector, baseline_configs, windowed_argmax
from amode.errors import ConfigError
from amode.signal_core import AcousticModel, Area, PeakAnnotation, RegionLabel, depth_to_index, index_to_depth, preprocess_frame
from amode.synthgen import GenConfig, TissueProfile, default_profiles, generate_dataset
from services.eval_service import EvalService, distractor_failures
from services.inference_service import Prediction

AC = AcousticModel(signal_len=512)
DESK_AC = AcousticModel(signal_len=2048)
WINDOW = BaselineConfig(window_start=150, window_end=250)


def _signal(*peaks):
    x = np.zeros(512)
    for idx, amp in peaks:
        x[idx] = amp
    return x


def test_single_peak_in_window():
    assert windowed_argmax(_signal((200, 3000)), WINDOW) == 200


def test_peak_outside_window_is_ignored():
    assert windowed_argmax(_signal((100, 5000), (200, 3000)), WINDOW) == 200


def test_distractor_inside_window_wins():
    assert windowed_argmax(_signal((180, 4000), (200, 3000)), WINDOW) == 180


def test_ties_pick_smallest_index():
    assert windowed_argmax(_signal((170, 3000), (220, 3000)), WINDOW) == 170


def test_weak_window_returns_none():
    cfg = BaselineConfig(window_start=150, window_end=250, min_prominence=500.0)
    assert windowed_argmax(_signal((200, 100)), cfg) is None
    assert windowed_argmax(_signal((200, 600)), cfg) == 200


def test_invalid_windows_are_rejected():
    for start, end in ((250, 150), (200, 200), (-1, 100), (100, 512)):
        with pytest.raises(ConfigError):
            windowed_argmax(_signal((200, 1)), BaselineConfig(window_start=start, window_end=end))


def test_windows_follow_profile_depths():
    profiles = default_profiles(Area.FEMUR)
    ac = AcousticModel()
    configs = baseline_configs(profiles, ac)
    assert sorted(configs) == [11, 12, 15]
    for p in profiles:
        cfg = configs[p.channel]
        lo, hi = p.bone_depth_range
        assert cfg.window_start <= depth_to_index(lo, ac) < depth_to_index(hi, ac) <= cfg.window_end
        assert cfg.min_prominence == pytest.approx(5 * p.noise_sigma)


def test_detector_needs_window_for_channel():
    detector = BaselineDetector.from_profiles(default_profiles(Area.FEMUR)[:1], DESK_AC)
    frame = preprocess_frame(np.zeros(2048), DESK_AC, region=RegionLabel.from_channel(Area.FEMUR, 12))
    with pytest.raises(ConfigError):
        detector.detect(frame)


def test_distractor_free_bias_is_small():
    profiles = [
        TissueProfile(area=Area.FEMUR, channel=ch, soft_amp=(300, 500), bone_depth_range=rng,
                      distractor_prob=0.0, dropout_prob=0.0)
        for ch, rng in ((11, (10, 16)), (12, (14, 22)), (15, (20, 30)))
    ]
    ds = generate_dataset(profiles, GenConfig(seed=9, frames_per_region=20, ac=DESK_AC), verbose=False)
    detector = BaselineDetector.from_profiles(profiles, DESK_AC)
    for frame, ann in ds.frames:
        idx = detector.detect(frame)
        assert idx is not None
        assert abs(idx - ann.midpoint) <= 5


def test_distractor_failures_counts_frames_where_baseline_loses():
    region = RegionLabel.from_channel(Area.FEMUR, 11)
    detector = BaselineDetector({11: WINDOW})
    fooled = preprocess_frame(_signal((180, 4000), (200, 3000)), AC, region=region, frame_id=0)
    clean = preprocess_frame(_signal((200, 3000)), AC, region=region, frame_id=1)
    items = [(fooled, PeakAnnotation.around_index(200, AC)), (clean, PeakAnnotation.around_index(200, AC))]

    service = EvalService(Area.FEMUR, verbose=False)
    baseline = service.baseline_predictions(detector, [f for f, _ in items], AC)
    assert [p.peak_index for p in baseline] == [180, 200]

    exact = [Prediction(i, None, 200, index_to_depth(200, AC)) for i in range(2)]
    assert distractor_failures(baseline, exact, items, detector) == (1, 1.0)

    missed = [Prediction(i, None, None, None) for i in range(2)]
    assert distractor_failures(baseline, missed, items, detector) == (1, 0.0)
