"""
模拟器测试：单帧规律、确定性、数据集计数、组织参数文件、诊断指标

使用方式:
    pytest scripts/test_synthgen.py
"""
from __future__ import annotations

import os
import sys

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from amode.errors import ConfigError, GeneratorError
from amode.signal_core import AcousticModel, Area, depth_to_index, index_to_depth
from amode.synthgen import (
    GenConfig,
    TissueProfile,
    default_profiles,
    distractor_rate,
    flexion_depth,
    generate_dataset,
    generate_frame,
    load_profiles,
    profiles_from_header,
    pulse_template,
    region_separability,
)
from amode.utils import rng_for

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
AC = AcousticModel()
DESK_AC = AcousticModel(signal_len=2048)


def _quiet_profile(**kw):
    base = dict(area=Area.FEMUR, channel=11, n_soft_interfaces=(0, 0), noise_sigma=0.0,
                distractor_prob=0.0, dropout_prob=0.0)
    base.update(kw)
    return TissueProfile(**base)


def test_single_peak_argmax_matches_depth():
    profile = _quiet_profile(bone_depth_range=(20, 30))
    frame, ann = generate_frame(profile, np.random.default_rng(0), AC)
    assert ann.present
    assert int(np.argmax(frame.samples)) == depth_to_index(ann.depth_mm, AC)
    ann.validate(AC)


def test_attenuation_is_monotone_in_depth():
    profile = _quiet_profile(bone_amp=(3000, 3000))
    shallow, _ = generate_frame(profile, np.random.default_rng(0), AC, depth_mm=20.0)
    deep, _ = generate_frame(profile, np.random.default_rng(0), AC, depth_mm=100.0)
    assert deep.samples.max() < shallow.samples.max()


def test_pulse_template_peaks_at_center():
    template = pulse_template(10, AC.fs)
    assert int(np.argmax(template)) == len(template) // 2
    assert template.max() == pytest.approx(1.0)
    above = np.flatnonzero(template >= 0.5)
    # 整流后的载波使半高区间略宽于包络
    assert 5 <= above[-1] - above[0] + 1 <= 14


def test_same_seed_same_frame():
    profile = default_profiles(Area.FEMUR)[1]
    a, ann_a = generate_frame(profile, rng_for(7, "dataset", 3), AC, frame_id=3)
    b, ann_b = generate_frame(profile, rng_for(7, "dataset", 3), AC, frame_id=3)
    assert_array_equal(a.samples, b.samples)
    assert ann_a == ann_b


def test_amplitudes_within_clamp():
    for profile in default_profiles(Area.TIBIA):
        frame, _ = generate_frame(profile, np.random.default_rng(profile.channel), AC)
        assert frame.samples.min() >= 0 and frame.samples.max() <= 5000


def test_depth_outside_signal_raises_generator_error():
    profile = _quiet_profile(bone_depth_range=(50, 60))
    with pytest.raises(GeneratorError):
        generate_frame(profile, np.random.default_rng(0), DESK_AC)


def test_profile_validation():
    with pytest.raises(ValueError):
        _quiet_profile(dropout_prob=0.2)
    with pytest.raises(ValueError):
        _quiet_profile(bone_depth_range=(2, 10))
    with pytest.raises(ValueError):
        _quiet_profile(bone_amp=(3000, 6000))
    with pytest.raises(ValueError):
        TissueProfile(area=Area.FEMUR, channel=16)


def test_dataset_counts_and_annotations():
    cfg = GenConfig(seed=7, frames_per_region=20, ac=DESK_AC)
    ds = generate_dataset(default_profiles(Area.FEMUR), cfg, verbose=False)
    assert len(ds) == 60
    per_region = {}
    for frame, ann in ds.frames:
        per_region[frame.region.channel] = per_region.get(frame.region.channel, 0) + 1
        if ann.present:
            assert abs(index_to_depth(ann.midpoint, DESK_AC) - ann.depth_mm) <= DESK_AC.d_unit
    assert per_region == {11: 20, 12: 20, 15: 20}
    assert ds.header["generator"]["seed"] == 7


def test_dataset_independent_of_worker_count():
    one = generate_dataset(default_profiles(Area.FEMUR), GenConfig(seed=3, frames_per_region=6, ac=DESK_AC),
                           verbose=False)
    four = generate_dataset(default_profiles(Area.FEMUR),
                            GenConfig(seed=3, frames_per_region=6, ac=DESK_AC, workers=4), verbose=False)
    for (fa, aa), (fb, ab) in zip(one.frames, four.frames):
        assert_array_equal(fa.samples, fb.samples)
        assert aa == ab


def test_dataset_rejects_bad_profile_sets():
    femur = default_profiles(Area.FEMUR)
    tibia = default_profiles(Area.TIBIA)
    cfg = GenConfig(frames_per_region=1, ac=DESK_AC)
    with pytest.raises(ConfigError):
        generate_dataset(femur[:1], cfg, verbose=False)
    with pytest.raises(ConfigError):
        generate_dataset([femur[0], tibia[0]], cfg, verbose=False)
    with pytest.raises(ConfigError):
        generate_dataset([femur[0], femur[0]], cfg, verbose=False)


def test_flexion_motion_sweeps_depth_range():
    profile = default_profiles(Area.FEMUR)[0]
    rng = np.random.default_rng(0)
    depths = [flexion_depth(profile, step, 50, rng) for step in range(50)]
    lo, hi = profile.bone_depth_range
    assert min(depths) >= lo and max(depths) <= hi
    assert depths[25] > depths[0] + 0.5 * (hi - lo)


def test_flexion_dataset_generates():
    cfg = GenConfig(seed=1, frames_per_region=10, ac=DESK_AC, motion="flexion", flexion_period=10)
    ds = generate_dataset(default_profiles(Area.TIBIA), cfg, verbose=False)
    assert len(ds) == 50
    assert ds.header["generator"]["motion"] == "flexion"


def test_diagnostics_distractors_and_separability():
    cfg = GenConfig(seed=7, frames_per_region=60, ac=DESK_AC)
    ds = generate_dataset(default_profiles(Area.FEMUR), cfg, verbose=False)
    assert distractor_rate(ds) >= 0.3
    assert region_separability(ds, seed=7) > 0.6
    assert ds.header["diagnostics"]["distractor_rate"] == pytest.approx(distractor_rate(ds), abs=1e-6)


def test_profile_files_match_defaults():
    for area in Area:
        loaded = load_profiles(os.path.join(ROOT, "profiles", f"{area.value}.ini"))
        defaults = {p.channel: p for p in default_profiles(area)}
        assert sorted(p.channel for p in loaded) == sorted(defaults)
        for p in loaded:
            assert p.bone_depth_range == defaults[p.channel].bone_depth_range
            assert p.n_soft_interfaces == defaults[p.channel].n_soft_interfaces


def test_profile_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_profiles(str(tmp_path / "missing.ini"))
    bad = tmp_path / "bad.ini"
    bad.write_text("[x]\narea = femur\nchannel = 11\ndropout_prob = 0.5\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_profiles(str(bad))
    typo = tmp_path / "typo.ini"
    typo.write_text("[x]\narea = femur\nchannel = 11\nbone_dpeth_range = 10, 12\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_profiles(str(typo))


def test_profiles_from_header_round_trip():
    cfg = GenConfig(seed=2, frames_per_region=2, ac=DESK_AC)
    profiles = default_profiles(Area.FEMUR)
    ds = generate_dataset(profiles, cfg, verbose=False)
    assert profiles_from_header(ds.header, Area.FEMUR) == profiles
    assert profiles_from_header({}, Area.TIBIA) == default_profiles(Area.TIBIA)
