"""
存储与配置测试：数据集 / checkpoint 二进制格式、损坏文件、配置优先级与覆盖

使用方式:
    pytest scripts/test_storage.py
"""
from __future__ import annotations

import os
import sys

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from amode.config import RunConfig, Settings, apply_overrides, build_run_config, default_path
from amode.errors import ConfigError, StorageError
from amode.network import CascadedModel, ModelConfig
from amode.signal_core import AcousticModel, Area
from amode.storage import export_dataset_csv, load_checkpoint, load_dataset, read_csv, save_checkpoint, save_dataset
from amode.synthgen import GenConfig, default_profiles, generate_dataset
from amode.utils import parse_bool, write_json

DESK_AC = AcousticModel(signal_len=2048)


@pytest.fixture(scope="module")
def dataset():
    raw = generate_dataset(default_profiles(Area.TIBIA), GenConfig(seed=4, frames_per_region=3, ac=DESK_AC),
                           verbose=False)
    split = ["train", "test"] * (len(raw) // 2) + ["train"] * (len(raw) % 2)
    return raw.with_split(split)


def _read(path):
    with open(path, "rb") as f:
        return f.read()


# ----------------------------------------------------------------------
# 数据集文件
# ----------------------------------------------------------------------

def test_dataset_file_preserves_frames(tmp_path, dataset):
    path = str(tmp_path / "tibia.amds")
    save_dataset(dataset, path)
    loaded = load_dataset(path)
    assert loaded.area == Area.TIBIA
    assert loaded.ac == DESK_AC
    assert loaded.split == dataset.split
    assert loaded.header["generator"]["seed"] == 4
    for (fa, aa), (fb, ab) in zip(dataset.frames, loaded.frames):
        assert_array_equal(fa.samples, fb.samples)
        assert fa.region == fb.region and fa.frame_id == fb.frame_id
        assert aa == ab


def test_dataset_save_is_byte_stable(tmp_path, dataset):
    a, b = str(tmp_path / "a.amds"), str(tmp_path / "b.amds")
    save_dataset(dataset, a)
    save_dataset(load_dataset(a), b)
    assert _read(a) == _read(b)


def test_corrupt_dataset_files(tmp_path, dataset):
    path = tmp_path / "x.amds"
    save_dataset(dataset, str(path))
    data = _read(path)

    path.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(StorageError):
        load_dataset(str(path))

    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(StorageError):
        load_dataset(str(path))

    with pytest.raises(StorageError):
        load_dataset(str(tmp_path / "missing.amds"))


def test_export_csv(tmp_path, dataset):
    path = str(tmp_path / "frames.csv")
    export_dataset_csv(dataset, path)
    df = read_csv(path)
    assert len(df) == len(dataset)
    assert set(df["split"]) == {"train", "test"}
    assert df["max_amplitude"].max() <= 5000


# ----------------------------------------------------------------------
# checkpoint
# ----------------------------------------------------------------------

def _model():
    config = ModelConfig.for_signal(Area.TIBIA, 512, channels_per_layer=(2, 4, 4, 8, 8), classifier_hidden=(8, 4))
    return CascadedModel.initialize(config, 3)


def test_checkpoint_round_trip(tmp_path):
    model = _model()
    path = str(tmp_path / "tibia.ckpt")
    save_checkpoint(model, path, meta={"epoch": 7})
    loaded, meta = load_checkpoint(path)
    assert meta == {"epoch": 7}
    assert loaded.config == model.config
    assert loaded.n_regions == 5
    for name, p in model.params.items():
        assert_array_equal(loaded.params[name].values, p.values.astype(np.float32))

    again = str(tmp_path / "again.ckpt")
    save_checkpoint(loaded, again, meta={"epoch": 7})
    assert _read(path) == _read(again)


def test_corrupt_checkpoint(tmp_path):
    path = tmp_path / "bad.ckpt"
    save_checkpoint(_model(), str(path))
    data = _read(path)
    path.write_bytes(b"AMDS" + data[4:])
    with pytest.raises(StorageError):
        load_checkpoint(str(path))
    path.write_bytes(data[:-8])
    with pytest.raises(StorageError):
        load_checkpoint(str(path))


def test_model_service_reloads_changed_checkpoint(tmp_path):
    from services.model_service import ModelService

    path = str(tmp_path / "tibia.ckpt")
    save_checkpoint(_model(), path, meta={"epoch": 1})
    service = ModelService()
    first = service.load(path)
    assert first.frozen
    assert service.load(path) is first

    save_checkpoint(_model(), path, meta={"epoch": 2})
    st = os.stat(path)
    os.utime(path, ns=(st.st_atime_ns, st.st_mtime_ns + 10 ** 9))
    model, meta = service.load_with_meta(path)
    assert meta == {"epoch": 2}
    assert model is not first
    # 旧版本已被替换
    assert len(service._cache) == 1


# ----------------------------------------------------------------------
# 配置
# ----------------------------------------------------------------------

def test_parse_bool():
    assert parse_bool("true") is True and parse_bool("0") is False
    with pytest.raises(ConfigError):
        parse_bool("maybe")


def test_overrides_parse_json_values():
    cfg = apply_overrides(RunConfig(command="train"), ["train.lr=1e-4", "model.channels_per_layer=[4,8,16,32,64]"])
    assert cfg.train.lr == 1e-4
    assert cfg.model.channels_per_layer == (4, 8, 16, 32, 64)


def test_unknown_or_invalid_keys_raise_config_error():
    cfg = RunConfig(command="train")
    for bad in (["train.lrr=1"], ["train=1"], ["nonsense"], ["train.epochs=-1"], ["train.test_ratio=0.3"]):
        with pytest.raises(ConfigError):
            apply_overrides(cfg, bad)


def test_precedence_file_then_set_then_flags(tmp_path):
    settings = Settings(data_dir=str(tmp_path), seed=11, workers=3, tau=0.4)
    path = str(tmp_path / "run.json")
    write_json({"train": {"lr": 0.01, "epochs": 3}, "infer": {"tau": 0.6}}, path)

    cfg = build_run_config("train", settings=settings)
    assert (cfg.seed, cfg.synth.workers, cfg.infer.tau) == (11, 3, 0.4)

    cfg = build_run_config("train", config_path=path, settings=settings)
    assert (cfg.train.lr, cfg.train.epochs, cfg.infer.tau) == (0.01, 3, 0.6)

    cfg = build_run_config("train", config_path=path, overrides=["train.lr=0.02"], settings=settings)
    assert cfg.train.lr == 0.02

    cfg = build_run_config("train", config_path=path, overrides=["train.lr=0.02"],
                           flags={"train.lr": 0.03, "train.epochs": None}, settings=settings)
    assert cfg.train.lr == 0.03 and cfg.train.epochs == 3


def test_environment_settings(monkeypatch, tmp_path):
    monkeypatch.setenv("AMODE_DATA_DIR", str(tmp_path))
    monkeypatch.setenv("SEED", "9")
    settings = Settings()
    assert settings.seed == 9
    assert default_path(settings, "femur", "checkpoint") == os.path.join(str(tmp_path), "femur.ckpt")
    monkeypatch.setenv("AMODE_TAU", "half")
    with pytest.raises(ConfigError):
        Settings()
