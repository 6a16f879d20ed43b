"""
命令行测试：帮助信息、参数错误退出码、synth 的可复现输出

使用方式:
    pytest scripts/test_cli.py
"""
from __future__ import annotations

import os
import sys

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import pytest

from main import run

DESK = ["--signal-len", "2048", "--frames", "2", "--quiet"]


@pytest.fixture
def data_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("AMODE_DATA_DIR", str(tmp_path))
    return tmp_path


COMMON_FLAGS = ("--area", "--dataset", "--checkpoint", "--report", "--output", "--seed", "--epochs", "--batch",
                "--lr", "--window-w", "--tau", "--deterministic", "--set", "--config", "--quiet")
COMMAND_FLAGS = {
    "synth": ("--frames", "--signal-len", "--motion", "--profiles", "--workers"),
    "train": (),
    "infer": ("--split", "--no-refined"),
    "eval": ("--split", "--no-refined", "--bench"),
    "bench": ("--reps", "--threads"),
    "compare": ("--split", "--ablation"),
}


def test_help_lists_flags(capsys):
    assert run(["--help"]) == 0
    out = capsys.readouterr().out
    for command in COMMAND_FLAGS:
        assert command in out
    for command, extra in COMMAND_FLAGS.items():
        assert run([command, "--help"]) == 0
        out = capsys.readouterr().out
        for flag in COMMON_FLAGS + extra:
            assert flag in out, f"{command} --help is missing {flag}"


def test_bad_arguments_exit_with_config_code(data_dir, capsys):
    assert run([]) == 2
    assert run(["train", "--no-such-flag"]) == 2
    assert run(["train", "--deterministic", "maybe"]) == 2
    assert run(["train", "--set", "train.unknown=1"]) == 2
    assert "config error" in capsys.readouterr().err


def test_missing_dataset_exits_with_io_code(data_dir, capsys):
    assert run(["train", "--dataset", str(data_dir / "none.amds"), "--quiet"]) == 3
    assert "✗" in capsys.readouterr().err


def test_synth_is_reproducible(data_dir):
    first = str(data_dir / "a.amds")
    second = str(data_dir / "b.amds")
    assert run(["synth", "--seed", "7", "--dataset", first, *DESK]) == 0
    assert run(["synth", "--seed", "7", "--dataset", second, *DESK]) == 0
    with open(first, "rb") as fa, open(second, "rb") as fb:
        assert fa.read() == fb.read()


def test_synth_uses_data_dir_defaults(data_dir):
    assert run(["synth", "--area", "tibia", *DESK]) == 0
    assert (data_dir / "tibia.amds").exists()


def test_synth_reads_profile_file(data_dir):
    root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    profiles = os.path.join(root, "profiles", "femur.ini")
    assert run(["synth", "--profiles", profiles, *DESK]) == 0
    assert run(["synth", "--profiles", str(data_dir / "missing.ini"), *DESK]) == 2
