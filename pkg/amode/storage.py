"""
数据集与模型 checkpoint 的二进制容器，以及 CSV 导出

数据集文件:
    magic "AMDS" | version u16 | header_len u32 | header JSON | n u32 | n 条定长记录
checkpoint 文件:
    magic "AMCK" | version u16 | config_len u32 | config JSON | count u32 |
    按名称排序的参数 {name_len u16, name, ndim u8, dims u32 * ndim, float32 数据}

所有整数与浮点均为小端；JSON 按键排序，相同内容写出的字节完全一致
"""
from __future__ import annotations

import os
import struct
from typing import Any, Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np
import orjson
import pandas as pd
from pydantic import ValidationError

from .autodiff import Tensor
from .errors import StorageError
from .network import CascadedModel, ModelConfig
from .signal_core import (
    AcousticModel,
    Area,
    Dataset,
    PeakAnnotation,
    RegionLabel,
    preprocess_frame,
)

DATASET_MAGIC = b"AMDS"
CHECKPOINT_MAGIC = b"AMCK"
FORMAT_VERSION = 1

_PREAMBLE = struct.Struct("<4sHI")
_COUNT = struct.Struct("<I")


def _record_dtype(signal_len: int) -> np.dtype:
    return np.dtype([
        ("frame_id", "<i4"),
        ("channel", "<i4"),
        ("seg_start", "<i4"),
        ("seg_end", "<i4"),
        ("depth_mm", "<f8"),
        ("present", "u1"),
        ("samples", "<f4", (signal_len,)),
    ])


def _json(obj: Any) -> bytes:
    return orjson.dumps(obj, option=orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY)


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    try:
        os.makedirs(parent, exist_ok=True)
    except OSError as e:
        raise StorageError(f"Cannot create directory {parent}: {e}") from e


def _write_bytes(path: str, chunks: Iterable[bytes]) -> None:
    _ensure_parent(path)
    try:
        with open(path, "wb") as f:
            for chunk in chunks:
                f.write(chunk)
    except OSError as e:
        raise StorageError(f"Cannot write {path}: {e}") from e


def _read_bytes(path: str) -> bytes:
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as e:
        raise StorageError(f"Cannot read {path}: {e}") from e


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise StorageError(f"Truncated file: {self.path}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: struct.Struct) -> tuple:
        return fmt.unpack(self.take(fmt.size))

    def preamble(self, magic: bytes) -> bytes:
        found, version, length = self.unpack(_PREAMBLE)
        if found != magic:
            raise StorageError(f"{self.path} is not a {magic.decode()} file")
        if version != FORMAT_VERSION:
            raise StorageError(f"{self.path}: unsupported format version {version}")
        return self.take(length)


def _load_json(raw: bytes, path: str) -> Dict[str, Any]:
    try:
        return orjson.loads(raw)
    except orjson.JSONDecodeError as e:
        raise StorageError(f"Corrupt header in {path}: {e}") from e


# ---------------------------------------------------------------------------
# 数据集
# ---------------------------------------------------------------------------

def save_dataset(dataset: Dataset, path: str) -> None:
    ac = dataset.ac
    header = {
        "v": ac.v,
        "fs": ac.fs,
        "signal_len": ac.signal_len,
        "area": dataset.area.value,
        "split": list(dataset.split) if dataset.split is not None else None,
        "meta": dataset.header,
    }
    header_bytes = _json(header)
    records = np.zeros(len(dataset), dtype=_record_dtype(ac.signal_len))
    for i, (frame, ann) in enumerate(dataset.frames):
        records[i] = (
            frame.frame_id,
            frame.region.channel,
            ann.seg_start,
            ann.seg_end,
            ann.depth_mm,
            int(ann.present),
            frame.samples,
        )
    _write_bytes(path, [
        _PREAMBLE.pack(DATASET_MAGIC, FORMAT_VERSION, len(header_bytes)),
        header_bytes,
        _COUNT.pack(len(records)),
        records.tobytes(),
    ])


def load_dataset(path: str) -> Dataset:
    reader = _Reader(_read_bytes(path), path)
    header = _load_json(reader.preamble(DATASET_MAGIC), path)
    try:
        ac = AcousticModel(v=header["v"], fs=header["fs"], signal_len=header["signal_len"])
        area = Area(header["area"])
    except (KeyError, ValueError, ValidationError) as e:
        raise StorageError(f"Invalid dataset header in {path}: {e}") from e
    (count,) = reader.unpack(_COUNT)
    dtype = _record_dtype(ac.signal_len)
    records = np.frombuffer(reader.take(count * dtype.itemsize), dtype=dtype)

    frames = []
    for rec in records:
        region = RegionLabel.from_channel(area, int(rec["channel"]))
        frame = preprocess_frame(rec["samples"], ac, region=region, frame_id=int(rec["frame_id"]))
        if rec["present"]:
            ann = PeakAnnotation(int(rec["seg_start"]), int(rec["seg_end"]), float(rec["depth_mm"]), True)
        else:
            ann = PeakAnnotation.absent(float(rec["depth_mm"]))
        frames.append((frame, ann))
    return Dataset(frames=tuple(frames), ac=ac, area=area, split=header.get("split"), header=header.get("meta") or {})


def export_dataset_csv(dataset: Dataset, path: str, with_samples: bool = False) -> None:
    """数据集的表格导出（逗号分隔），便于人工检查"""
    rows = []
    split = dataset.split or [""] * len(dataset)
    for (frame, ann), tag in zip(dataset.frames, split):
        row = {
            "frame_id": frame.frame_id,
            "channel": frame.region.channel,
            "region": frame.region.name,
            "split": tag,
            "seg_start": ann.seg_start,
            "seg_end": ann.seg_end,
            "depth_mm": ann.depth_mm,
            "present": int(ann.present),
            "argmax_index": int(np.argmax(frame.samples)),
            "max_amplitude": float(frame.samples.max()),
        }
        if with_samples:
            row.update({f"s{i}": float(v) for i, v in enumerate(frame.samples)})
        rows.append(row)
    write_csv(rows, path)


# ---------------------------------------------------------------------------
# checkpoint
# ---------------------------------------------------------------------------

def save_checkpoint(model: CascadedModel, path: str, meta: Optional[Mapping[str, Any]] = None) -> None:
    config_bytes = _json({"model": model.config.to_record(), "meta": dict(meta or {})})
    chunks = [
        _PREAMBLE.pack(CHECKPOINT_MAGIC, FORMAT_VERSION, len(config_bytes)),
        config_bytes,
        _COUNT.pack(len(model.params)),
    ]
    for name in sorted(model.params):
        values = np.ascontiguousarray(model.params[name].values, dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<B", values.ndim) + struct.pack(f"<{values.ndim}I", *values.shape))
        chunks.append(values.tobytes())
    _write_bytes(path, chunks)


def load_checkpoint(path: str) -> Tuple[CascadedModel, Dict[str, Any]]:
    """
    读取 checkpoint

    Returns:
        (模型, 训练时写入的元信息)
    """
    reader = _Reader(_read_bytes(path), path)
    record = _load_json(reader.preamble(CHECKPOINT_MAGIC), path)
    try:
        config = ModelConfig(**record["model"])
    except (KeyError, TypeError, ValidationError) as e:
        raise StorageError(f"Invalid model configuration in {path}: {e}") from e
    dtype = np.dtype(config.dtype)
    (count,) = reader.unpack(_COUNT)
    params: Dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", reader.take(2))
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", reader.take(1))
        shape = struct.unpack(f"<{ndim}I", reader.take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(reader.take(4 * size), dtype="<f4").reshape(shape).astype(dtype)
        params[name] = Tensor(values, requires_grad=True, name=name)
    return CascadedModel(config, params), record.get("meta") or {}


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def write_csv(rows: List[Dict[str, Any]] | pd.DataFrame, path: str, columns: Optional[List[str]] = None) -> pd.DataFrame:
    df = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(rows, columns=columns)
    _ensure_parent(path)
    try:
        df.to_csv(path, index=False, float_format="%.6f", lineterminator="\n")
    except OSError as e:
        raise StorageError(f"Cannot write {path}: {e}") from e
    return df


def read_csv(path: str) -> pd.DataFrame:
    try:
        return pd.read_csv(path)
    except (OSError, pd.errors.ParserError) as e:
        raise StorageError(f"Cannot read {path}: {e}") from e
