from __future__ import annotations

import random
from typing import Any, Dict, List, Sequence, Tuple, TypeVar

import numpy as np
import orjson

from .errors import ConfigError, StorageError

T = TypeVar("T")

# 根种子派生的命名随机子流
SUBSTREAMS = {
    "dataset": 0,
    "init": 1,
    "sbp": 2,
    "shuffle": 3,
    "split": 4,
}

JSON_OPTIONS = orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY | orjson.OPT_NON_STR_KEYS


def rng_for(seed: int, name: str, *extra: int) -> np.random.Generator:
    """
    按 (根种子, 子流名, 额外键) 派生独立的随机数生成器

    Args:
        seed: 根种子
        name: 子流名 (dataset / init / sbp / shuffle / split)
        extra: 额外的整数键，例如 frame_id
    """
    if name not in SUBSTREAMS:
        raise ConfigError(f"Unknown random substream: {name}")
    entropy = [int(seed), SUBSTREAMS[name], *[int(x) for x in extra]]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def dumps_json(obj: Any) -> bytes:
    return orjson.dumps(obj, option=JSON_OPTIONS)


def write_json(obj: Any, path: str) -> None:
    try:
        with open(path, "wb") as f:
            f.write(dumps_json(obj))
            f.write(b"\n")
    except OSError as e:
        raise StorageError(f"Cannot write {path}: {e}") from e


def read_json(path: str) -> Dict[str, Any]:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise StorageError(f"Cannot read {path}: {e}") from e
    try:
        obj = orjson.loads(data)
    except orjson.JSONDecodeError as e:
        raise ConfigError(f"Invalid JSON in {path}: {e}") from e
    if not isinstance(obj, dict):
        raise ConfigError(f"Expected a JSON object in {path}")
    return obj


def shuffle_and_split(items: Sequence[T], test_ratio: float, seed: int) -> Tuple[List[T], List[T]]:
    """
    固定种子打乱后按比例切分，返回 (train, test)

    test 数量取 round(n * test_ratio)，因此 8:2 的切分误差不超过 1 帧
    """
    items = list(items)
    rng = random.Random(seed)
    rng.shuffle(items)
    n = len(items)
    n_test = int(round(n * test_ratio)) if n > 0 else 0
    test = items[:n_test]
    train = items[n_test:]
    return train, test


def parse_bool(text: str | bool) -> bool:
    if isinstance(text, bool):
        return text
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on", "y"):
        return True
    if value in ("0", "false", "no", "off", "n"):
        return False
    raise ConfigError(f"Not a boolean: {text!r}")
