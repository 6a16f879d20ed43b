from __future__ import annotations

import os
import threading
from typing import Any, Dict, Tuple

from amode.network import CascadedModel
from amode.storage import load_checkpoint


class ModelService:
    """
    模型服务封装
    - 读取 checkpoint 并冻结参数
    - 按 (路径, 修改时间, 大小) 缓存，多线程推理共享同一份只读模型
    """
    def __init__(self):
        self._cache: Dict[Tuple[str, int, int], Tuple[CascadedModel, Dict[str, Any]]] = {}
        self._lock = threading.Lock()

    def _key(self, path: str) -> Tuple[str, int, int]:
        path = os.path.abspath(path)
        try:
            st = os.stat(path)
        except OSError:
            # 交给 load_checkpoint 报 StorageError
            return path, -1, -1
        return path, st.st_mtime_ns, st.st_size

    def load(self, path: str) -> CascadedModel:
        """加载冻结的推理模型"""
        return self.load_with_meta(path)[0]

    def load_with_meta(self, path: str) -> Tuple[CascadedModel, Dict[str, Any]]:
        key = self._key(path)
        with self._lock:
            if key not in self._cache:
                model, meta = load_checkpoint(path)
                # 同一路径只保留最新版本
                for stale in [k for k in self._cache if k[0] == key[0]]:
                    del self._cache[stale]
                self._cache[key] = (model.freeze(), meta)
            return self._cache[key]


_instance = None

def get_model_service() -> ModelService:
    """获取 ModelService 单例"""
    global _instance
    if _instance is None:
        _instance = ModelService()
    return _instance
