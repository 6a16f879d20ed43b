"""
训练服务模块 - 数据集构建（预处理、平移增强、切分）与级联网络训练
"""
from __future__ import annotations

import math
import os
import queue
import threading
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from amode.autodiff import RmsProp, Tape
from amode.config import TrainConfig
from amode.errors import AugmentationError, DatasetError, TrainingError
from amode.losses import LossBreakdown, segment_mask, total_loss, window_mask
from amode.network import CascadedModel
from amode.signal_core import (
    AUGMENT_SHIFTS,
    AREA_CHANNELS,
    AModeFrame,
    Area,
    Dataset,
    PeakAnnotation,
    preprocess_frame,
    shift_augment,
)
from amode.storage import save_checkpoint, write_csv
from amode.utils import rng_for, shuffle_and_split

from .inference_service import InferenceService, peak_mae

LOSS_COLUMNS = ["epoch", "l_dice", "l_ce", "l_dice_refined", "l_ce_refined", "l_cls", "total", "val_mae"]

Item = Tuple[AModeFrame, PeakAnnotation]


def plan_shifts(annotation: PeakAnnotation, shifts: Sequence[int], signal_len: int) -> List[int]:
    """
    每帧实际使用的位移

    网格位移把骨峰区段移出信号时，换成同幅度范围内与之最近、且尚未使用的可行位移，
    保证各副本互不相同

    Raises:
        AugmentationError: 可行位移不足
    """
    def fits(s: int) -> bool:
        return not annotation.present or (annotation.seg_start + s >= 0 and annotation.seg_end + s < signal_len)

    shifts = [int(s) for s in shifts]
    if all(fits(s) for s in shifts):
        return shifts
    magnitudes = [abs(s) for s in shifts if s != 0]
    lo, hi = min(magnitudes), max(magnitudes)
    used = {s for s in shifts if fits(s)}
    plan: List[int] = []
    for s in shifts:
        if fits(s):
            plan.append(s)
            continue
        candidates = [c for c in range(-hi, hi + 1) if abs(c) >= lo and c not in used and fits(c)]
        if not candidates:
            raise AugmentationError(f"No unused in-range shift left to replace {s}")
        pick = min(candidates, key=lambda c: (abs(c - s), c))
        used.add(pick)
        plan.append(pick)
    return plan


def build_dataset(
    raw: Dataset,
    seed: int,
    test_ratio: float = 0.2,
    augment: bool = True,
    channels: Optional[Sequence[int]] = None,
    verbose: bool = True,
) -> Dataset:
    """
    预处理 -> 十倍平移增强 -> 固定种子打乱 -> 8:2 切分

    Args:
        raw: 同一部位的原始帧
        seed: 根种子（split 子流）
        test_ratio: 测试集比例
        augment: False 时跳过增强（每帧保留一份）
        channels: 可用通道；其余通道的帧被丢弃，默认使用该部位全部通道

    Raises:
        DatasetError: 输入为空、部位混杂或增强失败
    """
    if len(raw) == 0:
        raise DatasetError("Cannot build a dataset from zero frames")
    area = Area(raw.area)
    viable = set(channels) if channels is not None else set(AREA_CHANNELS[area])

    kept: List[Item] = []
    dropped = 0
    for frame, ann in raw.frames:
        if frame.region.area != area:
            raise DatasetError(f"Frame {frame.frame_id} belongs to {frame.region.area.value}, dataset is {area.value}")
        if frame.region.channel not in viable:
            dropped += 1
            continue
        kept.append((preprocess_frame(frame, raw.ac), ann))
    if dropped and verbose:
        print(f"⚠️ 丢弃 {dropped} 帧（通道不可用）")
    if not kept:
        raise DatasetError("No frames left after channel filtering")

    shifts = AUGMENT_SHIFTS if augment else (0,)
    items: List[Item] = []
    for frame, ann in kept:
        try:
            copies = [shift_augment(frame, ann, s, raw.ac) for s in plan_shifts(ann, shifts, raw.ac.signal_len)]
        except AugmentationError as e:
            raise DatasetError(f"Cannot augment frame {frame.frame_id}: {e}") from e
        for k, (new_frame, new_ann) in enumerate(copies):
            new_id = frame.frame_id * len(shifts) + k
            items.append((replace(new_frame, frame_id=new_id), new_ann))

    split_seed = int(rng_for(seed, "split").integers(2 ** 31))
    train, test = shuffle_and_split(items, test_ratio, split_seed)
    header = dict(raw.header)
    header["build"] = {
        "seed": seed,
        "shifts": list(shifts),
        "source_frames": len(kept),
        "dropped_frames": dropped,
    }
    if verbose:
        print(f"✓ 数据集: {len(train)} 训练 / {len(test)} 测试（原始 {len(kept)} 帧 x {len(shifts)}）")
    return Dataset(
        frames=tuple(train + test),
        ac=raw.ac,
        area=area,
        split=("train",) * len(train) + ("test",) * len(test),
        header=header,
    )


@dataclass(frozen=True)
class Batch:
    x: np.ndarray                         # [B, L] 归一化信号
    coarse_truth: np.ndarray              # [B, L]
    annotations: Tuple[PeakAnnotation, ...]
    region_ids: np.ndarray                # [B]


_DONE = object()


class BatchPrefetcher:
    """
    后台线程按给定顺序组装 batch，经有界队列交给训练线程

    不足一个 batch 的尾部被丢弃
    """

    def __init__(self, items: Sequence[Item], order: np.ndarray, batch_size: int, dtype: str, maxsize: int = 2):
        self.items = items
        self.order = order
        self.batch_size = batch_size
        self.dtype = dtype
        self.maxsize = maxsize

    def __len__(self) -> int:
        return len(self.order) // self.batch_size

    def _make(self, idx: np.ndarray) -> Batch:
        chosen = [self.items[i] for i in idx]
        x = np.stack([f.normalized for f, _ in chosen]).astype(self.dtype)
        x.setflags(write=False)
        anns = tuple(a for _, a in chosen)
        truth = segment_mask(anns, x.shape[1]).astype(self.dtype)
        truth.setflags(write=False)
        regions = np.array([f.region.region_id for f, _ in chosen], dtype=np.int64)
        return Batch(x, truth, anns, regions)

    def __iter__(self) -> Iterator[Batch]:
        q: queue.Queue = queue.Queue(maxsize=self.maxsize)
        stop = threading.Event()

        def offer(item) -> bool:
            while not stop.is_set():
                try:
                    q.put(item, timeout=0.1)
                    return True
                except queue.Full:
                    continue
            return False

        def produce():
            try:
                for b in range(len(self)):
                    idx = self.order[b * self.batch_size:(b + 1) * self.batch_size]
                    if not offer(self._make(idx)):
                        return
                offer(_DONE)
            except Exception as e:  # 转交给训练线程
                offer(e)

        worker = threading.Thread(target=produce, daemon=True)
        worker.start()
        try:
            while True:
                item = q.get()
                if item is _DONE:
                    break
                if isinstance(item, BaseException):
                    raise item
                yield item
        finally:
            stop.set()
            worker.join(timeout=1.0)


@dataclass
class TrainResult:
    model: CascadedModel
    log: List[Dict[str, Any]] = field(default_factory=list)
    best_val_mae: Optional[float] = None
    best_epoch: Optional[int] = None


def best_checkpoint_path(path: str) -> str:
    root, ext = os.path.splitext(path)
    return f"{root}.best{ext or '.ckpt'}"


def loss_log_path(path: str) -> str:
    return f"{os.path.splitext(path)[0]}.loss.csv"


class TrainService:
    """
    训练服务
    - RMSprop，固定 batch 与 epoch 数
    - 训练时 SBP 默认随机采样（sbp 子流），验证时确定性
    - 每个 epoch 记录五项损失均值与验证 MAE
    """

    def __init__(self, cfg: TrainConfig, seed: int = 42, tau: float = 0.5, verbose: bool = True):
        self.cfg = cfg
        self.seed = seed
        self.tau = tau
        self.verbose = verbose

    def _log(self, msg: str) -> None:
        if self.verbose:
            print(msg)

    def _validate(self, model: CascadedModel, items: Sequence[Item]) -> Optional[float]:
        if not items:
            return None
        service = InferenceService(model, tau=self.tau, deterministic=True)
        predictions = service.predict_all([f for f, _ in items], batch_size=self.cfg.batch_size, verbose=False)
        return peak_mae(predictions, [a for _, a in items])

    def _step(self, model: CascadedModel, optimizer: RmsProp, batch: Batch, rng, epoch: int, b: int) -> LossBreakdown:
        with Tape() as tape:
            out = model.forward(batch.x, mode=self.cfg.sbp_mode, rng=rng)
            refined_truth = window_mask(batch.annotations, out.proposals)
            losses = total_loss(
                out.peak_prob, out.refined_prob, out.region_probs,
                batch.coarse_truth, refined_truth, batch.region_ids,
                eps=self.cfg.epsilon_dice,
            )
        if not math.isfinite(losses.total):
            raise TrainingError(f"Non-finite loss at epoch {epoch}, batch {b}")
        optimizer.zero_grad()
        tape.backward(losses.tensor)
        try:
            optimizer.step()
        except TrainingError as e:
            raise TrainingError(f"{e} at epoch {epoch}, batch {b}") from e
        return losses

    def train(
        self,
        model: CascadedModel,
        dataset: Dataset,
        checkpoint_path: Optional[str] = None,
    ) -> TrainResult:
        """
        训练模型

        Args:
            model: 待训练模型（原地更新）
            dataset: 带 train/test 切分的数据集
            checkpoint_path: 最终 checkpoint 路径；同时写出 *.best.ckpt 与 *.loss.csv
        """
        if dataset.split is None:
            raise DatasetError("Training needs a dataset with a train/test split")
        if model.frozen:
            raise TrainingError("Cannot train a frozen model")
        if Area(dataset.area) != model.area:
            raise DatasetError(f"Dataset area {dataset.area.value} != model area {model.area.value}")
        train_items = dataset.subset("train")
        test_items = dataset.subset("test")
        result = TrainResult(model=model)

        self._log("\n" + "=" * 60)
        self._log(f"【训练】{model.area.value}: {len(train_items)} 训练帧 / {len(test_items)} 验证帧, "
                  f"{self.cfg.epochs} epochs, batch {self.cfg.batch_size}, lr {self.cfg.lr}")
        self._log("=" * 60)

        if self.cfg.epochs == 0:
            self._log("⚠️ epochs=0，模型保持不变")
            if checkpoint_path:
                self._write(result, checkpoint_path)
            return result
        if len(train_items) < self.cfg.batch_size:
            raise TrainingError(f"{len(train_items)} training frames cannot fill a batch of {self.cfg.batch_size}")

        optimizer = RmsProp(model.parameters(), lr=self.cfg.lr, alpha=self.cfg.alpha, eps=self.cfg.eps)
        sbp_rng = rng_for(self.seed, "sbp")
        for epoch in range(1, self.cfg.epochs + 1):
            order = rng_for(self.seed, "shuffle", epoch).permutation(len(train_items))
            batches = BatchPrefetcher(train_items, order, self.cfg.batch_size, model.config.dtype, self.cfg.prefetch)
            sums = np.zeros(5, dtype=np.float64)
            bar = tqdm(batches, total=len(batches), desc=f"Epoch {epoch}/{self.cfg.epochs}", disable=not self.verbose)
            for b, batch in enumerate(bar, start=1):
                losses = self._step(model, optimizer, batch, sbp_rng, epoch, b)
                sums += [losses.l_dice, losses.l_ce, losses.l_dice_refined, losses.l_ce_refined, losses.l_cls]
                bar.set_postfix(loss=f"{losses.total:.4f}")
            means = sums / len(batches)
            row = {
                "epoch": epoch,
                "l_dice": float(means[0]),
                "l_ce": float(means[1]),
                "l_dice_refined": float(means[2]),
                "l_ce_refined": float(means[3]),
                "l_cls": float(means[4]),
                "total": float(means[0] + means[1] + means[2] + means[3] + means[4]),
                "val_mae": self._validate(model, test_items),
            }
            result.log.append(row)
            val = row["val_mae"]
            self._log(f"✓ epoch {epoch}: total={row['total']:.4f}" + (f", val_mae={val:.2f}" if val is not None else ""))

            if val is not None and (result.best_val_mae is None or val < result.best_val_mae):
                result.best_val_mae = val
                result.best_epoch = epoch
                if checkpoint_path:
                    save_checkpoint(model, best_checkpoint_path(checkpoint_path),
                                    meta={"epoch": epoch, "val_mae": val, "seed": self.seed})

        if checkpoint_path:
            self._write(result, checkpoint_path)
        return result

    def _write(self, result: TrainResult, checkpoint_path: str) -> None:
        epochs = len(result.log)
        save_checkpoint(result.model, checkpoint_path, meta={"epoch": epochs, "seed": self.seed})
        write_csv(result.log, loss_log_path(checkpoint_path), columns=LOSS_COLUMNS)
        self._log(f"✓ checkpoint: {checkpoint_path}")
        self._log(f"✓ 损失日志: {loss_log_path(checkpoint_path)}")


def train(model: CascadedModel, dataset: Dataset, cfg: TrainConfig, seed: int = 42, verbose: bool = False) -> TrainResult:
    return TrainService(cfg, seed=seed, verbose=verbose).train(model, dataset)
