"""
评估服务模块 - 偏差统计、分类指标、耗时基准、离群帧与报告输出
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict

from amode.baseline import BaselineDetector
from amode.errors import ConfigError, EvaluationError
from amode.network import CascadedModel
from amode.signal_core import AcousticModel, AModeFrame, Area, PeakAnnotation, RegionLabel, index_to_depth, regions_of
from amode.storage import write_csv
from amode.utils import write_json

from .inference_service import InferenceService, Prediction

SUB_MM = 1.0
OUTLIER_SIGMA = 3.0
# GPU 上报告的参考耗时 (ms / batch)，仅作对照
REFERENCE_GPU_MS = 15.0

PREDICTION_COLUMNS = ["frame_id", "true_region", "pred_region", "true_depth", "pred_depth", "bias_mm", "latency_ms"]
SERIES_COLUMNS = ["frame_id", "bias_mm"]


@dataclass(frozen=True)
class Truth:
    frame_id: int
    region: RegionLabel
    annotation: PeakAnnotation


def truths_from(items: Sequence[Tuple[AModeFrame, PeakAnnotation]]) -> List[Truth]:
    return [Truth(f.frame_id, f.region, a) for f, a in items]


class RegionStats(BaseModel):
    model_config = ConfigDict(extra="forbid")

    region: str
    frames: int
    matched: int
    misses: int
    absent_frames: int
    false_positives: int
    bias_mean_mm: Optional[float]
    bias_std_mm: Optional[float]
    pct_sub_mm: Optional[float]


class Outlier(BaseModel):
    frame_id: int
    bias_mm: float


class LatencyStats(BaseModel):
    mode: str
    threads: int
    batch_size: int
    reps: int
    mean_ms_per_batch: float
    p95_ms_per_batch: float


class EvalReport(BaseModel):
    """评估报告；不含时间戳，相同输入写出的字节一致"""
    model_config = ConfigDict(extra="forbid")

    area: str
    method: str
    regions: List[RegionStats]
    overall: RegionStats
    accuracy: Optional[float] = None
    confusion_matrix: Optional[List[List[int]]] = None
    latency_ms_mean: Optional[float] = None
    latency: Optional[Dict[str, LatencyStats]] = None
    reference_gpu_ms: float = REFERENCE_GPU_MS
    outliers: List[Outlier] = []


def _match(predictions: Sequence[Prediction], truths: Sequence[Truth]) -> List[Tuple[Prediction, Truth]]:
    by_id = {p.frame_id: p for p in predictions}
    if len(by_id) != len(predictions):
        raise EvaluationError("Duplicate frame ids among predictions")
    missing = [t.frame_id for t in truths if t.frame_id not in by_id]
    if missing:
        raise EvaluationError(f"No prediction for frame ids {missing[:5]}")
    return [(by_id[t.frame_id], t) for t in truths]


def frame_bias(pred: Prediction, truth: Truth) -> Optional[float]:
    """|预测深度 - 真实深度| (mm)；未匹配（漏检或无骨峰）时为 None"""
    if not truth.annotation.present or pred.depth_mm is None:
        return None
    return abs(pred.depth_mm - truth.annotation.depth_mm)


def _stats(name: str, pairs: Sequence[Tuple[Prediction, Truth]]) -> RegionStats:
    biases = []
    misses = absent = false_pos = 0
    for pred, truth in pairs:
        if not truth.annotation.present:
            absent += 1
            if pred.peak_index is not None:
                false_pos += 1
        elif pred.peak_index is None:
            misses += 1
        else:
            biases.append(frame_bias(pred, truth))
    arr = np.asarray(biases, dtype=np.float64)
    has = arr.size > 0
    return RegionStats(
        region=name,
        frames=len(pairs),
        matched=int(arr.size),
        misses=misses,
        absent_frames=absent,
        false_positives=false_pos,
        bias_mean_mm=float(arr.mean()) if has else None,
        # 总体标准差
        bias_std_mm=float(arr.std()) if has else None,
        pct_sub_mm=float(100.0 * np.mean(arr < SUB_MM)) if has else None,
    )


def bias_stats(
    predictions: Sequence[Prediction],
    truths: Sequence[Truth],
) -> Tuple[List[RegionStats], RegionStats]:
    """
    按区域统计绝对偏差

    Returns:
        (各区域统计（按 region_id 排序）, 所有区域合并的统计)

    Raises:
        EvaluationError: 没有任何可比帧
    """
    pairs = _match(predictions, truths)
    overall = _stats("overall", pairs)
    if overall.matched == 0:
        raise EvaluationError("No frames with both a prediction and a ground-truth peak")
    regions = sorted({t.region for _, t in pairs}, key=lambda r: r.region_id)
    per_region = [_stats(r.name, [(p, t) for p, t in pairs if t.region == r]) for r in regions]
    return per_region, overall


def classification_metrics(
    predictions: Sequence[Prediction],
    truths: Sequence[Truth],
    area: Area | str,
) -> Tuple[float, np.ndarray]:
    """
    区域分类准确率与混淆矩阵（行: 真实, 列: 预测）
    """
    area = Area(area)
    n = len(regions_of(area))
    matrix = np.zeros((n, n), dtype=np.int64)
    for pred, truth in _match(predictions, truths):
        for label in (pred.region, truth.region):
            if label is None or label.area != area:
                raise EvaluationError(f"Region label {label} is outside the {area.value} region set")
        matrix[truth.region.region_id, pred.region.region_id] += 1
    total = int(matrix.sum())
    if total == 0:
        raise EvaluationError("No frames to classify")
    return float(np.trace(matrix) / total), matrix


def find_outliers(series: pd.DataFrame, sigma: float = OUTLIER_SIGMA) -> pd.DataFrame:
    """bias > mean + sigma * std 的帧（总体标准差）"""
    if series.empty:
        return series
    bias = series["bias_mm"].to_numpy(dtype=np.float64)
    threshold = bias.mean() + sigma * bias.std()
    return series[bias > threshold]


def bias_series(predictions: Sequence[Prediction], truths: Sequence[Truth]) -> pd.DataFrame:
    """按 frame_id 排序的逐帧偏差序列，只含可比帧"""
    rows = [
        {"frame_id": t.frame_id, "bias_mm": frame_bias(p, t)}
        for p, t in _match(predictions, truths)
        if frame_bias(p, t) is not None
    ]
    df = pd.DataFrame(rows, columns=SERIES_COLUMNS)
    return df.sort_values("frame_id", kind="stable").reset_index(drop=True)


def prediction_rows(predictions: Sequence[Prediction], truths: Sequence[Truth]) -> pd.DataFrame:
    rows = []
    for pred, truth in _match(predictions, truths):
        rows.append({
            "frame_id": truth.frame_id,
            "true_region": truth.region.name,
            "pred_region": pred.region.name if pred.region is not None else "",
            "true_depth": truth.annotation.depth_mm if truth.annotation.present else None,
            "pred_depth": pred.depth_mm,
            "bias_mm": frame_bias(pred, truth),
            "latency_ms": pred.latency_ms,
        })
    return pd.DataFrame(rows, columns=PREDICTION_COLUMNS).sort_values("frame_id", kind="stable")


def latency_bench(
    model: CascadedModel,
    frames: Sequence[AModeFrame],
    batch_size: int = 10,
    reps: int = 30,
    warmup: int = 5,
    threads: int = 2,
    verbose: bool = True,
) -> Dict[str, LatencyStats]:
    """
    每个 batch 的推理耗时

    先跑 warmup 个 batch 预热，再计时 reps 个 batch；单线程与多线程分别报告
    """
    if reps < 30 or warmup < 5:
        raise ConfigError("latency_bench needs reps >= 30 and warmup >= 5")
    if not frames:
        raise EvaluationError("No frames to benchmark")
    service = InferenceService(model, deterministic=True)
    batch = [frames[i % len(frames)] for i in range(batch_size)]

    def timed(_=None) -> float:
        t0 = time.perf_counter()
        service.predict_batch(batch)
        return (time.perf_counter() - t0) * 1000.0

    for _ in range(warmup):
        timed()

    def summarize(mode: str, n_threads: int, times: List[float]) -> LatencyStats:
        arr = np.asarray(times)
        return LatencyStats(
            mode=mode,
            threads=n_threads,
            batch_size=batch_size,
            reps=reps,
            mean_ms_per_batch=float(arr.mean()),
            p95_ms_per_batch=float(np.percentile(arr, 95)),
        )

    single = summarize("single", 1, [timed() for _ in range(reps)])
    with ThreadPoolExecutor(max_workers=threads) as pool:
        multi = summarize("multi", threads, list(pool.map(timed, range(reps))))
    if verbose:
        print(f"✓ 单线程: {single.mean_ms_per_batch:.1f} ms/batch (p95 {single.p95_ms_per_batch:.1f})")
        print(f"✓ {threads} 线程: {multi.mean_ms_per_batch:.1f} ms/batch (p95 {multi.p95_ms_per_batch:.1f})")
        print(f"  参考: GPU {REFERENCE_GPU_MS} ms/batch")
    return {"single": single, "multi": multi}


def emit_report(
    report: EvalReport,
    report_path: str,
    series: Optional[pd.DataFrame] = None,
    series_path: Optional[str] = None,
) -> None:
    """写出 JSON 报告与逗号分隔的逐帧偏差序列"""
    write_json(report.model_dump(mode="json"), report_path)
    if series_path is not None:
        write_csv(series if series is not None else pd.DataFrame(columns=SERIES_COLUMNS), series_path,
                  columns=SERIES_COLUMNS)


def series_path_for(report_path: str) -> str:
    root = report_path[:-5] if report_path.endswith(".json") else report_path
    return f"{root}.bias.csv"


class EvalService:
    """
    评估服务
    - 由预测与真值生成 EvalReport
    - 传统基线检测
    - 多方法对比表
    """

    def __init__(self, area: Area | str, verbose: bool = True):
        self.area = Area(area)
        self.verbose = verbose

    def evaluate(
        self,
        predictions: Sequence[Prediction],
        truths: Sequence[Truth],
        method: str = "cascaded",
        latency: Optional[Dict[str, LatencyStats]] = None,
    ) -> Tuple[EvalReport, pd.DataFrame]:
        per_region, overall = bias_stats(predictions, truths)
        accuracy, matrix = None, None
        if all(p.region is not None for p in predictions):
            accuracy, matrix = classification_metrics(predictions, truths, self.area)
        series = bias_series(predictions, truths)
        outliers = find_outliers(series)
        report = EvalReport(
            area=self.area.value,
            method=method,
            regions=per_region,
            overall=overall,
            accuracy=accuracy,
            confusion_matrix=matrix.tolist() if matrix is not None else None,
            latency_ms_mean=latency["single"].mean_ms_per_batch if latency else None,
            latency=latency,
            outliers=[Outlier(frame_id=int(r.frame_id), bias_mm=float(r.bias_mm)) for r in outliers.itertuples()],
        )
        if self.verbose:
            self.print_report(report)
        return report, series

    def baseline_predictions(
        self,
        detector: BaselineDetector,
        frames: Sequence[AModeFrame],
        ac: AcousticModel,
    ) -> List[Prediction]:
        preds = []
        for frame in frames:
            idx = detector.detect(frame)
            depth = None if idx is None else index_to_depth(idx, ac)
            preds.append(Prediction(frame_id=frame.frame_id, region=None, peak_index=idx, depth_mm=depth))
        return preds

    def print_report(self, report: EvalReport) -> None:
        print("\n" + "=" * 60)
        print(f"【评估】{report.area} / {report.method}")
        print("=" * 60)
        for r in report.regions + [report.overall]:
            if r.bias_mean_mm is None:
                print(f"  {r.region:<14} 无可比帧 (漏检 {r.misses})")
                continue
            print(f"  {r.region:<14} {r.bias_mean_mm:.3f} ± {r.bias_std_mm:.3f} mm, "
                  f"亚毫米 {r.pct_sub_mm:.1f}%, 漏检 {r.misses}, 误检 {r.false_positives}")
        if report.accuracy is not None:
            print(f"  分类准确率: {100 * report.accuracy:.2f}%")
        if report.outliers:
            print(f"⚠️ 离群帧: {len(report.outliers)}")


def distractor_failures(
    baseline: Sequence[Prediction],
    model: Sequence[Prediction],
    items: Sequence[Tuple[AModeFrame, PeakAnnotation]],
    detector: BaselineDetector,
) -> Tuple[int, float]:
    """
    专家窗口内存在高于骨峰的干扰峰的帧上，基线偏差大于模型偏差的比例

    模型漏检的帧按偏差无穷大计

    Returns:
        (干扰帧数, 基线更差的比例)
    """
    base_by_id = {p.frame_id: p for p in baseline}
    model_by_id = {p.frame_id: p for p in model}
    hits = total = 0
    for frame, ann in items:
        if not ann.present:
            continue
        cfg = detector.configs[frame.region.channel]
        window = frame.samples[cfg.window_start:cfg.window_end + 1]
        top = cfg.window_start + int(np.argmax(window))
        if ann.seg_start <= top <= ann.seg_end:
            continue
        truth = Truth(frame.frame_id, frame.region, ann)
        b = frame_bias(base_by_id[frame.frame_id], truth)
        m = frame_bias(model_by_id[frame.frame_id], truth)
        total += 1
        b = float("inf") if b is None else b
        m = float("inf") if m is None else m
        hits += int(b > m)
    return total, (hits / total if total else 0.0)


def compare_table(reports: Mapping[str, EvalReport]) -> pd.DataFrame:
    """
    各方法按区域并排的偏差表：region, {method}_bias_mean_mm, {method}_bias_std_mm, {method}_pct_sub_mm
    """
    methods = list(reports)
    if not methods:
        raise EvaluationError("Nothing to compare")
    names = [r.region for r in reports[methods[0]].regions] + ["overall"]
    rows = []
    for name in names:
        row = {"region": name}
        for m in methods:
            rep = reports[m]
            stats = {r.region: r for r in rep.regions + [rep.overall]}.get(name)
            for key in ("bias_mean_mm", "bias_std_mm", "pct_sub_mm"):
                row[f"{m}_{key}"] = getattr(stats, key) if stats is not None else None
        rows.append(row)
    return pd.DataFrame(rows)
