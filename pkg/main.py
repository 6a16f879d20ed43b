#!/usr/bin/env python
"""
A 超声骨峰定位 - 命令行入口

功能:
1. synth:   用模拟器生成数据集（含平移增强与 8:2 切分）
2. train:   训练级联 U-Net，写出 checkpoint 与损失日志
3. infer:   对测试集推理，写出逐帧预测
4. eval:    生成评估报告（偏差、分类准确率、离群帧）
5. bench:   推理耗时基准
6. compare: 级联网络与传统窗口最大值方法的对比表

使用方式:
    python main.py synth --area femur --frames 200 --seed 7
    python main.py train --area femur --epochs 50
    python main.py eval --area femur
"""
from __future__ import annotations

import argparse
import os
import sys
from typing import Any, Dict, List, Optional, Sequence, Tuple

# 添加项目路径
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from pydantic import ValidationError

from amode.config import RunConfig, Settings, build_run_config, default_path, describe, get_settings
from amode.errors import AModeError, ConfigError, StorageError
from amode.signal_core import AModeFrame, AcousticModel, Dataset, PeakAnnotation
from amode.utils import parse_bool, write_json

COMMANDS = ("synth", "train", "infer", "eval", "bench", "compare")

# 命令行参数 -> RunConfig 点号键
FLAG_KEYS: Dict[str, Tuple[str, ...]] = {
    "area": ("area",),
    "dataset": ("paths.dataset",),
    "checkpoint": ("paths.checkpoint",),
    "report": ("paths.report",),
    "output": ("paths.output",),
    "profiles": ("paths.profiles",),
    "seed": ("seed",),
    "epochs": ("train.epochs",),
    "batch": ("train.batch_size", "infer.batch_size", "bench.batch_size"),
    "lr": ("train.lr",),
    "window_w": ("model.window_w",),
    "tau": ("infer.tau",),
    "deterministic": ("infer.deterministic",),
    "frames": ("synth.frames_per_region",),
    "signal_len": ("synth.signal_len",),
    "motion": ("synth.motion",),
    "workers": ("synth.workers",),
    "reps": ("bench.reps",),
    "threads": ("bench.threads",),
    "split": ("infer.split",),
}


def _log(cfg: RunConfig, msg: str) -> None:
    if cfg.verbose:
        print(msg)


def _banner(cfg: RunConfig, title: str) -> None:
    _log(cfg, "\n" + "=" * 60)
    _log(cfg, f"【{title}】")
    _log(cfg, "=" * 60)
    for line in describe(cfg):
        _log(cfg, line)


def _select(dataset: Dataset, split: str) -> List[Tuple[AModeFrame, PeakAnnotation]]:
    if split == "all" or dataset.split is None:
        return list(dataset.frames)
    return dataset.subset(split)


def _acoustic(cfg: RunConfig) -> AcousticModel:
    return AcousticModel(v=cfg.synth.v, fs=cfg.synth.fs, signal_len=cfg.synth.signal_len)


def _load_model(cfg: RunConfig):
    from services.model_service import get_model_service

    model = get_model_service().load(cfg.paths.checkpoint)
    if model.area != cfg.area:
        raise ConfigError(f"Checkpoint is a {model.area.value} model, --area is {cfg.area.value}")
    return model


def _predict(cfg: RunConfig, model, items, use_refined: Optional[bool] = None):
    from services.inference_service import InferenceService

    service = InferenceService(
        model,
        tau=cfg.infer.tau,
        deterministic=cfg.infer.deterministic,
        use_refined=cfg.infer.use_refined if use_refined is None else use_refined,
        seed=cfg.seed,
    )
    return service.predict_all([f for f, _ in items], batch_size=cfg.infer.batch_size, verbose=cfg.verbose)


def cmd_synth(cfg: RunConfig) -> None:
    from amode.storage import export_dataset_csv, save_dataset
    from amode.synthgen import GenConfig, default_profiles, generate_dataset, load_profiles
    from services.train_service import build_dataset

    _banner(cfg, "生成数据集")
    if cfg.paths.profiles:
        profiles = [p for p in load_profiles(cfg.paths.profiles) if p.area == cfg.area]
    else:
        profiles = default_profiles(cfg.area)
    gen = GenConfig(
        seed=cfg.seed,
        frames_per_region=cfg.synth.frames_per_region,
        ac=_acoustic(cfg),
        motion=cfg.synth.motion,
        flexion_period=cfg.synth.flexion_period,
        workers=cfg.synth.workers,
    )
    raw = generate_dataset(profiles, gen, verbose=cfg.verbose)
    diag = raw.header["diagnostics"]
    _log(cfg, f"✓ 原始帧: {len(raw)} ({len(profiles)} 个区域)")
    _log(cfg, f"  - 干扰峰占优比例: {100 * diag['distractor_rate']:.1f}%")
    _log(cfg, f"  - 区域可分性 (最近质心): {100 * diag['region_separability']:.1f}%")

    dataset = raw
    if cfg.synth.split:
        dataset = build_dataset(raw, cfg.seed, test_ratio=cfg.train.test_ratio,
                                augment=cfg.train.augment, verbose=cfg.verbose)
    save_dataset(dataset, cfg.paths.dataset)
    _log(cfg, f"✓ 数据集已保存: {cfg.paths.dataset}")
    if cfg.paths.output:
        export_dataset_csv(dataset, cfg.paths.output)
        _log(cfg, f"✓ 表格导出: {cfg.paths.output}")


def cmd_train(cfg: RunConfig) -> None:
    from amode.network import CascadedModel, ModelConfig, SbpConfig, default_window_w
    from amode.storage import load_dataset
    from services.train_service import TrainService, build_dataset

    _banner(cfg, "训练")
    dataset = load_dataset(cfg.paths.dataset)
    if dataset.area != cfg.area:
        raise ConfigError(f"Dataset is {dataset.area.value}, --area is {cfg.area.value}")
    if dataset.split is None:
        dataset = build_dataset(dataset, cfg.seed, test_ratio=cfg.train.test_ratio,
                                augment=cfg.train.augment, verbose=cfg.verbose)
    ac = dataset.ac
    window_w = cfg.model.window_w or default_window_w(ac.signal_len)
    model_cfg = ModelConfig(
        area=cfg.area,
        signal_len=ac.signal_len,
        v=ac.v,
        fs=ac.fs,
        channels_per_layer=cfg.model.channels_per_layer,
        kernel_size=cfg.model.kernel_size,
        classifier_hidden=cfg.model.classifier_hidden,
        dtype=cfg.model.dtype,
        sbp=SbpConfig(window_w=window_w, mode="deterministic" if cfg.infer.deterministic else "stochastic"),
    )
    model = CascadedModel.initialize(model_cfg, cfg.seed)
    service = TrainService(cfg.train, seed=cfg.seed, tau=cfg.infer.tau, verbose=cfg.verbose)
    result = service.train(model, dataset, checkpoint_path=cfg.paths.checkpoint)
    if result.best_epoch is not None:
        _log(cfg, f"✓ 最佳验证 MAE {result.best_val_mae:.2f} (epoch {result.best_epoch})")


def cmd_infer(cfg: RunConfig) -> None:
    from amode.storage import load_dataset, write_csv
    from services.eval_service import prediction_rows, truths_from

    _banner(cfg, "推理")
    model = _load_model(cfg)
    items = _select(load_dataset(cfg.paths.dataset), cfg.infer.split)
    predictions = _predict(cfg, model, items)
    write_csv(prediction_rows(predictions, truths_from(items)), cfg.paths.output)
    found = sum(1 for p in predictions if p.peak_index is not None)
    _log(cfg, f"✓ {len(predictions)} 帧, 检出骨峰 {found} 帧")
    _log(cfg, f"✓ 预测已保存: {cfg.paths.output}")


def cmd_eval(cfg: RunConfig) -> None:
    from amode.storage import load_dataset
    from services.eval_service import EvalService, emit_report, latency_bench, series_path_for, truths_from

    _banner(cfg, "评估")
    model = _load_model(cfg)
    items = _select(load_dataset(cfg.paths.dataset), cfg.infer.split)
    predictions = _predict(cfg, model, items)
    latency = None
    if cfg.with_latency:
        latency = latency_bench(model, [f for f, _ in items], batch_size=cfg.bench.batch_size,
                                reps=cfg.bench.reps, warmup=cfg.bench.warmup,
                                threads=cfg.bench.threads, verbose=cfg.verbose)
    method = "cascaded" if cfg.infer.use_refined else "coarse-only"
    report, series = EvalService(cfg.area, verbose=cfg.verbose).evaluate(
        predictions, truths_from(items), method=method, latency=latency
    )
    series_path = series_path_for(cfg.paths.report)
    emit_report(report, cfg.paths.report, series, series_path)
    _log(cfg, f"✓ 报告已保存: {cfg.paths.report}")
    _log(cfg, f"✓ 偏差序列: {series_path}")


def cmd_bench(cfg: RunConfig) -> None:
    from amode.storage import load_dataset
    from services.eval_service import REFERENCE_GPU_MS, latency_bench

    _banner(cfg, "耗时基准")
    model = _load_model(cfg)
    frames = [f for f, _ in load_dataset(cfg.paths.dataset).frames]
    stats = latency_bench(model, frames, batch_size=cfg.bench.batch_size, reps=cfg.bench.reps,
                          warmup=cfg.bench.warmup, threads=cfg.bench.threads, verbose=cfg.verbose)
    record = {
        "area": cfg.area.value,
        "batch_size": cfg.bench.batch_size,
        "latency_ms_mean": stats["single"].mean_ms_per_batch,
        "latency": {k: v.model_dump(mode="json") for k, v in stats.items()},
        "reference_gpu_ms": REFERENCE_GPU_MS,
    }
    write_json(record, cfg.paths.report)
    _log(cfg, f"✓ 基准结果已保存: {cfg.paths.report}")


def cmd_compare(cfg: RunConfig) -> None:
    from amode.baseline import BaselineDetector
    from amode.storage import load_dataset, write_csv
    from amode.synthgen import profiles_from_header
    from services.eval_service import EvalService, compare_table, distractor_failures, truths_from

    _banner(cfg, "方法对比")
    model = _load_model(cfg)
    dataset = load_dataset(cfg.paths.dataset)
    items = _select(dataset, cfg.infer.split)
    truths = truths_from(items)
    evaluator = EvalService(cfg.area, verbose=cfg.verbose)

    reports = {}
    cascaded = _predict(cfg, model, items, use_refined=True)
    reports["cascaded"], _ = evaluator.evaluate(cascaded, truths, method="cascaded")
    if cfg.ablation:
        coarse = _predict(cfg, model, items, use_refined=False)
        reports["coarse-only"], _ = evaluator.evaluate(coarse, truths, method="coarse-only")

    detector = BaselineDetector.from_profiles(profiles_from_header(dataset.header, cfg.area), dataset.ac)
    baseline = evaluator.baseline_predictions(detector, [f for f, _ in items], dataset.ac)
    reports["baseline"], _ = evaluator.evaluate(baseline, truths, method="baseline")

    table = compare_table(reports)
    write_csv(table, cfg.paths.output)
    n_distract, worse = distractor_failures(baseline, cascaded, items, detector)
    _log(cfg, "\n" + table.to_string(index=False))
    _log(cfg, f"\n✓ 窗口内干扰峰占优的帧: {n_distract}, 其中基线偏差更大: {100 * worse:.1f}%")
    _log(cfg, f"✓ 对比表已保存: {cfg.paths.output}")


HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "compare": cmd_compare,
}

# 各命令未给出 --report / --output 时的默认文件
_DEFAULT_OUTPUTS = {
    "synth": (None, None),
    "train": (None, None),
    "infer": (None, "predictions.csv"),
    "eval": ("report.json", None),
    "bench": ("bench.json", None),
    "compare": (None, "compare.csv"),
}


def _fill_paths(cfg: RunConfig, settings: Settings) -> RunConfig:
    paths = cfg.paths.model_copy()
    area = cfg.area.value
    paths.dataset = paths.dataset or default_path(settings, cfg.area, "dataset")
    paths.checkpoint = paths.checkpoint or default_path(settings, cfg.area, "checkpoint")
    report, output = _DEFAULT_OUTPUTS[cfg.command]
    if report and not paths.report:
        paths.report = os.path.join(settings.data_dir, f"{area}.{report}")
    if output and not paths.output:
        paths.output = os.path.join(settings.data_dir, f"{area}.{output}")
    return cfg.model_copy(update={"paths": paths})


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="main.py",
        description="A 超声骨峰定位与解剖区域识别（级联 U-Net + 基于采样的区域提议）",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
示例:
  python main.py synth --area femur --frames 200 --seed 7     # 生成股骨数据集
  python main.py synth --area tibia --signal-len 2048         # 缩短信号的桌面规模数据
  python main.py train --area femur --epochs 50 --lr 1e-5     # 训练
  python main.py infer --area femur --tau 0.5                 # 测试集推理
  python main.py eval --area femur --bench                    # 评估并附带耗时
  python main.py bench --area femur --reps 30                 # 耗时基准
  python main.py compare --area femur --ablation              # 与传统方法对比
  python main.py train --set train.lr=1e-4 --set model.channels_per_layer=[4,8,16,32,64]
        """
    )

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--area', type=str, choices=['femur', 'tibia'], default=None, help='部位')
    common.add_argument('--dataset', type=str, default=None, help='数据集文件路径')
    common.add_argument('--checkpoint', type=str, default=None, help='checkpoint 路径')
    common.add_argument('--report', type=str, default=None, help='报告输出路径')
    common.add_argument('--output', type=str, default=None, help='表格输出路径 (CSV)')
    common.add_argument('--seed', type=int, default=None, help='根随机种子')
    common.add_argument('--epochs', type=int, default=None, help='训练轮数')
    common.add_argument('--batch', type=int, default=None, help='batch 大小')
    common.add_argument('--lr', type=float, default=None, help='学习率')
    common.add_argument('--window-w', type=int, default=None, help='Refined U-Net 窗口宽度（16 的倍数）')
    common.add_argument('--tau', type=float, default=None, help='分割阈值 (0, 1)')
    common.add_argument('--deterministic', type=parse_bool, default=None, metavar='BOOL',
                        help='推理时 SBP 取 argmax（true）或随机采样（false）')
    common.add_argument('--config', type=str, default=None, help='JSON 配置文件')
    common.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                        help='点号覆盖，例如 train.lr=1e-4（可重复）')
    common.add_argument('--quiet', action='store_true', help='不打印进度')

    subparsers = parser.add_subparsers(dest='command', help='子命令')

    synth = subparsers.add_parser('synth', parents=[common], help='生成模拟数据集')
    synth.add_argument('--frames', type=int, default=None, help='每个区域的帧数')
    synth.add_argument('--signal-len', type=int, default=None, help='每帧采样点数')
    synth.add_argument('--motion', type=str, choices=['random', 'flexion'], default=None, help='骨深度轨迹')
    synth.add_argument('--profiles', type=str, default=None, help='组织参数 INI 文件')
    synth.add_argument('--workers', type=int, default=None, help='生成线程数')

    subparsers.add_parser('train', parents=[common], help='训练级联网络')

    infer = subparsers.add_parser('infer', parents=[common], help='逐帧推理')
    infer.add_argument('--split', type=str, choices=['test', 'train', 'all'], default=None, help='推理的数据子集')
    infer.add_argument('--no-refined', action='store_true', help='仅使用 Coarse U-Net')

    evaluate = subparsers.add_parser('eval', parents=[common], help='生成评估报告')
    evaluate.add_argument('--split', type=str, choices=['test', 'train', 'all'], default=None, help='评估的数据子集')
    evaluate.add_argument('--no-refined', action='store_true', help='仅使用 Coarse U-Net')
    evaluate.add_argument('--bench', action='store_true', help='报告中附带推理耗时')

    bench = subparsers.add_parser('bench', parents=[common], help='推理耗时基准')
    bench.add_argument('--reps', type=int, default=None, help='计时 batch 数（>= 30）')
    bench.add_argument('--threads', type=int, default=None, help='多线程模式的线程数')

    compare = subparsers.add_parser('compare', parents=[common], help='与传统方法对比')
    compare.add_argument('--split', type=str, choices=['test', 'train', 'all'], default=None, help='对比的数据子集')
    compare.add_argument('--ablation', action='store_true', help='增加仅 Coarse U-Net 一列')

    return parser


def _flags(args: argparse.Namespace) -> Dict[str, Any]:
    flags: Dict[str, Any] = {}
    for name, keys in FLAG_KEYS.items():
        value = getattr(args, name, None)
        if value is not None:
            for key in keys:
                flags[key] = value
    if args.quiet:
        flags["verbose"] = False
    if getattr(args, "no_refined", False):
        flags["infer.use_refined"] = False
    if getattr(args, "ablation", False):
        flags["ablation"] = True
    if getattr(args, "bench", False):
        flags["with_latency"] = True
    return flags


def run(argv: Optional[Sequence[str]] = None) -> int:
    """
    执行一条命令

    Returns:
        退出码：0 成功，2 配置错误，3 读写错误，4 形状错误，5 训练发散，1 其他错误
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 2
    if args.command is None:
        parser.print_help()
        return 2

    try:
        settings = get_settings()
        cfg = build_run_config(args.command, args.config, args.set, _flags(args), settings)
        cfg = _fill_paths(cfg, settings)
        HANDLERS[cfg.command](cfg)
        return 0
    except AModeError as e:
        print(f"✗ {e.kind} error: {e}", file=sys.stderr)
        return e.exit_code
    except ValidationError as e:
        print(f"✗ config error: {e.errors()[0]['msg']}", file=sys.stderr)
        return ConfigError.exit_code
    except OSError as e:
        print(f"✗ io error: {e}", file=sys.stderr)
        return StorageError.exit_code


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
