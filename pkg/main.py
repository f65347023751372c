"""
图后验网络主入口
子命令: train / eval / ood / shift / baseline / synth
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

# 添加src目录到Python路径
sys.path.insert(0, str(Path(__file__).parent / "src"))

from pydantic import ValidationError

from baselines import GkdeConfig, LpConfig, gkde_alpha, lp_alpha
from config import Settings, load_settings
from datasets import Dataset, load_dataset, make_synthetic_benchmark, save_dataset, stratified_split
from errors import ConfigError, GPNError, InputError
from experiments import (
    DEFAULT_SHIFT_LEVELS,
    OodExperiment,
    OodKind,
    ResultRecord,
    evaluate_baseline,
    evaluate_model,
    run_ood_experiment,
    run_seeds,
    run_shift_sweep,
    train_for_experiment,
    train_gpn,
    write_history,
    write_results,
)
from posterior import GpnConfig
from training import LossConfig, TrainSchedule, load_checkpoint, save_checkpoint

logger = logging.getLogger("gpn")


def _components(settings: Settings):
    """由配置构建各组件参数对象"""
    try:
        return (GpnConfig.from_settings(settings), TrainSchedule.from_settings(settings),
                LossConfig.from_settings(settings))
    except ValidationError as exc:
        raise ConfigError(f"配置取值非法: {exc}") from exc


def _load_data(args, settings: Settings) -> Dataset:
    if args.data:
        return load_dataset(args.data)
    print("ℹ️  未指定 --data，使用合成数据集")
    return _synthetic(settings)


def _synthetic(settings: Settings) -> Dataset:
    return make_synthetic_benchmark(settings.nodes_per_class, settings.num_classes, settings.feature_dim,
                                    settings.homophily, settings.seed, settings.avg_degree, settings.separation,
                                    settings.noise_scale)


def _seeds(settings: Settings) -> List[int]:
    return [settings.seed + i for i in range(settings.num_seeds)]


def _out_dir(args, settings: Settings) -> Path:
    return Path(args.out or settings.output_dir)


def cmd_synth(args, settings: Settings) -> None:
    dataset = _synthetic(settings)
    out = save_dataset(dataset, _out_dir(args, settings))
    print(f"✅ 合成数据集已写入 {out}（{dataset.num_nodes} 个节点，{dataset.graph.num_edges} 条边）")


def cmd_train(args, settings: Settings) -> None:
    dataset = _load_data(args, settings)
    gpn_cfg, schedule, loss_cfg = _components(settings)
    out = _out_dir(args, settings)

    def run(seed: int) -> List[ResultRecord]:
        split = stratified_split(dataset, settings.split_ratios, seed)
        result = train_gpn(dataset, split, gpn_cfg, schedule, loss_cfg, seed)
        suffix = "" if settings.num_seeds == 1 else f"_seed{seed}"
        write_history(result.history, out / f"history{suffix}.csv")
        checkpoint = Path(args.checkpoint) if args.checkpoint else out / "model.ckpt"
        if suffix:
            checkpoint = checkpoint.with_name(f"{checkpoint.stem}{suffix}{checkpoint.suffix}")
        save_checkpoint(result.model, checkpoint, {"dataset": dataset.name, "split_seed": seed})
        metrics = evaluate_model(result.model, dataset, split.test, settings.ece_bins)
        metrics.update({"best_epoch": float(result.best_epoch), "stopped_epoch": float(result.stopped_epoch)})
        return [ResultRecord(name="train", metrics=metrics, seed=seed,
                             config={"model": gpn_cfg.model_dump(mode="json"),
                                     "schedule": schedule.model_dump(mode="json")})]

    records = run_seeds(run, _seeds(settings), settings.num_workers)
    write_results(records, out)
    for record in records:
        print(f"✅ seed={record.seed} 测试准确率 {record.metrics['accuracy']:.2%}")


def cmd_eval(args, settings: Settings) -> None:
    if not args.checkpoint:
        raise InputError("eval 需要 --checkpoint")
    dataset = _load_data(args, settings)
    model = load_checkpoint(args.checkpoint, dataset.graph)
    split = stratified_split(dataset, settings.split_ratios, settings.seed)
    metrics = evaluate_model(model, dataset, split.test, settings.ece_bins)
    write_results([ResultRecord(name="eval", metrics=metrics, seed=settings.seed,
                                config={"model": model.config.model_dump(mode="json")})], _out_dir(args, settings))
    print(f"✅ 测试准确率 {metrics['accuracy']:.2%}，ECE {metrics['ece']:.4f}")


def cmd_ood(args, settings: Settings) -> None:
    dataset = _load_data(args, settings)
    gpn_cfg, schedule, loss_cfg = _components(settings)

    def run(seed: int) -> List[ResultRecord]:
        split = stratified_split(dataset, settings.split_ratios, seed)
        exp = OodExperiment(kind=args.kind, fraction=args.fraction, left_out=args.left_out or [], seed=seed)
        result = train_for_experiment(dataset, split, exp, gpn_cfg, schedule, loss_cfg, seed)
        return [run_ood_experiment(result.model, dataset, split, exp, settings.ece_bins)]

    records = run_seeds(run, _seeds(settings), settings.num_workers)
    write_results(records, _out_dir(args, settings))
    print(f"✅ {args.kind} 实验完成，共 {len(records)} 条记录")


def cmd_shift(args, settings: Settings) -> None:
    dataset = _load_data(args, settings)
    gpn_cfg, schedule, loss_cfg = _components(settings)
    levels = args.levels or list(DEFAULT_SHIFT_LEVELS)

    def run(seed: int) -> List[ResultRecord]:
        split = stratified_split(dataset, settings.split_ratios, seed)
        result = train_gpn(dataset, split, gpn_cfg, schedule, loss_cfg, seed)
        return run_shift_sweep(result.model, dataset, split, args.kind, levels, seed, settings.ece_bins)

    records = run_seeds(run, _seeds(settings), settings.num_workers)
    write_results(records, _out_dir(args, settings))
    print(f"✅ 偏移扫描完成: {len(levels)} 个强度 × {settings.num_seeds} 个种子")


def cmd_baseline(args, settings: Settings) -> None:
    dataset = _load_data(args, settings)
    try:
        gkde_cfg = GkdeConfig.from_settings(settings)
        lp_cfg = LpConfig.from_settings(settings)
    except ValidationError as exc:
        raise ConfigError(f"配置取值非法: {exc}") from exc

    records = []
    for seed in _seeds(settings):
        split = stratified_split(dataset, settings.split_ratios, seed)
        if args.method == "gkde":
            alpha = gkde_alpha(dataset.graph, dataset.labels, split.train, gkde_cfg, dataset.num_classes)
            echo = gkde_cfg.model_dump(mode="json")
        else:
            alpha = lp_alpha(dataset.graph, dataset.labels, split.train, lp_cfg, dataset.num_classes)
            echo = lp_cfg.model_dump(mode="json")
        metrics = evaluate_baseline(alpha, dataset, split, settings.ece_bins)
        records.append(ResultRecord(name=args.method, metrics=metrics, seed=seed, config={"baseline": echo}))
    write_results(records, _out_dir(args, settings))
    print(f"✅ 基线 {args.method} 评估完成，共 {len(records)} 条记录")


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ood": cmd_ood,
    "shift": cmd_shift,
    "baseline": cmd_baseline,
    "synth": cmd_synth,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="图后验网络：图上节点分类的不确定性估计")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--data", help="数据集目录（缺省时使用合成数据集）")
        p.add_argument("--config", help="key=value 配置文件")
        p.add_argument("--seed", type=int, help="随机种子")
        p.add_argument("--out", help="输出目录")
        p.add_argument("--checkpoint", help="模型检查点文件")

    for name in ("train", "eval", "synth"):
        common(sub.add_parser(name))
    ood = sub.add_parser("ood")
    common(ood)
    ood.add_argument("--kind", choices=[k.value for k in OodKind], required=True)
    ood.add_argument("--fraction", type=float, default=0.1)
    ood.add_argument("--left-out", type=int, nargs="*", dest="left_out")
    shift = sub.add_parser("shift")
    common(shift)
    shift.add_argument("--kind", choices=[k.value for k in OodKind if k.value.startswith(("feature", "edges"))],
                       required=True)
    shift.add_argument("--levels", type=float, nargs="*")
    baseline = sub.add_parser("baseline")
    common(baseline)
    baseline.add_argument("--method", choices=["gkde", "lp"], default="gkde")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """主函数，返回进程退出码"""
    args = build_parser().parse_args(argv)
    try:
        settings = load_settings(args.config, seed=args.seed)
        logging.getLogger().setLevel(getattr(logging, settings.log_level.upper(), logging.INFO))
        print("=" * 60)
        print(f"🎓 图后验网络 · {args.command}")
        print("=" * 60)
        COMMANDS[args.command](args, settings)
    except (GPNError, ValidationError) as exc:
        logger.error(f"运行失败: {exc}")
        print(f"❌ {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
