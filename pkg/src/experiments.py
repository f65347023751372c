"""
实验编排模块
干净评估、OOD 检测与误分类检测、分布偏移扫描、多种子并行运行与结果落盘
"""
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, field_validator

from datasets import (
    Dataset,
    EdgeAttack,
    FeatureNoise,
    SplitSpec,
    left_out_class_setup,
    perturb_features,
    perturb_graph,
)
from diffcore import Tensor, no_grad
from errors import InputError
from metrics import accuracy, auc_pr, auc_roc, brier, ece
from posterior import (
    DirichletPosterior,
    GpnConfig,
    GpnOutput,
    GraphPosteriorNetwork,
    UncertaintyScores,
    entropy_cat,
    predict,
)
from training import EpochRecord, LossConfig, TrainResult, TrainSchedule, fit

# 配置日志
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

DEFAULT_SHIFT_LEVELS = (0.0, 0.1, 0.2, 0.5, 0.8, 0.99)


class OodKind(str, Enum):
    """实验类型"""
    FEATURE_BERNOULLI = "feature_bernoulli"
    FEATURE_NORMAL = "feature_normal"
    LEFT_OUT_CLASSES = "left_out_classes"
    EDGES_RANDOM = "edges_random"
    EDGES_DICE = "edges_dice"
    MISCLASSIFICATION = "misclassification"


_FEATURE_KINDS = {
    OodKind.FEATURE_BERNOULLI: FeatureNoise.BERNOULLI,
    OodKind.FEATURE_NORMAL: FeatureNoise.NORMAL,
}
_EDGE_KINDS = {
    OodKind.EDGES_RANDOM: EdgeAttack.RANDOM,
    OodKind.EDGES_DICE: EdgeAttack.DICE,
}


class OodExperiment(BaseModel):
    """一次扰动实验的描述"""
    kind: OodKind = Field(..., description="实验类型")
    fraction: float = Field(0.1, ge=0.0, le=1.0, description="扰动的节点或边比例")
    left_out: List[int] = Field(default_factory=list, description="Left-Out 类别")
    seed: int = Field(0, description="扰动随机种子")


class ResultRecord(BaseModel):
    """一次运行的指标与配置回显"""
    name: str = Field(..., description="实验名称")
    metrics: Dict[str, float] = Field(default_factory=dict, description="指标名 -> 数值")
    config: Dict[str, Any] = Field(default_factory=dict, description="配置回显")
    seed: int = Field(0, description="随机种子")
    runtime: float = Field(0.0, ge=0.0, description="运行耗时（秒）")

    @field_validator("metrics")
    @classmethod
    def _finite(cls, metrics: Dict[str, float]) -> Dict[str, float]:
        bad = [key for key, value in metrics.items() if not math.isfinite(value)]
        if bad:
            raise ValueError(f"指标 {bad} 不是有限数")
        return metrics

    def flat(self) -> Dict[str, Any]:
        row = {"name": self.name, "seed": self.seed, "runtime": self.runtime}
        row.update(self.metrics)
        return row


# ---------------------------------------------------------------------------
# 评估
# ---------------------------------------------------------------------------

def _infer(model: GraphPosteriorNetwork, dataset: Dataset) -> GpnOutput:
    with no_grad():
        return model(dataset.features, training=False)


def _summary_metrics(probs: np.ndarray, alpha0: np.ndarray, labels: np.ndarray,
                     mask: np.ndarray, bins: int) -> Dict[str, float]:
    preds = np.argmax(probs, axis=1)
    return {
        "accuracy": accuracy(preds, labels, mask),
        "brier": brier(probs, labels, mask),
        "ece": ece(probs, preds, labels, mask, bins),
        "mean_alea_conf": float(probs[mask].max(axis=1).mean()),
        "mean_epist_conf": float(alpha0[mask].mean()),
        "mean_entropy": float(np.mean(entropy_cat(probs[mask]))),
    }


def evaluate_model(model: GraphPosteriorNetwork, dataset: Dataset, mask: np.ndarray,
                   bins: int = 10) -> Dict[str, float]:
    """
    掩码节点上的干净指标

    Args:
        model: 已训练模型
        dataset: 数据集
        mask: 评估节点
        bins: ECE 箱数

    Returns:
        accuracy / brier / ece / 平均偶然与认知置信度 / 平均熵
    """
    mask = np.asarray(mask, dtype=bool)
    post = _infer(model, dataset).posterior
    return _summary_metrics(post.mean(), post.alpha0, dataset.labels, mask, bins)


def evaluate_baseline(alpha: Union[Tensor, np.ndarray], dataset: Dataset, split: SplitSpec,
                      bins: int = 10) -> Dict[str, float]:
    """基线 Dirichlet 参数在测试集上的指标"""
    alpha = alpha if isinstance(alpha, Tensor) else Tensor(alpha)
    post = DirichletPosterior(alpha)
    return _summary_metrics(post.mean(), post.alpha0, dataset.labels, split.test, bins)


def _detection_metrics(scores: UncertaintyScores, positives: np.ndarray,
                       mask: np.ndarray) -> Dict[str, float]:
    flags = positives[mask]
    if flags.all() or not flags.any():
        logger.warning("检测集合只含单一类别，跳过 AUC 指标")
        return {}
    metrics = {}
    for name, values in scores.as_dict().items():
        if name not in UncertaintyScores.PRIMARY:
            continue
        metrics[f"auc_roc_{name}"] = auc_roc(values[mask], flags)
        metrics[f"auc_pr_{name}"] = auc_pr(values[mask], flags)
    return metrics


def _echo(model: GraphPosteriorNetwork, exp: Optional[OodExperiment] = None) -> Dict[str, Any]:
    echo = {"model": model.config.model_dump(mode="json")}
    if exp is not None:
        echo["experiment"] = exp.model_dump(mode="json")
    return echo


def run_ood_experiment(model: GraphPosteriorNetwork, dataset: Dataset, split: SplitSpec,
                       exp: OodExperiment, bins: int = 10) -> ResultRecord:
    """
    运行一次 OOD / 误分类检测实验

    特征扰动只作用于测试节点；Left-Out 实验要求模型在留出视图上训练
    （见 train_for_experiment）；结构扰动没有 OOD 节点，只报告干净式指标。

    Args:
        model: 已训练模型
        dataset: 原数据集
        split: 原划分
        exp: 实验描述
        bins: ECE 箱数

    Returns:
        ResultRecord
    """
    start = time.perf_counter()
    rng = np.random.default_rng(exp.seed)
    kind = OodKind(exp.kind)
    eval_model = model
    eval_data = dataset
    id_mask = split.test.copy()
    ood_mask = np.zeros(dataset.num_nodes, dtype=bool)

    if kind in _FEATURE_KINDS:
        eval_data, nodes = perturb_features(dataset, _FEATURE_KINDS[kind], exp.fraction, rng,
                                            candidates=np.flatnonzero(split.test))
        ood_mask[nodes] = True
    elif kind in _EDGE_KINDS:
        eval_data = perturb_graph(dataset, _EDGE_KINDS[kind], exp.fraction, rng)
        eval_model = model.with_graph(eval_data.graph)
    elif kind == OodKind.LEFT_OUT_CLASSES:
        setup = left_out_class_setup(dataset, split, exp.left_out)
        if model.num_classes != setup.dataset.num_classes:
            raise InputError(
                f"模型有 {model.num_classes} 个类别，但留出视图有 {setup.dataset.num_classes} 个"
            )
        eval_data = setup.dataset
        id_mask = setup.split.test.copy()
        ood_mask[setup.ood_nodes] = True

    output = _infer(eval_model, eval_data)
    post = output.posterior
    probs = post.mean()
    preds = predict(post)
    scores = output.scores()
    id_mask &= ~ood_mask
    test_mask = id_mask | ood_mask

    metrics: Dict[str, float] = {}
    if id_mask.any():
        metrics.update({f"id_{key}": value for key, value in
                        _summary_metrics(probs, post.alpha0, eval_data.labels, id_mask, bins).items()})
    if kind == OodKind.MISCLASSIFICATION:
        wrong = preds != eval_data.labels
        metrics["num_misclassified"] = float(np.count_nonzero(wrong & id_mask))
        metrics.update(_detection_metrics(scores, wrong, id_mask))
    elif ood_mask.any():
        metrics["num_ood"] = float(ood_mask.sum())
        if kind != OodKind.LEFT_OUT_CLASSES:
            metrics["ood_accuracy"] = accuracy(preds, eval_data.labels, ood_mask)
        metrics.update(_detection_metrics(scores, ood_mask, test_mask))
    elif kind in _FEATURE_KINDS or kind == OodKind.LEFT_OUT_CLASSES:
        logger.warning("没有 OOD 节点，只报告 ID 指标")

    record = ResultRecord(name=kind.value, metrics=metrics, config=_echo(model, exp), seed=exp.seed,
                          runtime=time.perf_counter() - start)
    logger.info(f"实验完成: {kind.value}，{len(metrics)} 项指标")
    return record


def run_shift_sweep(model: GraphPosteriorNetwork, dataset: Dataset, split: SplitSpec,
                    kind: Union[OodKind, str], levels: Sequence[float] = DEFAULT_SHIFT_LEVELS,
                    seed: int = 0, bins: int = 10) -> List[ResultRecord]:
    """
    在一组扰动强度下评估同一个已训练模型

    Args:
        model: 在干净数据上训练好的模型
        dataset: 数据集
        split: 划分（固定使用测试掩码）
        kind: 特征或结构扰动类型
        levels: 扰动比例列表
        seed: 扰动随机种子（每个强度重新播种）
        bins: ECE 箱数

    Returns:
        每个强度一条 ResultRecord，含相对干净数据的置信度比值
    """
    kind = OodKind(kind)
    if kind not in _FEATURE_KINDS and kind not in _EDGE_KINDS:
        raise InputError(f"偏移扫描只支持特征或结构扰动，当前 {kind.value}")
    if any(not 0.0 <= level <= 1.0 for level in levels):
        raise InputError(f"扰动强度必须在 [0, 1] 内: {list(levels)}")

    clean = evaluate_model(model, dataset, split.test, bins)
    records = []
    for level in levels:
        start = time.perf_counter()
        rng = np.random.default_rng(seed)
        if kind in _FEATURE_KINDS:
            shifted, _ = perturb_features(dataset, _FEATURE_KINDS[kind], level, rng,
                                          candidates=np.flatnonzero(split.test))
            shifted_model = model
        else:
            shifted = perturb_graph(dataset, _EDGE_KINDS[kind], level, rng)
            shifted_model = model.with_graph(shifted.graph)
        metrics = evaluate_model(shifted_model, shifted, split.test, bins)
        metrics["level"] = float(level)
        metrics["rel_alea_conf"] = metrics["mean_alea_conf"] / clean["mean_alea_conf"]
        metrics["rel_epist_conf"] = metrics["mean_epist_conf"] / clean["mean_epist_conf"]
        exp = OodExperiment(kind=kind, fraction=level, seed=seed)
        records.append(ResultRecord(name=f"shift_{kind.value}", metrics=metrics, config=_echo(model, exp),
                                    seed=seed, runtime=time.perf_counter() - start))
        logger.info(f"偏移强度 {level:.2f}: accuracy={metrics['accuracy']:.4f}")
    return records


# ---------------------------------------------------------------------------
# 训练入口与多种子
# ---------------------------------------------------------------------------

def train_gpn(dataset: Dataset, split: SplitSpec, gpn_cfg: GpnConfig, schedule: TrainSchedule,
              loss_cfg: LossConfig, seed: int) -> TrainResult:
    """在给定划分上初始化并训练一个模型"""
    model = GraphPosteriorNetwork.for_graph(gpn_cfg, dataset.num_features, dataset.num_classes,
                                            dataset.graph, seed)
    return fit(model, dataset, split, schedule.model_copy(update={"seed": seed}), loss_cfg)


def train_for_experiment(dataset: Dataset, split: SplitSpec, exp: OodExperiment, gpn_cfg: GpnConfig,
                         schedule: TrainSchedule, loss_cfg: LossConfig, seed: int) -> TrainResult:
    """Left-Out 实验在留出视图上训练，其余实验在原数据上训练"""
    if OodKind(exp.kind) == OodKind.LEFT_OUT_CLASSES:
        setup = left_out_class_setup(dataset, split, exp.left_out)
        return train_gpn(setup.dataset, setup.split, gpn_cfg, schedule, loss_cfg, seed)
    return train_gpn(dataset, split, gpn_cfg, schedule, loss_cfg, seed)


def run_seeds(run_fn: Callable[[int], List[ResultRecord]], seeds: Sequence[int],
              num_workers: int = 4) -> List[ResultRecord]:
    """
    在线程池中并行运行互相独立的种子，按种子顺序合并结果

    Args:
        run_fn: 种子 -> 该种子的结果记录
        seeds: 种子列表
        num_workers: 线程数

    Returns:
        全部记录
    """
    seeds = list(seeds)
    if not seeds:
        return []
    workers = max(1, min(num_workers, len(seeds)))
    logger.info(f"并行运行 {len(seeds)} 个种子，{workers} 个线程")
    with ThreadPoolExecutor(max_workers=workers) as executor:
        results = list(executor.map(run_fn, seeds))
    return [record for batch in results for record in batch]


def aggregate_records(records: Sequence[ResultRecord]) -> pd.DataFrame:
    """按实验名与指标汇总多种子结果的均值、标准差与样本数"""
    rows = [
        {"name": record.name, "metric": key, "value": value}
        for record in records for key, value in record.metrics.items()
    ]
    if not rows:
        return pd.DataFrame(columns=["name", "metric", "mean", "std", "count"])
    grouped = pd.DataFrame(rows).groupby(["name", "metric"], sort=True)["value"]
    summary = pd.DataFrame({
        "mean": grouped.mean(),
        "std": grouped.std(ddof=0),
        "count": grouped.count(),
    })
    return summary.reset_index()


def write_results(records: Sequence[ResultRecord], out_dir: Union[str, Path]) -> Path:
    """写出 results.json（完整记录）、results.csv（扁平指标表）与 summary.csv（多种子汇总）"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = [record.model_dump(mode="json") for record in records]
    (out_dir / "results.json").write_text(json.dumps(payload, ensure_ascii=False, indent=2), encoding="utf-8")
    pd.DataFrame([record.flat() for record in records]).to_csv(out_dir / "results.csv", index=False)
    aggregate_records(records).to_csv(out_dir / "summary.csv", index=False)
    logger.info(f"结果已写入: {out_dir}")
    return out_dir


def write_history(history: Sequence[EpochRecord], path: Union[str, Path]) -> Path:
    """写出逐轮训练历史 history.csv"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(
        [{"epoch": h.epoch, "phase": h.phase, "train_loss": h.train_loss, "val_loss": h.val_loss} for h in history],
        columns=["epoch", "phase", "train_loss", "val_loss"],
    )
    frame.to_csv(path, index=False)
    return path
