"""
评估指标模块
准确率、Brier 分数、ECE 以及以 OOD/误分类节点为正类的 AUC-ROC / AUC-PR
"""
import logging
from typing import Optional

import numpy as np
from scipy.stats import rankdata
from sklearn.metrics import average_precision_score

from errors import MetricError, ShapeError

# 配置日志
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


def _select(mask: Optional[np.ndarray], n: int) -> np.ndarray:
    if mask is None:
        return np.ones(n, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n,):
        raise ShapeError(f"掩码形状 {mask.shape} 与样本数 {n} 不符")
    return mask


def accuracy(preds: np.ndarray, labels: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """掩码内预测正确的比例"""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    selected = _select(mask, labels.shape[0])
    if not selected.any():
        raise MetricError("准确率需要至少一个样本")
    return float(np.mean(preds[selected] == labels[selected]))


def brier(probs: np.ndarray, labels: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """
    Brier 分数：(1/C)·平均 ‖p - onehot(y)‖²

    Args:
        probs: [n×C] 概率
        labels: 类别
        mask: 参与计算的样本

    Returns:
        [0, 2/C] 内的分数
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    selected = _select(mask, labels.shape[0])
    if not selected.any():
        raise MetricError("Brier 分数需要至少一个样本")
    p = probs[selected]
    if np.any(p < -1e-12) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-9):
        raise MetricError("概率行不在单纯形上")
    onehot = np.zeros_like(p)
    onehot[np.arange(p.shape[0]), labels[selected]] = 1.0
    return float(np.mean(np.sum((p - onehot) ** 2, axis=1)) / probs.shape[1])


def ece(probs: np.ndarray, preds: np.ndarray, labels: np.ndarray,
        mask: Optional[np.ndarray] = None, bins: int = 10) -> float:
    """
    期望校准误差 Σ_m |B_m|/n · |acc(B_m) - conf(B_m)|

    置信度取最大概率；第 m 个箱覆盖 (m/M, (m+1)/M]，第一个箱包含 0。
    """
    if bins < 1:
        raise MetricError(f"箱数必须 >= 1，当前 {bins}")
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    selected = _select(mask, labels.shape[0])
    if not selected.any():
        raise MetricError("ECE 需要至少一个样本")
    confidence = probs[selected].max(axis=1)
    correct = (np.asarray(preds)[selected] == labels[selected]).astype(np.float64)

    edges = np.linspace(0.0, 1.0, bins + 1)
    index = np.clip(np.digitize(confidence, edges, right=True) - 1, 0, bins - 1)
    total = confidence.size
    error = 0.0
    for m in range(bins):
        members = index == m
        count = int(members.sum())
        if count == 0:
            continue
        error += count / total * abs(correct[members].mean() - confidence[members].mean())
    return float(error)


def _binary_inputs(scores: np.ndarray, positives: np.ndarray):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    positives = np.asarray(positives, dtype=bool).reshape(-1)
    if scores.shape != positives.shape:
        raise ShapeError(f"分数 {scores.shape} 与正类标记 {positives.shape} 长度不同")
    n_pos = int(positives.sum())
    if n_pos == 0 or n_pos == positives.size:
        raise MetricError("AUC 需要同时存在正类与负类样本")
    if not np.all(np.isfinite(scores)):
        raise MetricError("分数中存在非有限值")
    return scores, positives, n_pos


def auc_roc(scores: np.ndarray, positives: np.ndarray) -> float:
    """Mann-Whitney U 统计量形式的 AUC-ROC，平局取平均秩"""
    scores, positives, n_pos = _binary_inputs(scores, positives)
    n_neg = positives.size - n_pos
    ranks = rankdata(scores, method="average")
    u_stat = ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u_stat / (n_pos * n_neg))


def auc_pr(scores: np.ndarray, positives: np.ndarray) -> float:
    """平均精确率形式的 AUC-PR（同分样本按同一阈值处理）"""
    scores, positives, _ = _binary_inputs(scores, positives)
    return float(average_precision_score(positives.astype(np.int64), scores))
