"""
无参数 Dirichlet 基线模块
图核 Dirichlet 估计（GKDE）与标签传播（LP）证据
"""
import logging
from typing import Optional

import numpy as np
from pydantic import BaseModel, Field

from diffcore import Tensor
from errors import InputError, ShapeError
from graphcore import UNREACHABLE, NormalizationMode, SparseGraph, bfs_distances, build_operator, propagate

# 配置日志
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


class GkdeConfig(BaseModel):
    """GKDE 配置"""
    sigma: float = Field(1.0, gt=0.0, description="高斯核带宽 σ")

    @classmethod
    def from_settings(cls, settings) -> "GkdeConfig":
        return cls(sigma=settings.gkde_sigma)


class LpConfig(BaseModel):
    """标签传播配置"""
    teleport: float = Field(0.1, gt=0.0, lt=1.0, description="PPR 传送概率 τ")
    iterations: int = Field(10, ge=0, description="幂迭代步数 K")
    mode: NormalizationMode = Field(NormalizationMode.ROW, description="传播矩阵归一化方式")

    @classmethod
    def from_settings(cls, settings) -> "LpConfig":
        return cls(teleport=settings.lp_teleport, iterations=settings.lp_iterations)


def _labeled_inputs(graph: SparseGraph, labels: np.ndarray, labeled: np.ndarray,
                    num_classes: Optional[int]):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (graph.num_nodes,):
        raise ShapeError(f"标签长度 {labels.shape} 与节点数 {graph.num_nodes} 不符")
    labeled = np.asarray(labeled)
    index = np.flatnonzero(labeled) if labeled.dtype == bool else labeled.astype(np.int64)
    if index.size == 0:
        raise InputError("至少需要一个有标签节点")
    num_classes = int(labels.max()) + 1 if num_classes is None else num_classes
    return labels, index, num_classes


def gkde_alpha(graph: SparseGraph, labels: np.ndarray, labeled: np.ndarray,
               cfg: Optional[GkdeConfig] = None, num_classes: Optional[int] = None) -> Tensor:
    """
    α_c^(v) = 1 + Σ_{u∈L, y_u=c} g(d_{v,u})，g 为高斯核，d 为最短路跳数

    Args:
        graph: 图
        labels: 节点标签（只使用有标签节点的）
        labeled: 有标签节点（布尔掩码或编号）
        cfg: GKDE 配置
        num_classes: 类别数（默认由标签推断）

    Returns:
        [n×C] Dirichlet 参数
    """
    cfg = cfg or GkdeConfig()
    labels, index, num_classes = _labeled_inputs(graph, labels, labeled, num_classes)
    dist = bfs_distances(graph, index).astype(np.float64)
    reachable = dist != UNREACHABLE
    kernel = np.where(
        reachable,
        np.exp(-np.where(reachable, dist, 0.0) ** 2 / (2.0 * cfg.sigma ** 2)) / (cfg.sigma * np.sqrt(2.0 * np.pi)),
        0.0,
    )
    onehot = np.zeros((index.size, num_classes))
    onehot[np.arange(index.size), labels[index]] = 1.0
    return Tensor(1.0 + kernel.T @ onehot)


def lp_alpha(graph: SparseGraph, labels: np.ndarray, labeled: np.ndarray,
             cfg: Optional[LpConfig] = None, num_classes: Optional[int] = None) -> Tensor:
    """
    标签传播证据：ρ0(u|c) = 1{u 有标签且 y_u=c}/|L_c|，PPR 扩散后 α = 1 + ρ

    Args:
        graph: 图
        labels: 节点标签
        labeled: 有标签节点（布尔掩码或编号）
        cfg: LP 配置
        num_classes: 类别数（默认由标签推断）

    Returns:
        [n×C] Dirichlet 参数（逐元素 >= 1）
    """
    cfg = cfg or LpConfig()
    labels, index, num_classes = _labeled_inputs(graph, labels, labeled, num_classes)
    class_sizes = np.bincount(labels[index], minlength=num_classes)
    empty = np.flatnonzero(class_sizes == 0)
    if empty.size:
        raise InputError(f"类别 {empty.tolist()} 没有有标签节点")
    rho0 = np.zeros((graph.num_nodes, num_classes))
    rho0[index, labels[index]] = 1.0 / class_sizes[labels[index]]
    op = build_operator(graph, cfg.teleport, cfg.iterations, cfg.mode)
    rho = propagate(op, rho0)
    return Tensor(1.0 + rho)
