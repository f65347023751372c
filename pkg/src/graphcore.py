"""
稀疏图核心模块
无向图存储、邻接矩阵归一化、PPR 幂迭代传播、BFS 距离与结构扰动
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.sparse.csgraph import shortest_path

from diffcore import Tensor, spmm
from errors import InputError, ParameterError, PerturbationError, ShapeError

# 配置日志
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

# 不可达节点的距离哨兵值
UNREACHABLE = np.iinfo(np.int32).max

# 候选边可以整体枚举的节点数上限
_ENUMERATE_LIMIT = 2000


class NormalizationMode(str, Enum):
    """传播矩阵归一化方式"""
    SYMMETRIC = "symmetric"   # D^-1/2 (A+I) D^-1/2
    ROW = "row"               # D^-1 (A+I)，行和为 1
    COLUMN = "column"         # (A+I) D^-1，列和为 1


@dataclass(frozen=True)
class SparseGraph:
    """无向、无权、无自环的 CSR 图"""
    num_nodes: int
    row_offsets: np.ndarray
    col_indices: np.ndarray

    @classmethod
    def from_edge_list(cls, num_nodes: int, edges: Union[Sequence[Tuple[int, int]], np.ndarray]) -> "SparseGraph":
        """
        由边列表构建图：对称化、去重、去自环

        Args:
            num_nodes: 节点数
            edges: (u, v) 索引对

        Returns:
            SparseGraph
        """
        if num_nodes < 0:
            raise InputError(f"节点数不能为负: {num_nodes}")
        pairs = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if pairs.size and (pairs.min() < 0 or pairs.max() >= num_nodes):
            raise InputError(f"边索引超出范围 [0, {num_nodes})")

        pairs = pairs[pairs[:, 0] != pairs[:, 1]]
        rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
        cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
        adj = sp.coo_matrix((np.ones(rows.size), (rows, cols)), shape=(num_nodes, num_nodes)).tocsr()
        # 重复边在 tocsr 时被求和，这里统一置 1
        adj.data[:] = 1.0
        adj.sort_indices()
        return cls(
            num_nodes=num_nodes,
            row_offsets=adj.indptr.astype(np.int64),
            col_indices=adj.indices.astype(np.int64),
        )

    @classmethod
    def from_file(cls, num_nodes: int, path: Union[str, Path]) -> "SparseGraph":
        return cls.from_edge_list(num_nodes, read_edge_list(path))

    @property
    def num_edges(self) -> int:
        """无向边数"""
        return int(self.col_indices.size // 2)

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.row_offsets)

    def neighbors(self, node: int) -> np.ndarray:
        return self.col_indices[self.row_offsets[node]:self.row_offsets[node + 1]]

    def has_edge(self, u: int, v: int) -> bool:
        row = self.neighbors(u)
        pos = np.searchsorted(row, v)
        return bool(pos < row.size and row[pos] == v)

    def adjacency(self) -> sp.csr_matrix:
        """0/1 邻接矩阵"""
        data = np.ones(self.col_indices.size)
        return sp.csr_matrix((data, self.col_indices, self.row_offsets), shape=(self.num_nodes, self.num_nodes))

    def edges(self) -> np.ndarray:
        """每条无向边只出现一次，u < v，形状 [m×2]"""
        rows = np.repeat(np.arange(self.num_nodes), self.degrees)
        mask = rows < self.col_indices
        return np.stack([rows[mask], self.col_indices[mask]], axis=1)


def read_edge_list(path: Union[str, Path]) -> np.ndarray:
    """读取 "u v" 每行一条、'#' 为注释的边文件"""
    try:
        frame = pd.read_csv(path, sep=r"\s+", comment="#", header=None, dtype=np.int64, engine="python")
    except pd.errors.EmptyDataError:
        return np.zeros((0, 2), dtype=np.int64)
    if frame.shape[1] != 2:
        raise InputError(f"边文件每行应为两个整数: {path}")
    return frame.to_numpy(dtype=np.int64)


def write_edge_list(graph: SparseGraph, path: Union[str, Path]) -> None:
    edges = graph.edges()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# {graph.num_nodes} nodes, {graph.num_edges} undirected edges\n")
        pd.DataFrame(edges).to_csv(fh, sep=" ", header=False, index=False)


def homophily(graph: SparseGraph, labels: np.ndarray) -> float:
    """同类边占比；无边图返回 1"""
    edges = graph.edges()
    if edges.shape[0] == 0:
        return 1.0
    labels = np.asarray(labels)
    return float(np.mean(labels[edges[:, 0]] == labels[edges[:, 1]]))


# ---------------------------------------------------------------------------
# 传播算子
# ---------------------------------------------------------------------------

def normalize_adjacency(graph: SparseGraph, mode: NormalizationMode) -> sp.csr_matrix:
    """加自环后按 mode 归一化"""
    adj = graph.adjacency() + sp.eye(graph.num_nodes, format="csr")
    deg = np.asarray(adj.sum(axis=1)).ravel()
    mode = NormalizationMode(mode)
    if mode == NormalizationMode.SYMMETRIC:
        d_inv_sqrt = sp.diags(1.0 / np.sqrt(deg))
        normalized = d_inv_sqrt @ adj @ d_inv_sqrt
    elif mode == NormalizationMode.ROW:
        normalized = sp.diags(1.0 / deg) @ adj
    else:
        normalized = adj @ sp.diags(1.0 / deg)
    normalized = normalized.tocsr()
    normalized.sort_indices()
    return normalized


@dataclass(frozen=True)
class PropagationOperator:
    """K 步截断的个性化 PageRank 传播算子"""
    graph: SparseGraph
    teleport: float = 0.1
    iterations: int = 10
    mode: NormalizationMode = NormalizationMode.SYMMETRIC
    matrix: sp.csr_matrix = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not 0.0 < self.teleport < 1.0:
            raise ParameterError(f"teleport 必须在 (0, 1) 内，当前 {self.teleport}")
        if self.iterations < 0:
            raise ParameterError(f"迭代步数不能为负，当前 {self.iterations}")
        object.__setattr__(self, "mode", NormalizationMode(self.mode))
        if self.matrix is None:
            object.__setattr__(self, "matrix", normalize_adjacency(self.graph, self.mode))

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes

    def with_graph(self, graph: SparseGraph) -> "PropagationOperator":
        """同样的超参数作用在另一张图上"""
        return PropagationOperator(graph, self.teleport, self.iterations, self.mode)

    def dense_matrix(self) -> np.ndarray:
        """K 步递推所隐含的稠密矩阵 M，满足 propagate(X) = M X"""
        return propagate(self, np.eye(self.num_nodes))

    def dense_ppr(self, truncated: bool = False) -> np.ndarray:
        """
        稠密 PPR 矩阵

        Args:
            truncated: True 返回 τ Σ_{k=0..K} (1-τ)^k Â^k，False 返回极限 τ (I - (1-τ) Â)^-1
        """
        a_hat = self.matrix.toarray()
        n = self.num_nodes
        if not truncated:
            return self.teleport * np.linalg.inv(np.eye(n) - (1.0 - self.teleport) * a_hat)
        total = np.zeros((n, n))
        term = np.eye(n)
        for k in range(self.iterations + 1):
            total += (1.0 - self.teleport) ** k * term
            term = a_hat @ term
        return self.teleport * total


def build_operator(graph: SparseGraph, teleport: float = 0.1, iterations: int = 10,
                   mode: Union[str, NormalizationMode] = NormalizationMode.SYMMETRIC) -> PropagationOperator:
    return PropagationOperator(graph, teleport, iterations, NormalizationMode(mode))


def propagate(op: PropagationOperator, X: Union[Tensor, np.ndarray]) -> Union[Tensor, np.ndarray]:
    """
    幂迭代 Z^(k+1) = (1-τ) Â Z^(k) + τ X，Z^(0) = X，共 K 步

    Args:
        op: 传播算子
        X: [n×d] 张量（可微）或 numpy 数组

    Returns:
        与输入同类型的传播结果
    """
    if not isinstance(X, Tensor):
        X = np.asarray(X, dtype=np.float64)
    rows = X.shape[0] if X.ndim else None
    if rows != op.num_nodes:
        raise ShapeError(f"propagate: 输入行数 {rows} 与节点数 {op.num_nodes} 不符")
    tau = op.teleport
    if isinstance(X, Tensor):
        Z = X
        restart = X * tau
        for _ in range(op.iterations):
            Z = spmm(op.matrix, Z) * (1.0 - tau) + restart
        return Z

    Z = X
    for _ in range(op.iterations):
        Z = (1.0 - tau) * np.asarray(op.matrix @ Z) + tau * X
    return Z


# ---------------------------------------------------------------------------
# 最短路
# ---------------------------------------------------------------------------

def bfs_distances(graph: SparseGraph, sources: Iterable[int]) -> np.ndarray:
    """
    无权最短路跳数

    Args:
        graph: 图
        sources: 源节点集合（非空）

    Returns:
        [len(sources)×n] int32 矩阵，不可达为 UNREACHABLE
    """
    src = np.asarray(list(sources), dtype=np.int64)
    if src.size == 0:
        raise InputError("bfs_distances 需要至少一个源节点")
    if src.min() < 0 or src.max() >= graph.num_nodes:
        raise InputError("源节点索引越界")
    dist = shortest_path(graph.adjacency(), method="D", directed=False, unweighted=True, indices=src)
    dist = np.atleast_2d(dist)
    out = np.full(dist.shape, UNREACHABLE, dtype=np.int32)
    finite = np.isfinite(dist)
    out[finite] = dist[finite].astype(np.int32)
    return out


# ---------------------------------------------------------------------------
# 结构扰动
# ---------------------------------------------------------------------------

def _edge_keys(edges: np.ndarray, n: int) -> np.ndarray:
    lo = np.minimum(edges[:, 0], edges[:, 1])
    hi = np.maximum(edges[:, 0], edges[:, 1])
    return lo * n + hi


def _sample_new_edges(graph: SparseGraph, count: int, rng: np.random.Generator,
                      forbidden: set, accept=None) -> np.ndarray:
    """
    均匀采样 count 条图中不存在、非自环、满足 accept(u, v) 的新边

    候选可枚举时直接枚举补图，否则拒绝采样。返回的边数可能少于 count（候选不足）。
    """
    n = graph.num_nodes
    if count <= 0 or n < 2:
        return np.zeros((0, 2), dtype=np.int64)

    if n <= _ENUMERATE_LIMIT:
        iu, ju = np.triu_indices(n, k=1)
        keys = iu * n + ju
        free = ~np.isin(keys, np.fromiter(forbidden, dtype=np.int64, count=len(forbidden)))
        if accept is not None:
            free &= accept(iu, ju)
        candidates = np.flatnonzero(free)
        take = min(count, candidates.size)
        chosen = rng.choice(candidates, size=take, replace=False) if take else np.zeros(0, dtype=np.int64)
        return np.stack([iu[chosen], ju[chosen]], axis=1)

    picked = []
    seen = set(forbidden)
    attempts = 0
    max_attempts = 50 * count + 1000
    while len(picked) < count and attempts < max_attempts:
        attempts += 1
        u, v = rng.integers(0, n, size=2)
        if u == v:
            continue
        lo, hi = (u, v) if u < v else (v, u)
        key = int(lo) * n + int(hi)
        if key in seen:
            continue
        if accept is not None and not bool(accept(np.array([lo]), np.array([hi]))[0]):
            continue
        seen.add(key)
        picked.append((lo, hi))
    return np.asarray(picked, dtype=np.int64).reshape(-1, 2)


def _budget(graph: SparseGraph, fraction: float) -> int:
    if not 0.0 <= fraction <= 1.0:
        raise ParameterError(f"扰动比例必须在 [0, 1] 内，当前 {fraction}")
    return int(np.floor(fraction * graph.num_edges))


def perturb_edges_random(graph: SparseGraph, fraction: float, rng: np.random.Generator) -> SparseGraph:
    """
    随机删除 ⌊fraction·|E|⌋ 条边，并补上同样数量的随机新边（边数不变）

    新边不与原图中任何边重合。
    """
    budget = _budget(graph, fraction)
    if budget == 0:
        return graph
    n = graph.num_nodes
    edges = graph.edges()
    available = n * (n - 1) // 2 - edges.shape[0]
    if budget > available:
        raise PerturbationError(f"图过于稠密：需要 {budget} 条新边，但只有 {available} 个空位")

    removed = rng.choice(edges.shape[0], size=budget, replace=False)
    kept = np.delete(edges, removed, axis=0)
    forbidden = set(_edge_keys(edges, n).tolist())
    added = _sample_new_edges(graph, budget, rng, forbidden)
    if added.shape[0] < budget:
        raise PerturbationError(f"只采样到 {added.shape[0]} / {budget} 条新边")
    return SparseGraph.from_edge_list(n, np.concatenate([kept, added]))


def perturb_edges_dice(graph: SparseGraph, fraction: float, labels: np.ndarray,
                       rng: np.random.Generator) -> SparseGraph:
    """
    DICE 攻击：删除类内边、连接类间节点对，边数不变

    总预算 B = ⌊fraction·|E|⌋ 对半分：⌊B/2⌋ 条删除与 ⌊B/2⌋ 条插入，B 为奇数时
    余下的 1 次不使用。合格的类内边（或类间空位）不足时，剩余部分退化为
    随机删除（或随机插入）。
    """
    labels = np.asarray(labels)
    if labels.shape[0] != graph.num_nodes:
        raise ShapeError(f"标签长度 {labels.shape[0]} 与节点数 {graph.num_nodes} 不符")
    swaps = _budget(graph, fraction) // 2
    if swaps == 0:
        return graph
    n = graph.num_nodes
    edges = graph.edges()

    intra = np.flatnonzero(labels[edges[:, 0]] == labels[edges[:, 1]])
    n_intra = min(swaps, intra.size)
    removed = rng.choice(intra, size=n_intra, replace=False) if n_intra else np.zeros(0, dtype=np.int64)
    if n_intra < swaps:
        logger.warning(f"DICE: 类内边不足（{intra.size} < {swaps}），其余删除随机进行")
        rest = np.setdiff1d(np.arange(edges.shape[0]), removed)
        extra = rng.choice(rest, size=swaps - n_intra, replace=False)
        removed = np.concatenate([removed, extra])
    kept = np.delete(edges, removed, axis=0)

    forbidden = set(_edge_keys(edges, n).tolist())
    added = _sample_new_edges(graph, swaps, rng, forbidden, accept=lambda u, v: labels[u] != labels[v])
    if added.shape[0] < swaps:
        logger.warning(f"DICE: 类间空位不足（{added.shape[0]} < {swaps}），其余插入随机进行")
        forbidden |= set(_edge_keys(added, n).tolist())
        fallback = _sample_new_edges(graph, swaps - added.shape[0], rng, forbidden)
        added = np.concatenate([added, fallback])
        if added.shape[0] < swaps:
            raise PerturbationError(f"只采样到 {added.shape[0]} / {swaps} 条新边")
    return SparseGraph.from_edge_list(n, np.concatenate([kept, added]))
