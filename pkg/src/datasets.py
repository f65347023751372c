"""
数据集模块
属性图数据集的读写、合成基准、分层划分、特征/结构扰动与 Left-Out 类别设置
"""
import json
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

from errors import DatasetLoadError, InputError, ParameterError, ShapeError, SplitError
from graphcore import SparseGraph, perturb_edges_dice, perturb_edges_random, read_edge_list, write_edge_list

# 配置日志
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

META_FILE = "meta.json"
FEATURES_FILE = "features.bin"
LABELS_FILE = "labels.bin"
EDGES_FILE = "edges.txt"

# 浮点比例乘节点数时的舍入容差
_RATIO_EPS = 1e-9


class FeatureNoise(str, Enum):
    """特征扰动分布"""
    BERNOULLI = "bernoulli"     # x ~ Ber(0.5)
    NORMAL = "normal"           # x ~ N(0, 1)


class EdgeAttack(str, Enum):
    """图结构扰动方式"""
    RANDOM = "random"
    DICE = "dice"


@dataclass
class Dataset:
    """属性图数据集 G = (A, X) 与节点标签"""
    graph: SparseGraph
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.graph.num_nodes
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ShapeError(f"特征形状 {self.features.shape} 与节点数 {n} 不符")
        if self.labels.shape != (n,):
            raise ShapeError(f"标签形状 {self.labels.shape} 与节点数 {n} 不符")
        if self.num_classes < 1:
            raise InputError(f"类别数必须 >= 1，当前 {self.num_classes}")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InputError(f"标签超出范围 [0, {self.num_classes})")
        missing = np.setdiff1d(np.arange(self.num_classes), self.labels)
        if missing.size:
            raise InputError(f"类别 {missing.tolist()} 没有任何节点")

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def with_graph(self, graph: SparseGraph) -> "Dataset":
        return replace(self, graph=graph)

    def with_features(self, features: np.ndarray) -> "Dataset":
        return replace(self, features=features)


@dataclass
class SplitSpec:
    """训练/验证/测试布尔掩码，两两不相交且覆盖全部节点"""
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: Optional[int] = None

    def __post_init__(self):
        self.train = np.asarray(self.train, dtype=bool)
        self.val = np.asarray(self.val, dtype=bool)
        self.test = np.asarray(self.test, dtype=bool)
        if not (self.train.shape == self.val.shape == self.test.shape) or self.train.ndim != 1:
            raise SplitError("三个掩码必须是同长度的一维数组")
        overlap = (self.train & self.val) | (self.train & self.test) | (self.val & self.test)
        if overlap.any():
            raise SplitError(f"掩码存在 {int(overlap.sum())} 个重叠节点")
        if not (self.train | self.val | self.test).all():
            raise SplitError("掩码未覆盖全部节点")

    def sizes(self) -> Dict[str, int]:
        return {"train": int(self.train.sum()), "val": int(self.val.sum()), "test": int(self.test.sum())}


@dataclass
class LeftOutSetup:
    """Left-Out 类别实验的训练视图"""
    dataset: Dataset
    split: SplitSpec
    ood_nodes: np.ndarray
    class_map: Dict[int, int] = field(default_factory=dict)
    original_labels: Optional[np.ndarray] = None


# ---------------------------------------------------------------------------
# 读写
# ---------------------------------------------------------------------------

def _read_meta(directory: Path) -> dict:
    path = directory / META_FILE
    if not path.is_file():
        raise DatasetLoadError(META_FILE, f"文件不存在: {path}")
    try:
        meta = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetLoadError(META_FILE, f"不是合法 JSON: {exc}") from exc
    for key in ("num_nodes", "num_features", "num_classes"):
        value = meta.get(key)
        if not isinstance(value, int) or value < 0:
            raise DatasetLoadError(key, f"meta.json 中缺失或非法: {value!r}")
    return meta


def _read_binary(path: Path, dtype: str, expected: int) -> np.ndarray:
    if not path.is_file():
        raise DatasetLoadError(path.name, f"文件不存在: {path}")
    raw = path.read_bytes()
    itemsize = np.dtype(dtype).itemsize
    if len(raw) != itemsize * expected:
        raise DatasetLoadError(path.name, f"字节长度 {len(raw)} 与期望 {itemsize * expected} 不符")
    return np.frombuffer(raw, dtype=dtype).copy()


def load_dataset(directory: Union[str, Path]) -> Dataset:
    """
    读取数据集目录

    目录包含 meta.json、features.bin（f64 小端行优先）、labels.bin（u32 小端）与 edges.txt。

    Args:
        directory: 数据集目录

    Returns:
        校验后的 Dataset
    """
    directory = Path(directory)
    meta = _read_meta(directory)
    n, d, c = meta["num_nodes"], meta["num_features"], meta["num_classes"]

    features = _read_binary(directory / FEATURES_FILE, "<f8", n * d).reshape(n, d)
    labels = _read_binary(directory / LABELS_FILE, "<u4", n).astype(np.int64)
    if n and labels.max() >= c:
        raise DatasetLoadError(LABELS_FILE, f"标签 {int(labels.max())} 超出类别数 {c}")
    missing = np.setdiff1d(np.arange(c), labels)
    if missing.size:
        raise DatasetLoadError(LABELS_FILE, f"类别 {missing.tolist()} 没有任何节点")

    edges_path = directory / EDGES_FILE
    if not edges_path.is_file():
        raise DatasetLoadError(EDGES_FILE, f"文件不存在: {edges_path}")
    try:
        graph = SparseGraph.from_edge_list(n, read_edge_list(edges_path))
    except (InputError, ValueError) as exc:
        raise DatasetLoadError(EDGES_FILE, str(exc)) from exc

    dataset = Dataset(graph, features, labels, c, meta.get("name", directory.name))
    logger.info(f"数据集已加载: {dataset.name}，{n} 个节点，{graph.num_edges} 条边，{d} 维特征，{c} 类")
    return dataset


def save_dataset(dataset: Dataset, directory: Union[str, Path]) -> Path:
    """把数据集写成 load_dataset 可读取的目录"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "name": dataset.name,
        "num_nodes": dataset.num_nodes,
        "num_features": dataset.num_features,
        "num_classes": dataset.num_classes,
    }
    (directory / META_FILE).write_text(json.dumps(meta, ensure_ascii=False, indent=2), encoding="utf-8")
    (directory / FEATURES_FILE).write_bytes(np.ascontiguousarray(dataset.features, dtype="<f8").tobytes())
    (directory / LABELS_FILE).write_bytes(dataset.labels.astype("<u4").tobytes())
    write_edge_list(dataset.graph, directory / EDGES_FILE)
    logger.info(f"数据集已写入: {directory}")
    return directory


# ---------------------------------------------------------------------------
# 合成基准
# ---------------------------------------------------------------------------

def make_synthetic_benchmark(nodes_per_class: int = 200, num_classes: int = 4, feature_dim: int = 16,
                             homophily: float = 0.8, seed: int = 42, avg_degree: float = 6.0,
                             separation: float = 4.0, noise_scale: float = 0.05,
                             name: str = "synthetic") -> Dataset:
    """
    生成高斯类条件特征的同配图

    类别 c 的特征服从 N(separation·σ·e_c, σ²I)，σ = noise_scale：类均值沿坐标轴
    相隔 separation 个噪声标准差。σ 取小值时特征像词袋向量一样稀疏且幅度小，
    N(0, 1) 特征在每个坐标上约为数据尺度的 1/σ 倍，落在数据域之外。
    每条边以概率 homophily 连接同类节点，否则连接随机的异类节点。

    Args:
        nodes_per_class: 每类节点数
        num_classes: 类别数 C
        feature_dim: 特征维度（需 >= C）
        homophily: 类内边概率
        seed: 随机种子
        avg_degree: 期望平均度
        separation: 类均值间距（以噪声标准差为单位）
        noise_scale: 特征噪声标准差 σ

    Returns:
        Dataset
    """
    if nodes_per_class < 2 or num_classes < 1 or avg_degree < 0 or noise_scale <= 0:
        raise ParameterError(
            f"合成参数非法: nodes_per_class={nodes_per_class}, num_classes={num_classes}, "
            f"avg_degree={avg_degree}, noise_scale={noise_scale}"
        )
    if feature_dim < num_classes:
        raise ParameterError(f"特征维度 {feature_dim} 不能小于类别数 {num_classes}")
    if not 0.0 <= homophily <= 1.0:
        raise ParameterError(f"homophily 必须在 [0, 1] 内，当前 {homophily}")
    rng = np.random.default_rng(seed)

    n = nodes_per_class * num_classes
    labels = np.repeat(np.arange(num_classes), nodes_per_class)
    means = np.zeros((num_classes, feature_dim))
    means[np.arange(num_classes), np.arange(num_classes)] = separation
    features = noise_scale * (means[labels] + rng.standard_normal((n, feature_dim)))

    m = int(round(n * avg_degree / 2.0))
    u = rng.integers(n, size=m)
    cls_u = labels[u]
    intra = rng.random(m) < homophily if num_classes > 1 else np.ones(m, dtype=bool)
    offset = rng.integers(1, nodes_per_class, size=m)
    same = cls_u * nodes_per_class + (u - cls_u * nodes_per_class + offset) % nodes_per_class
    if num_classes > 1:
        other_cls = (cls_u + rng.integers(1, num_classes, size=m)) % num_classes
    else:
        other_cls = cls_u
    other = other_cls * nodes_per_class + rng.integers(nodes_per_class, size=m)
    v = np.where(intra, same, other)

    graph = SparseGraph.from_edge_list(n, np.stack([u, v], axis=1))
    logger.info(f"合成数据集: {n} 个节点，{graph.num_edges} 条边，{num_classes} 类")
    return Dataset(graph, features, labels, num_classes, name)


# ---------------------------------------------------------------------------
# 划分
# ---------------------------------------------------------------------------

def _allocate(counts: np.ndarray, ratio: float) -> np.ndarray:
    """按比例给各类分配名额：全局取整，余额按最大小数部分分配"""
    quotas = ratio * counts
    base = np.floor(quotas + _RATIO_EPS).astype(np.int64)
    target = int(np.floor(ratio * counts.sum() + _RATIO_EPS))
    remainder = target - int(base.sum())
    if remainder > 0:
        # 稳定排序：小数部分相同时类别编号小者优先
        order = np.argsort(-(quotas - base), kind="stable")
        base[order[:remainder]] += 1
    return base


def stratified_split(dataset: Dataset, ratios: Tuple[float, float, float] = (0.05, 0.15, 0.80),
                     seed: int = 0) -> SplitSpec:
    """
    分层抽样划分训练/验证/测试集

    Args:
        dataset: 数据集
        ratios: (train, val, test) 比例，和为 1
        seed: 随机种子

    Returns:
        SplitSpec；每类至少 1 个训练节点，余下节点归入测试集
    """
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-6:
        raise SplitError(f"划分比例必须非负且和为 1，当前 {ratios}")
    counts = dataset.class_counts()
    small = np.flatnonzero(counts < 3)
    if small.size:
        raise SplitError(f"类别 {small.tolist()} 的节点少于 3 个，无法划分")

    train_quota = np.maximum(_allocate(counts, ratios[0]), 1)
    val_quota = np.minimum(_allocate(counts, ratios[1]), counts - train_quota)

    rng = np.random.default_rng(seed)
    n = dataset.num_nodes
    train = np.zeros(n, dtype=bool)
    val = np.zeros(n, dtype=bool)
    for c in range(dataset.num_classes):
        members = rng.permutation(np.flatnonzero(dataset.labels == c))
        train[members[:train_quota[c]]] = True
        val[members[train_quota[c]:train_quota[c] + val_quota[c]]] = True
    split = SplitSpec(train, val, ~(train | val), seed)
    logger.info(f"分层划分完成: {split.sizes()}")
    return split


# ---------------------------------------------------------------------------
# 扰动
# ---------------------------------------------------------------------------

def perturb_features(dataset: Dataset, kind: Union[FeatureNoise, str], node_fraction: float,
                     rng: np.random.Generator, candidates: Optional[np.ndarray] = None
                     ) -> Tuple[Dataset, np.ndarray]:
    """
    用 Ber(0.5) 或 N(0, 1) 噪声替换一部分节点的整行特征

    Args:
        dataset: 数据集
        kind: 噪声分布
        node_fraction: 被扰动节点占候选节点的比例
        rng: 随机数生成器
        candidates: 候选节点（默认全部节点）

    Returns:
        (扰动后的数据集, 被扰动节点编号)
    """
    kind = FeatureNoise(kind)
    if not 0.0 <= node_fraction <= 1.0:
        raise ParameterError(f"扰动比例必须在 [0, 1] 内，当前 {node_fraction}")
    pool = np.arange(dataset.num_nodes) if candidates is None else np.asarray(candidates, dtype=np.int64)
    count = int(np.floor(node_fraction * pool.size + _RATIO_EPS))
    if count == 0:
        return dataset, np.zeros(0, dtype=np.int64)
    nodes = np.sort(rng.choice(pool, size=count, replace=False))
    features = dataset.features.copy()
    shape = (count, dataset.num_features)
    if kind == FeatureNoise.BERNOULLI:
        features[nodes] = rng.integers(0, 2, size=shape).astype(np.float64)
    else:
        features[nodes] = rng.standard_normal(shape)
    return dataset.with_features(features), nodes


def perturb_graph(dataset: Dataset, kind: Union[EdgeAttack, str], fraction: float,
                  rng: np.random.Generator) -> Dataset:
    """随机或 DICE 结构扰动，返回换了图的数据集"""
    kind = EdgeAttack(kind)
    if kind == EdgeAttack.DICE:
        graph = perturb_edges_dice(dataset.graph, fraction, dataset.labels, rng)
    else:
        graph = perturb_edges_random(dataset.graph, fraction, rng)
    return dataset.with_graph(graph)


def left_out_class_setup(dataset: Dataset, split: SplitSpec, left_out: Sequence[int]) -> LeftOutSetup:
    """
    从训练/验证集中移除 left_out 类别的节点，但保留在图中

    剩余类别重新编号为 0..C'-1；OOD 节点在视图中使用占位标签 0，
    并全部移入测试掩码，从不参与训练或验证。

    Args:
        dataset: 原数据集
        split: 原划分
        left_out: 被留出的类别

    Returns:
        LeftOutSetup
    """
    removed = sorted(set(int(c) for c in left_out))
    if not removed:
        return LeftOutSetup(dataset, split, np.zeros(0, dtype=np.int64),
                            {c: c for c in range(dataset.num_classes)}, dataset.labels)
    if removed[0] < 0 or removed[-1] >= dataset.num_classes:
        raise InputError(f"留出类别 {removed} 超出范围 [0, {dataset.num_classes})")
    kept = [c for c in range(dataset.num_classes) if c not in removed]
    if not kept:
        raise InputError("不能留出全部类别")

    class_map = {old: new for new, old in enumerate(kept)}
    is_ood = np.isin(dataset.labels, removed)
    lookup = np.zeros(dataset.num_classes, dtype=np.int64)
    for old, new in class_map.items():
        lookup[old] = new
    labels = np.where(is_ood, 0, lookup[dataset.labels])

    view = Dataset(dataset.graph, dataset.features, labels, len(kept), f"{dataset.name}-loc")
    view_split = SplitSpec(split.train & ~is_ood, split.val & ~is_ood, split.test | is_ood, split.seed)
    ood_nodes = np.flatnonzero(is_ood)
    logger.info(f"Left-Out 类别 {removed}: {len(kept)} 个 ID 类，{ood_nodes.size} 个 OOD 节点")
    return LeftOutSetup(view, view_split, ood_nodes, class_map, dataset.labels)
