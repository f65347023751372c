"""
训练模块
闭式贝叶斯损失、Adam 优化器、流预热、早停训练循环与模型检查点
"""
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, Field, field_validator

from datasets import Dataset, SplitSpec
from diffcore import (
    Tape,
    Tensor,
    digamma,
    lgamma,
    no_grad,
    reshape,
    row_gather,
    take_per_row,
    tensor_mean,
    tensor_sum,
    zero_grad,
)
from errors import CheckpointError, DomainError, NumericError, ParameterError, ShapeError, TrainingError
from graphcore import NormalizationMode, PropagationOperator, SparseGraph, build_operator
from posterior import DirichletPosterior, GpnConfig, GraphPosteriorNetwork, predict

# 配置日志
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "gpn-checkpoint"
CHECKPOINT_VERSION = 1


class LossConfig(BaseModel):
    """贝叶斯损失配置"""
    entropy_weight: float = Field(1e-3, ge=0.0, description="Dirichlet 熵正则系数 λ")

    @field_validator("entropy_weight")
    @classmethod
    def _finite(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("entropy_weight 必须是有限数")
        return value

    @classmethod
    def from_settings(cls, settings) -> "LossConfig":
        return cls(entropy_weight=settings.entropy_weight)


class TrainSchedule(BaseModel):
    """训练日程：预热、最大轮数、早停耐心与优化器参数"""
    lr: float = Field(0.01, gt=0.0, description="Adam 学习率")
    weight_decay: float = Field(1e-3, ge=0.0, description="编码器 L2 权重衰减系数")
    warmup_epochs: int = Field(5, ge=0, description="只训练流参数的预热轮数")
    max_epochs: int = Field(10000, ge=1, description="联合训练最大轮数")
    patience: int = Field(50, ge=1, description="验证损失无改进时允许的评估次数")
    eval_every: int = Field(1, ge=1, description="每隔多少轮评估一次验证损失")
    seed: int = Field(42, description="dropout 随机种子")

    @classmethod
    def from_settings(cls, settings) -> "TrainSchedule":
        return cls(**{name: getattr(settings, name) for name in cls.model_fields})


# ---------------------------------------------------------------------------
# 闭式损失项
# ---------------------------------------------------------------------------

def _as_rows(alpha: Union[Tensor, np.ndarray, Sequence[float]]):
    alpha = alpha if isinstance(alpha, Tensor) else Tensor(np.asarray(alpha, dtype=np.float64))
    if alpha.ndim == 1:
        return reshape(alpha, (1, alpha.shape[0])), True
    if alpha.ndim != 2:
        raise ShapeError(f"期望 Dirichlet 参数为 [C] 或 [n×C]，实际 {alpha.shape}")
    return alpha, False


def _check_positive(alpha: Tensor) -> None:
    if not np.all(alpha.data > 0):
        raise DomainError("Dirichlet 参数必须全部为正")


def expected_log_likelihood(alpha: Union[Tensor, np.ndarray, Sequence[float]],
                            labels: Union[int, np.ndarray]) -> Tensor:
    """
    E_{p~Dir(α)}[log p_y] = ψ(α_y) - ψ(α0)

    Args:
        alpha: [C] 或 [n×C] Dirichlet 参数
        labels: 类别（单个或每行一个）

    Returns:
        标量或 [n] 张量
    """
    rows, single = _as_rows(alpha)
    _check_positive(rows)
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    alpha0 = tensor_sum(rows, axis=1)
    result = digamma(take_per_row(rows, y)) - digamma(alpha0)
    return reshape(result, ()) if single else result


def dirichlet_entropy(alpha: Union[Tensor, np.ndarray, Sequence[float]]) -> Tensor:
    """
    Dirichlet 微分熵 log B(α) + (α0 - C)ψ(α0) - Σ_c (α_c - 1)ψ(α_c)

    Args:
        alpha: [C] 或 [n×C] Dirichlet 参数

    Returns:
        标量或 [n] 张量
    """
    rows, single = _as_rows(alpha)
    _check_positive(rows)
    num_classes = rows.shape[1]
    alpha0 = tensor_sum(rows, axis=1)
    log_beta_fn = tensor_sum(lgamma(rows), axis=1) - lgamma(alpha0)
    result = (log_beta_fn + (alpha0 - num_classes) * digamma(alpha0)
              - tensor_sum((rows - 1.0) * digamma(rows), axis=1))
    return reshape(result, ()) if single else result


def bayesian_loss(post: DirichletPosterior, labels: np.ndarray, mask: np.ndarray,
                  cfg: Optional[LossConfig] = None) -> Tensor:
    """
    贝叶斯损失：被掩码节点上 -E[log p_y] - λ·H[Dir(α)] 的平均

    Args:
        post: Dirichlet 后验
        labels: 每个节点的类别
        mask: 参与损失的节点布尔掩码
        cfg: 损失配置

    Returns:
        标量损失张量
    """
    cfg = cfg or LossConfig()
    index = np.flatnonzero(np.asarray(mask, dtype=bool))
    if index.size == 0:
        raise ParameterError("损失掩码为空")
    alpha = row_gather(post.alpha, index)
    per_node = -expected_log_likelihood(alpha, np.asarray(labels)[index])
    if cfg.entropy_weight > 0:
        per_node = per_node - cfg.entropy_weight * dirichlet_entropy(alpha)
    return tensor_mean(per_node)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class ParamGroup:
    """共享权重衰减系数的一组参数"""
    name: str
    params: List[Tensor]
    weight_decay: float = 0.0


class AdamState:
    """带偏差修正的 Adam；权重衰减以 λ·θ 加到梯度上"""

    def __init__(self, groups: Sequence[ParamGroup], lr: float = 0.01,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ParameterError(f"学习率必须为正，当前 {lr}")
        self.groups = list(groups)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.first_moment: Dict[int, np.ndarray] = {}
        self.second_moment: Dict[int, np.ndarray] = {}
        for group in self.groups:
            for p in group.params:
                self.first_moment[id(p)] = np.zeros_like(p.data)
                self.second_moment[id(p)] = np.zeros_like(p.data)

    @classmethod
    def for_model(cls, model: GraphPosteriorNetwork, schedule: TrainSchedule) -> "AdamState":
        """编码器参数做权重衰减，流参数从不衰减"""
        return cls([
            ParamGroup("encoder", model.encoder_parameters(), schedule.weight_decay),
            ParamGroup("flows", model.flow_parameters(), 0.0),
        ], lr=schedule.lr)

    def parameters(self) -> List[Tensor]:
        return [p for group in self.groups for p in group.params]

    def decayed_parameters(self) -> List[Tensor]:
        return [p for group in self.groups if group.weight_decay > 0 for p in group.params]

    def zero_grad(self) -> None:
        zero_grad(self.parameters())

    def step(self) -> None:
        """执行一步更新；未参与计算的参数梯度视为 0"""
        for group in self.groups:
            for p in group.params:
                if p.grad is not None and not np.all(np.isfinite(p.grad)):
                    raise NumericError(f"参数 {p.name or '?'} 的梯度出现非有限值")

        self.step_count += 1
        t = self.step_count
        correction1 = 1.0 - self.beta1 ** t
        correction2 = 1.0 - self.beta2 ** t
        for group in self.groups:
            for p in group.params:
                grad = np.zeros_like(p.data) if p.grad is None else p.grad
                if group.weight_decay > 0:
                    grad = grad + group.weight_decay * p.data
                m = self.first_moment[id(p)]
                v = self.second_moment[id(p)]
                m *= self.beta1
                m += (1.0 - self.beta1) * grad
                v *= self.beta2
                v += (1.0 - self.beta2) * grad * grad
                m_hat = m / correction1
                v_hat = v / correction2
                p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_step(state: AdamState) -> None:
    """用参数上已累积的梯度执行一步 Adam"""
    state.step()


# ---------------------------------------------------------------------------
# 训练循环
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    """单轮训练记录；预热轮没有验证损失"""
    epoch: int
    phase: str
    train_loss: float
    val_loss: Optional[float] = None


@dataclass
class TrainResult:
    """训练结果：恢复到最佳验证损失的模型与逐轮历史"""
    model: GraphPosteriorNetwork
    history: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0
    best_val_loss: float = float("inf")


def _warmup(model: GraphPosteriorNetwork, dataset: Dataset, split: SplitSpec,
            schedule: TrainSchedule, history: List[EpochRecord]) -> None:
    flow_params = model.flow_parameters()
    if schedule.warmup_epochs == 0 or not flow_params:
        return
    optimizer = AdamState([ParamGroup("flows", flow_params, 0.0)], lr=schedule.lr)
    # 编码器在预热阶段冻结
    with no_grad():
        latent = model.encoder(dataset.features, training=False)
    count = int(np.count_nonzero(split.train))
    logger.info(f"预热阶段开始: {schedule.warmup_epochs} 轮，只优化流参数")
    for epoch in range(1, schedule.warmup_epochs + 1):
        try:
            with Tape() as tape:
                loss = model.flows.warmup_loss(latent, dataset.labels, split.train) * (1.0 / count)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingError("预热损失出现非有限值", epoch)
                optimizer.zero_grad()
                tape.backward(loss)
            optimizer.step()
        except NumericError as exc:
            raise TrainingError(str(exc), epoch) from exc
        history.append(EpochRecord(epoch, "warmup", value))
        logger.debug(f"预热第 {epoch} 轮: loss={value:.6f}")


def validation_loss(model: GraphPosteriorNetwork, dataset: Dataset, mask: np.ndarray,
                    loss_cfg: LossConfig) -> float:
    """推理模式下掩码节点上的贝叶斯损失"""
    with no_grad():
        output = model(dataset.features, training=False)
        return bayesian_loss(output.posterior, dataset.labels, mask, loss_cfg).item()


def fit(model: GraphPosteriorNetwork, dataset: Dataset, split: SplitSpec,
        schedule: Optional[TrainSchedule] = None, loss_cfg: Optional[LossConfig] = None) -> TrainResult:
    """
    两阶段训练：流预热 + 全批量联合训练，按验证贝叶斯损失早停

    Args:
        model: 待训练模型（原地更新，结束时恢复最佳参数）
        dataset: 数据集
        split: 训练/验证/测试划分
        schedule: 训练日程
        loss_cfg: 损失配置

    Returns:
        TrainResult
    """
    schedule = schedule or TrainSchedule()
    loss_cfg = loss_cfg or LossConfig()
    if not np.any(split.train):
        raise TrainingError("训练集为空", 0)
    monitor_mask = split.val
    if not np.any(monitor_mask):
        logger.warning("验证集为空，改用训练损失做早停")
        monitor_mask = split.train

    rng = np.random.default_rng(schedule.seed)
    history: List[EpochRecord] = []
    _warmup(model, dataset, split, schedule, history)

    optimizer = AdamState.for_model(model, schedule)
    best_val = float("inf")
    best_state = model.state_dict()
    best_epoch = 0
    stale = 0
    epoch = 0
    logger.info(f"联合训练开始: 最多 {schedule.max_epochs} 轮，patience={schedule.patience}")
    for epoch in range(1, schedule.max_epochs + 1):
        try:
            with Tape() as tape:
                output = model(dataset.features, training=True, rng=rng)
                loss = bayesian_loss(output.posterior, dataset.labels, split.train, loss_cfg)
                train_value = loss.item()
                if not math.isfinite(train_value):
                    raise TrainingError("训练损失出现非有限值", epoch)
                optimizer.zero_grad()
                tape.backward(loss)
            optimizer.step()
        except NumericError as exc:
            raise TrainingError(str(exc), epoch) from exc

        if epoch % schedule.eval_every != 0 and epoch != schedule.max_epochs:
            history.append(EpochRecord(epoch, "train", train_value))
            continue
        try:
            val_value = validation_loss(model, dataset, monitor_mask, loss_cfg)
        except NumericError as exc:
            raise TrainingError(str(exc), epoch) from exc
        if not math.isfinite(val_value):
            raise TrainingError("验证损失出现非有限值", epoch)
        history.append(EpochRecord(epoch, "train", train_value, val_value))
        logger.debug(f"第 {epoch} 轮: train={train_value:.6f}, val={val_value:.6f}")

        if val_value < best_val:
            best_val = val_value
            best_state = model.state_dict()
            best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= schedule.patience:
                logger.info(f"早停: 第 {epoch} 轮，最佳为第 {best_epoch} 轮 (val={best_val:.6f})")
                break

    model.load_state_dict(best_state)
    return TrainResult(model, history, best_epoch, epoch, best_val)


def train_accuracy(model: GraphPosteriorNetwork, dataset: Dataset, mask: np.ndarray) -> float:
    """掩码节点上的预测准确率（推理模式）"""
    with no_grad():
        preds = predict(model(dataset.features, training=False).posterior)
    mask = np.asarray(mask, dtype=bool)
    return float(np.mean(preds[mask] == dataset.labels[mask])) if mask.any() else 0.0


# ---------------------------------------------------------------------------
# 检查点
# ---------------------------------------------------------------------------

def save_checkpoint(model: GraphPosteriorNetwork, path: Union[str, Path],
                    meta: Optional[Dict[str, Any]] = None) -> Path:
    """
    保存检查点：u64 头长度 + JSON 头 + 按声明顺序的 (u64 元素数, f64 小端数据) 块

    Args:
        model: 模型
        path: 输出文件
        meta: 附加信息（写入 JSON 头）

    Returns:
        写入的路径
    """
    path = Path(path)
    state = model.state_dict()
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.model_dump(mode="json"),
        "input_dim": model.input_dim,
        "num_classes": model.num_classes,
        "seed": model.seed,
        "parameters": [{"name": name, "shape": list(value.shape)} for name, value in state.items()],
        "meta": meta or {},
    }
    header_bytes = json.dumps(header, ensure_ascii=False).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(np.array([len(header_bytes)], dtype="<u8").tobytes())
        f.write(header_bytes)
        for value in state.values():
            flat = np.ascontiguousarray(value, dtype="<f8").reshape(-1)
            f.write(np.array([flat.size], dtype="<u8").tobytes())
            f.write(flat.tobytes())
    logger.info(f"检查点已写入: {path}")
    return path


def _read_u64(buffer: bytes, offset: int, what: str) -> int:
    if offset + 8 > len(buffer):
        raise CheckpointError(f"检查点在读取 {what} 时被截断")
    return int(np.frombuffer(buffer, dtype="<u8", count=1, offset=offset)[0])


def _operator_for(config: GpnConfig, graph: Union[SparseGraph, PropagationOperator]) -> PropagationOperator:
    """按检查点中的传播超参数建立算子；传入现成算子时要求超参数一致"""
    if isinstance(graph, SparseGraph):
        return build_operator(graph, config.teleport, config.iterations, config.propagation_mode)
    stored = (config.teleport, config.iterations, NormalizationMode(config.propagation_mode))
    given = (graph.teleport, graph.iterations, NormalizationMode(graph.mode))
    if stored != given:
        raise CheckpointError(
            f"传播算子与检查点不一致: 检查点 τ={stored[0]}, K={stored[1]}, {stored[2].value}；"
            f"传入 τ={given[0]}, K={given[1]}, {given[2].value}"
        )
    return graph


def load_checkpoint(path: Union[str, Path],
                    graph: Union[SparseGraph, PropagationOperator]) -> GraphPosteriorNetwork:
    """
    读取检查点并重建模型

    传播算子的 τ、K 与归一化方式取自检查点头中的配置。

    Args:
        path: 检查点文件
        graph: 评估所用的图；也可传入现成算子，其超参数须与检查点一致

    Returns:
        参数已恢复的模型
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"检查点文件不存在: {path}")
    buffer = path.read_bytes()
    header_len = _read_u64(buffer, 0, "头长度")
    if 8 + header_len > len(buffer):
        raise CheckpointError("检查点头被截断")
    try:
        header = json.loads(buffer[8:8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"检查点头不是合法 JSON: {exc}") from exc
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError("不是图后验网络检查点")

    try:
        config = GpnConfig(**header["config"])
        operator = _operator_for(config, graph)
        model = GraphPosteriorNetwork(config, int(header["input_dim"]), int(header["num_classes"]),
                                      operator, int(header.get("seed", 0)))
        declared = header["parameters"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"检查点头字段非法: {exc}") from exc

    expected = model.state_dict()
    if [entry["name"] for entry in declared] != list(expected):
        raise CheckpointError("检查点参数列表与模型结构不一致")

    offset = 8 + header_len
    state: Dict[str, np.ndarray] = {}
    for entry in declared:
        name, shape = entry["name"], tuple(entry["shape"])
        count = _read_u64(buffer, offset, name)
        offset += 8
        if count != int(np.prod(shape, dtype=np.int64)) or shape != expected[name].shape:
            raise CheckpointError(f"参数 {name} 的形状与模型不一致")
        if offset + 8 * count > len(buffer):
            raise CheckpointError(f"检查点在读取 {name} 时被截断")
        state[name] = np.frombuffer(buffer, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * count
    if offset != len(buffer):
        raise CheckpointError("检查点末尾存在多余数据")
    model.load_state_dict(state)
    logger.info(f"检查点已加载: {path}")
    return model
