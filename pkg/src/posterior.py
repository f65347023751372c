"""
后验组装模块
确定性预算证据、PPR 伪计数聚合、Dirichlet 后验、预测与不确定性分数，
以及完整的图后验网络模型
"""
import copy
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Union

import numpy as np
from pydantic import BaseModel, Field
from scipy.special import entr

from diffcore import Tensor, exp, logsumexp, no_grad, tensor_sum
from encoder import MlpEncoder
from errors import InputError, NumericError, ParameterError, ShapeError
from flows import ClassConditionalDensity
from graphcore import NormalizationMode, PropagationOperator, SparseGraph, build_operator, propagate

# 配置日志
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

_LOG_4PI = np.log(4.0 * np.pi)


class BudgetScaling(str, Enum):
    """确定性预算的缩放方式"""
    LATENT = "latent"               # N = sqrt(4π)^L
    LATENT_CLASS = "latent_class"   # N = sqrt(4π)^L · C


class DiffusionMode(str, Enum):
    """伪计数的扩散方式"""
    EVIDENCE = "evidence"           # 扩散 β^ft
    LOG_EVIDENCE = "log_evidence"   # 扩散 log β^ft 后取指数
    NONE = "none"                   # 训练与推理都不扩散
    TEST_ONLY = "test_only"         # 只在推理时扩散


@dataclass(frozen=True)
class CertaintyBudget:
    """确定性预算 N，全部在对数域计算"""
    latent_dim: int
    num_classes: int = 1
    scaling: BudgetScaling = BudgetScaling.LATENT

    @property
    def log_value(self) -> float:
        value = 0.5 * self.latent_dim * _LOG_4PI
        if BudgetScaling(self.scaling) == BudgetScaling.LATENT_CLASS:
            value += np.log(self.num_classes)
        return float(value)

    @property
    def value(self) -> float:
        return float(np.exp(self.log_value))


@dataclass
class EvidenceSet:
    """特征级与聚合后的伪计数及其总和"""
    beta_ft: Tensor
    beta_agg: Tensor
    alpha0_ft: Tensor
    alpha0_agg: Tensor

    @classmethod
    def from_betas(cls, beta_ft: Tensor, beta_agg: Tensor) -> "EvidenceSet":
        return cls(beta_ft, beta_agg, tensor_sum(beta_ft, axis=1), tensor_sum(beta_agg, axis=1))


@dataclass
class DirichletPosterior:
    """逐节点 Dirichlet 后验 α = prior + β^agg"""
    alpha: Tensor
    prior_value: float = 1.0

    @property
    def num_classes(self) -> int:
        return self.alpha.shape[1]

    @property
    def alpha0(self) -> np.ndarray:
        return self.alpha.data.sum(axis=1)

    def mean(self) -> np.ndarray:
        """后验均值 p̄ = α / α0"""
        return self.alpha.data / self.alpha0[:, None]


@dataclass
class UncertaintyScores:
    """各节点的不确定性分数，数值越大越不确定"""
    alea_net: np.ndarray
    alea_ft: np.ndarray
    epist_net: np.ndarray
    epist_ft: np.ndarray
    entropy_net: np.ndarray
    entropy_ft: np.ndarray
    vacuity_net: np.ndarray
    vacuity_ft: np.ndarray

    # 与实验记录中的列名一致
    PRIMARY = ("alea_net", "alea_ft", "epist_net", "epist_ft")

    def as_dict(self) -> Dict[str, np.ndarray]:
        return {
            "alea_net": self.alea_net,
            "alea_ft": self.alea_ft,
            "epist_net": self.epist_net,
            "epist_ft": self.epist_ft,
            "entropy_net": self.entropy_net,
            "entropy_ft": self.entropy_ft,
            "vacuity_net": self.vacuity_net,
            "vacuity_ft": self.vacuity_ft,
        }


def log_feature_evidence(log_dens: Tensor, budget: CertaintyBudget) -> Tensor:
    """log β^ft = log N + log p(z|c) + log(1/C)"""
    if log_dens.ndim != 2:
        raise ShapeError(f"期望对数密度 [n×C]，实际 {log_dens.shape}")
    values = log_dens.data
    # -inf 是密度为 0 的合法极限
    if np.any(np.isnan(values)) or np.any(values == np.inf):
        raise NumericError("对数密度中出现 NaN 或 +inf")
    num_classes = log_dens.shape[1]
    return log_dens + (budget.log_value - np.log(num_classes))


def feature_evidence(log_dens: Tensor, budget: CertaintyBudget) -> Tensor:
    """
    特征级伪计数 β_c^ft = N · p(z|c; φ) · p(c)

    Args:
        log_dens: [n×C] 类条件对数密度
        budget: 确定性预算

    Returns:
        [n×C] 非负伪计数（对数域计算后再取指数）
    """
    return exp(log_feature_evidence(log_dens, budget))


def aggregate_evidence(beta_ft: Tensor, op: PropagationOperator) -> Tensor:
    """β^agg = PPR 扩散后的 β^ft"""
    if beta_ft.ndim != 2 or beta_ft.shape[0] != op.num_nodes:
        raise ShapeError(f"伪计数形状 {beta_ft.shape} 与节点数 {op.num_nodes} 不匹配")
    return propagate(op, beta_ft)


def posterior(beta_agg: Tensor, prior_value: float = 1.0) -> DirichletPosterior:
    """α^post = α^prior + β^agg"""
    if prior_value <= 0:
        raise ParameterError(f"先验值必须为正，当前 {prior_value}")
    beta_agg = beta_agg if isinstance(beta_agg, Tensor) else Tensor(beta_agg)
    if np.any(beta_agg.data < 0):
        raise InputError("伪计数不能为负")
    return DirichletPosterior(beta_agg + prior_value, prior_value)


def predict(post: DirichletPosterior) -> np.ndarray:
    """argmax_c α，平局取最小类别编号"""
    return np.argmax(post.alpha.data, axis=1)


def categorical_mean(beta: np.ndarray) -> np.ndarray:
    """β / Σβ；全零行取均匀分布"""
    beta = np.asarray(beta, dtype=np.float64)
    totals = beta.sum(axis=1, keepdims=True)
    zero = totals[:, 0] <= 0
    if np.any(zero):
        logger.warning(f"{int(zero.sum())} 个节点的特征证据为 0，p̄^ft 取均匀分布")
    safe = np.where(totals > 0, totals, 1.0)
    mean = beta / safe
    mean[zero] = 1.0 / beta.shape[1]
    return mean


def entropy_cat(p: Union[np.ndarray, List[float]]) -> Union[float, np.ndarray]:
    """
    类别分布熵 -Σ p log p（0·log0 = 0）

    Args:
        p: 概率向量或按行的概率矩阵

    Returns:
        标量或逐行熵
    """
    arr = np.asarray(p, dtype=np.float64)
    if np.any(arr < -1e-12) or np.any(np.abs(arr.sum(axis=-1) - 1.0) > 1e-9):
        raise InputError("输入不是单纯形上的概率向量")
    result = entr(np.clip(arr, 0.0, None)).sum(axis=-1)
    return float(result) if arr.ndim == 1 else result


def uncertainty_scores(post: DirichletPosterior, evidence: EvidenceSet) -> UncertaintyScores:
    """
    偶然与认知不确定性分数（含/不含网络效应）

    alea = -max_c p̄_c，epist = -α0，另附熵与 vacuity C/α0 两种变体。
    """
    p_net = post.mean()
    p_ft = categorical_mean(evidence.beta_ft.data)
    alpha0_net = post.alpha0
    alpha0_ft = evidence.alpha0_ft.data
    num_classes = post.num_classes
    with np.errstate(divide="ignore"):
        vacuity_ft = num_classes / alpha0_ft
    return UncertaintyScores(
        alea_net=-p_net.max(axis=1),
        alea_ft=-p_ft.max(axis=1),
        epist_net=-alpha0_net,
        epist_ft=-alpha0_ft,
        entropy_net=entropy_cat(p_net) if p_net.shape[0] else np.zeros(0),
        entropy_ft=entropy_cat(p_ft) if p_ft.shape[0] else np.zeros(0),
        vacuity_net=num_classes / alpha0_net,
        vacuity_ft=vacuity_ft,
    )


# ---------------------------------------------------------------------------
# 完整模型
# ---------------------------------------------------------------------------

class GpnConfig(BaseModel):
    """图后验网络超参数"""
    hidden_dim: int = Field(64, ge=1, description="编码器隐藏层宽度")
    latent_dim: int = Field(16, ge=1, description="隐空间维度 L")
    num_layers: int = Field(2, ge=1, description="编码器线性层数")
    n_radial: int = Field(10, ge=0, description="每个类别的径向流层数")
    dropout: float = Field(0.5, ge=0.0, lt=1.0, description="编码器 dropout 概率")
    teleport: float = Field(0.1, gt=0.0, lt=1.0, description="PPR 传送概率 τ")
    iterations: int = Field(10, ge=0, description="PPR 幂迭代步数 K")
    propagation_mode: NormalizationMode = Field(NormalizationMode.SYMMETRIC, description="邻接归一化方式")
    budget_scaling: BudgetScaling = Field(BudgetScaling.LATENT, description="确定性预算缩放")
    prior_value: float = Field(1.0, gt=0.0, description="Dirichlet 先验参数")
    diffusion: DiffusionMode = Field(DiffusionMode.EVIDENCE, description="伪计数扩散方式")
    encoder_bias: bool = Field(True, description="编码器是否使用偏置")

    @classmethod
    def from_settings(cls, settings) -> "GpnConfig":
        return cls(**{name: getattr(settings, name) for name in cls.model_fields})


@dataclass
class GpnOutput:
    """一次前向计算的全部中间结果"""
    latent: Tensor
    log_beta_ft: Tensor
    evidence: EvidenceSet
    posterior: DirichletPosterior

    def predictions(self) -> np.ndarray:
        return predict(self.posterior)

    def scores(self) -> UncertaintyScores:
        return uncertainty_scores(self.posterior, self.evidence)


class GraphPosteriorNetwork:
    """图后验网络：编码器 + 类条件流 + 预算 + PPR 扩散 + Dirichlet 后验"""

    def __init__(self, config: GpnConfig, input_dim: int, num_classes: int,
                 operator: PropagationOperator, seed: int = 0):
        """
        初始化模型

        Args:
            config: 超参数
            input_dim: 特征维度
            num_classes: 类别数
            operator: 训练图上的传播算子
            seed: 参数初始化种子
        """
        rng = np.random.default_rng(seed)
        self.config = config
        self.input_dim = input_dim
        self.num_classes = num_classes
        self.seed = seed
        self.operator = operator
        self.encoder = MlpEncoder(input_dim, config.hidden_dim, config.latent_dim, config.num_layers,
                                  config.dropout, rng, use_bias=config.encoder_bias)
        self.flows = ClassConditionalDensity(num_classes, config.latent_dim, config.n_radial, rng)
        self.budget = CertaintyBudget(config.latent_dim, num_classes, config.budget_scaling)

    @classmethod
    def for_graph(cls, config: GpnConfig, input_dim: int, num_classes: int,
                  graph: SparseGraph, seed: int = 0) -> "GraphPosteriorNetwork":
        op = build_operator(graph, config.teleport, config.iterations, config.propagation_mode)
        return cls(config, input_dim, num_classes, op, seed)

    def with_operator(self, operator: PropagationOperator) -> "GraphPosteriorNetwork":
        """共享参数、换一张图的视图"""
        view = copy.copy(self)
        view.operator = operator
        return view

    def with_graph(self, graph: SparseGraph) -> "GraphPosteriorNetwork":
        return self.with_operator(self.operator.with_graph(graph))

    def _diffuses(self, training: bool) -> bool:
        mode = self.config.diffusion
        if mode == DiffusionMode.NONE:
            return False
        if mode == DiffusionMode.TEST_ONLY:
            return not training
        return True

    def forward(self, features: Union[Tensor, np.ndarray], training: bool = False,
                rng: Optional[np.random.Generator] = None) -> GpnOutput:
        """
        前向计算

        Args:
            features: [n×D] 节点特征
            training: 训练模式（启用 dropout，并决定 test_only 模式是否扩散）
            rng: dropout 随机数生成器

        Returns:
            GpnOutput
        """
        latent = self.encoder(features, training, rng)
        log_dens = self.flows.class_log_densities(latent)
        log_beta = log_feature_evidence(log_dens, self.budget)
        beta_ft = exp(log_beta)
        if not self._diffuses(training):
            beta_agg = beta_ft
        elif self.config.diffusion == DiffusionMode.LOG_EVIDENCE:
            beta_agg = exp(propagate(self.operator, log_beta))
        else:
            beta_agg = aggregate_evidence(beta_ft, self.operator)
        evidence = EvidenceSet.from_betas(beta_ft, beta_agg)
        return GpnOutput(latent, log_beta, evidence, posterior(beta_agg, self.config.prior_value))

    __call__ = forward

    def log_alpha0_ft(self, features: Union[Tensor, np.ndarray]) -> np.ndarray:
        """log α0^ft，在对数域求和避免下溢"""
        with no_grad():
            latent = self.encoder(features, training=False)
            log_beta = log_feature_evidence(self.flows.class_log_densities(latent), self.budget)
            return logsumexp(log_beta, axis=1).data

    def encoder_parameters(self) -> List[Tensor]:
        return self.encoder.parameters()

    def flow_parameters(self) -> List[Tensor]:
        return self.flows.parameters()

    def parameters(self) -> List[Tensor]:
        return self.encoder_parameters() + self.flow_parameters()

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = self.encoder.state_dict()
        state.update(self.flows.state_dict())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        self.encoder.load_state_dict(state)
        self.flows.load_state_dict(state)
