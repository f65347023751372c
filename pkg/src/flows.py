"""
归一化流模块
按类别的径向归一化流，给出 log p(z | c; φ)
"""
import logging
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from diffcore import (
    Tensor,
    exp,
    log,
    reshape,
    row_gather,
    row_norm,
    softplus,
    stack_columns,
    tensor_sum,
)
from errors import ParameterError, ShapeError

# 配置日志
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

_LOG_2PI = np.log(2.0 * np.pi)


def inverse_softplus(y: float) -> float:
    """softplus 的反函数 log(exp(y) - 1)"""
    return float(np.log(np.expm1(y)))


class RadialLayer:
    """
    径向流层 u = z + β̂ h(α, r) (z - z0)

    α = exp(log_alpha) > 0，β̂ = -α + softplus(beta_raw) > -α，保证可逆。
    """

    def __init__(self, latent_dim: int, rng: Union[np.random.Generator, int, None] = None):
        if latent_dim < 1:
            raise ParameterError(f"隐空间维度必须 >= 1，当前 {latent_dim}")
        rng = np.random.default_rng(rng)
        self.latent_dim = latent_dim
        self.z0 = Tensor(rng.normal(0.0, np.sqrt(0.1), size=latent_dim), requires_grad=True, name="z0")
        self.log_alpha = Tensor(np.zeros(1), requires_grad=True, name="log_alpha")
        # β̂ 初始为 0：近似恒等映射
        self.beta_raw = Tensor(np.full(1, inverse_softplus(1.0)), requires_grad=True, name="beta_raw")

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha.data[0]))

    @property
    def beta_hat(self) -> float:
        return float(np.logaddexp(0.0, self.beta_raw.data[0]) - self.alpha)

    def transform(self, z: Union[Tensor, np.ndarray]) -> Tuple[Tensor, Tensor]:
        """
        前向变换及 log|det J|

        Args:
            z: [n×L] 或 [L]

        Returns:
            (u, log_det)，形状分别为 z 的形状与 [n]（单点输入时为标量）
        """
        z = z if isinstance(z, Tensor) else Tensor(z)
        single = z.ndim == 1
        Z = reshape(z, (1, z.shape[0])) if single else z
        if Z.ndim != 2 or Z.shape[1] != self.latent_dim:
            raise ShapeError(f"径向流期望 [n×{self.latent_dim}]，实际 {z.shape}")
        n = Z.shape[0]

        alpha = exp(self.log_alpha)
        beta_hat = softplus(self.beta_raw) - alpha
        diff = Z - self.z0
        r = row_norm(diff)
        h = 1.0 / (alpha + r)
        bh = beta_hat * h
        U = Z + reshape(bh, (n, 1)) * diff
        h_prime = -(h * h)
        log_det = (self.latent_dim - 1) * log(1.0 + bh) + log(1.0 + bh + beta_hat * h_prime * r)

        if single:
            return reshape(U, (self.latent_dim,)), reshape(log_det, ())
        return U, log_det

    def parameters(self) -> List[Tensor]:
        return [self.z0, self.log_alpha, self.beta_raw]


class FlowStack:
    """径向流层的组合，基分布为 R^L 上的标准正态"""

    def __init__(self, latent_dim: int, n_radial: int, rng: Union[np.random.Generator, int, None] = None):
        if n_radial < 0:
            raise ParameterError(f"流层数不能为负，当前 {n_radial}")
        rng = np.random.default_rng(rng)
        self.latent_dim = latent_dim
        self.layers = [RadialLayer(latent_dim, rng) for _ in range(n_radial)]

    def base_log_prob(self, U: Tensor) -> Tensor:
        return -0.5 * self.latent_dim * _LOG_2PI - 0.5 * tensor_sum(U * U, axis=1)

    def log_density(self, z: Union[Tensor, np.ndarray]) -> Tensor:
        """
        log N(T(z); 0, I) + Σ log|det J|，T 依次作用各层，把隐空间点推向基分布

        Args:
            z: [n×L] 或 [L]

        Returns:
            [n] 对数密度（单点输入时为标量）
        """
        z = z if isinstance(z, Tensor) else Tensor(z)
        single = z.ndim == 1
        U = reshape(z, (1, z.shape[0])) if single else z
        if U.ndim != 2 or U.shape[1] != self.latent_dim:
            raise ShapeError(f"流期望 [n×{self.latent_dim}]，实际 {z.shape}")
        total = None
        for layer in self.layers:
            U, log_det = layer.transform(U)
            total = log_det if total is None else total + log_det
        result = self.base_log_prob(U)
        if total is not None:
            result = result + total
        return reshape(result, ()) if single else result

    def parameters(self) -> List[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]


class ClassConditionalDensity:
    """每个类别一个流，类先验 p(c) = 1/C"""

    def __init__(self, num_classes: int, latent_dim: int, n_radial: int,
                 rng: Union[np.random.Generator, int, None] = None):
        if num_classes < 1:
            raise ParameterError(f"类别数必须 >= 1，当前 {num_classes}")
        rng = np.random.default_rng(rng)
        self.num_classes = num_classes
        self.latent_dim = latent_dim
        self.stacks = [FlowStack(latent_dim, n_radial, rng) for _ in range(num_classes)]

    @property
    def log_class_prior(self) -> float:
        return -float(np.log(self.num_classes))

    def class_log_densities(self, Z: Union[Tensor, np.ndarray]) -> Tensor:
        """[n×C] 矩阵，(v, c) 元素为 log p(z_v | c; φ)"""
        Z = Z if isinstance(Z, Tensor) else Tensor(Z)
        if Z.ndim != 2 or Z.shape[1] != self.latent_dim:
            raise ShapeError(f"期望隐表示 [n×{self.latent_dim}]，实际 {Z.shape}")
        return stack_columns([stack.log_density(Z) for stack in self.stacks])

    def warmup_loss(self, Z: Union[Tensor, np.ndarray], labels: np.ndarray, train_mask: np.ndarray) -> Tensor:
        """
        预热损失 -Σ_{v∈train} log p(z_v | y_v; φ)

        隐表示被视为常量，只对流参数求导。
        """
        Z = Z.detach() if isinstance(Z, Tensor) else Tensor(Z)
        labels = np.asarray(labels)
        index = np.flatnonzero(np.asarray(train_mask, dtype=bool))
        if index.size == 0:
            raise ParameterError("预热损失需要至少一个训练节点")
        total: Optional[Tensor] = None
        for c, stack in enumerate(self.stacks):
            rows = index[labels[index] == c]
            if rows.size == 0:
                continue
            part = tensor_sum(stack.log_density(row_gather(Z, rows)))
            total = part if total is None else total + part
        return -total

    def parameters(self) -> List[Tensor]:
        return [p for stack in self.stacks for p in stack.parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {}
        for c, stack in enumerate(self.stacks):
            for l, layer in enumerate(stack.layers):
                for p in layer.parameters():
                    state[f"flows.{c}.{l}.{p.name}"] = p.data.copy()
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for c, stack in enumerate(self.stacks):
            for l, layer in enumerate(stack.layers):
                for p in layer.parameters():
                    key = f"flows.{c}.{l}.{p.name}"
                    value = np.asarray(state[key], dtype=np.float64)
                    if value.shape != p.shape:
                        raise ShapeError(f"{key}: 期望形状 {p.shape}，实际 {value.shape}")
                    p.data = value.copy()
