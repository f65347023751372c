"""
特征编码器模块
MLP 编码器：节点属性 -> 低维隐表示
"""
import logging
from typing import Dict, List, Optional, Union

import numpy as np

from diffcore import Tensor, add_bias, dropout, matmul, relu
from errors import ParameterError, ShapeError

# 配置日志
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


class MlpEncoder:
    """多层感知机编码器 f_φ"""

    def __init__(self, input_dim: int, hidden_dim: int, latent_dim: int, num_layers: int,
                 dropout_p: float, rng: Union[np.random.Generator, int, None] = None,
                 use_bias: bool = True):
        """
        初始化编码器（Glorot 均匀初始化权重，偏置置零）

        Args:
            input_dim: 输入特征维度 D
            hidden_dim: 隐藏层宽度
            latent_dim: 隐空间维度 L
            num_layers: 线性层数；为 1 时直接 D -> L
            dropout_p: 隐藏层 dropout 概率
            rng: 随机数生成器或种子
            use_bias: False 时偏置固定为 0 且不参与训练
        """
        if min(input_dim, hidden_dim, latent_dim) < 1 or num_layers < 1:
            raise ParameterError(
                f"编码器维度非法: input={input_dim}, hidden={hidden_dim}, "
                f"latent={latent_dim}, layers={num_layers}"
            )
        if not 0.0 <= dropout_p < 1.0:
            raise ParameterError(f"dropout 概率必须满足 0 <= p < 1，当前 {dropout_p}")
        rng = np.random.default_rng(rng)

        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.latent_dim = latent_dim
        self.num_layers = num_layers
        self.dropout_p = dropout_p
        self.use_bias = use_bias

        dims = [input_dim] + [hidden_dim] * (num_layers - 1) + [latent_dim]
        self.weights: List[Tensor] = []
        self.biases: List[Tensor] = []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)),
                                       requires_grad=True, name=f"encoder.w{i}"))
            self.biases.append(Tensor(np.zeros(fan_out), requires_grad=use_bias, name=f"encoder.b{i}"))

    def forward(self, X: Union[Tensor, np.ndarray], training: bool = False,
                rng: Optional[np.random.Generator] = None) -> Tensor:
        """
        前向计算：隐藏层为 linear -> ReLU -> dropout，最后一层仅线性

        Args:
            X: [n×D] 特征
            training: 是否启用 dropout
            rng: dropout 所需随机数生成器

        Returns:
            [n×L] 隐表示
        """
        h = X if isinstance(X, Tensor) else Tensor(X)
        if h.ndim != 2 or h.shape[1] != self.input_dim:
            raise ShapeError(f"编码器期望输入 [n×{self.input_dim}]，实际 {h.shape}")
        last = self.num_layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = add_bias(matmul(h, w), b)
            if i < last:
                h = dropout(relu(h), self.dropout_p, training, rng)
        return h

    __call__ = forward

    def parameters(self) -> List[Tensor]:
        params = list(self.weights)
        if self.use_bias:
            params.extend(self.biases)
        return params

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            state[f"encoder.w{i}"] = w.data.copy()
            state[f"encoder.b{i}"] = b.data.copy()
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            for tensor, key in ((w, f"encoder.w{i}"), (b, f"encoder.b{i}")):
                value = np.asarray(state[key], dtype=np.float64)
                if value.shape != tensor.shape:
                    raise ShapeError(f"{key}: 期望形状 {tensor.shape}，实际 {value.shape}")
                tensor.data = value.copy()
