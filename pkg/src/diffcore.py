"""
可微张量核心模块
基于 numpy 的稠密张量运算与反向模式自动微分（计算带）
"""
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.special import expit, logsumexp as _logsumexp, softmax

import special
from errors import ParameterError, ShapeError

# 配置日志
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

_state = threading.local()

BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """参与可微计算的稠密 float64 张量"""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional["Tape"] = None
        self._index: Optional[int] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() 只适用于单元素张量，当前形状 {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """返回共享数值、脱离计算带的张量"""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # 运算符重载
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        return tensor_sum(self, axis)

    def mean(self, axis: Optional[int] = None) -> "Tensor":
        return tensor_mean(self, axis)

    def log(self) -> "Tensor":
        return log(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class _Record:
    """计算带上的一条运算记录"""
    op: str
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward: BackwardFn


class Tape:
    """
    计算带：按执行顺序记录可微运算

    一个计算带及其张量只归单个线程所有；不同线程各自持有独立的计算带。
    只有位于 with Tape() 之内的运算会被记录，之外的运算与 no_grad 中相同。
    """

    def __init__(self):
        self.records: List[_Record] = []

    def __len__(self) -> int:
        return len(self.records)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tape_stack().pop()

    def record(self, op: str, output: Tensor, inputs: Tuple[Tensor, ...], backward_fn: BackwardFn) -> None:
        output._tape = self
        output._index = len(self.records)
        self.records.append(_Record(op, output, inputs, backward_fn))

    def clear(self) -> None:
        self.records.clear()

    def backward(self, loss: Tensor) -> None:
        """沿计算带逆序回放，累加所有 requires_grad 张量的梯度"""
        if loss.size != 1:
            raise ShapeError(f"反向传播要求标量损失，当前形状 {loss.shape}")
        if loss._tape is not self:
            raise ParameterError("损失张量不在该计算带上")

        seed = np.ones_like(loss.data)
        pending = {id(loss): seed}
        _accumulate(loss, seed)
        for record in reversed(self.records[: loss._index + 1]):
            upstream = pending.pop(id(record.output), None)
            if upstream is None:
                continue
            input_grads = record.backward(upstream)
            for tensor, grad in zip(record.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                _accumulate(tensor, grad)
                if tensor._tape is self:
                    key = id(tensor)
                    pending[key] = pending[key] + grad if key in pending else grad


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    if tensor.grad is None:
        tensor.grad = np.array(grad, dtype=np.float64, copy=True)
    else:
        tensor.grad = tensor.grad + grad


def _tape_stack() -> List[Tape]:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = []
        _state.tapes = stack
    return stack


def current_tape() -> Optional[Tape]:
    """当前线程正在记录的计算带；不在任何 with Tape() 中时为 None"""
    stack = _tape_stack()
    return stack[-1] if stack else None


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """在此上下文中不记录任何运算"""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def backward(loss: Tensor) -> None:
    """
    对标量损失做反向传播

    Args:
        loss: 记录在计算带上的标量张量；重复调用会累加梯度，需手动 zero_grad
    """
    if loss.size != 1:
        raise ShapeError(f"反向传播要求标量损失，当前形状 {loss.shape}")
    if loss._tape is None:
        if not loss.requires_grad:
            raise ParameterError("损失张量不在计算带上")
        _accumulate(loss, np.ones_like(loss.data))
        return
    loss._tape.backward(loss)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    out = Tensor(data)
    tape = current_tape() if is_grad_enabled() else None
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, out, tuple(inputs), backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """把广播后的梯度求和还原到原始形状"""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: 形状 {a.shape} 与 {b.shape} 不兼容") from exc


# ---------------------------------------------------------------------------
# 逐元素二元运算
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), _backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), _backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")

    def _backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", a.data * b.data, (a, b), _backward)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def _backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make("div", out, (a, b), _backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    p = float(exponent)

    def _backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make("pow", a.data ** p, (a,), _backward)


def add_bias(x, bias) -> Tensor:
    """x[n×d] 每一行加上 bias[d]"""
    x, bias = _as_tensor(x), _as_tensor(bias)
    if x.ndim != 2 or bias.ndim != 1 or x.shape[1] != bias.shape[0]:
        raise ShapeError(f"add_bias: 形状 {x.shape} 与偏置 {bias.shape} 不匹配")

    def _backward(g):
        return g, g.sum(axis=0)

    return _make("add_bias", x.data + bias.data, (x, bias), _backward)


# ---------------------------------------------------------------------------
# 矩阵运算
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: 形状 {a.shape} 与 {b.shape} 的内维不匹配")

    def _backward(g):
        return g @ b.data.T, a.data.T @ g

    return _make("matmul", a.data @ b.data, (a, b), _backward)


def spmm(matrix: sp.spmatrix, x) -> Tensor:
    """常量稀疏矩阵左乘稠密张量，只对 x 求导"""
    x = _as_tensor(x)
    if x.ndim not in (1, 2) or matrix.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm: 稀疏矩阵 {matrix.shape} 与张量 {x.shape} 不匹配")
    transposed = matrix.T.tocsr()

    def _backward(g):
        return (np.asarray(transposed @ g),)

    return _make("spmm", np.asarray(matrix @ x.data), (x,), _backward)


# ---------------------------------------------------------------------------
# 逐元素一元运算
# ---------------------------------------------------------------------------

def relu(x) -> Tensor:
    x = _as_tensor(x)
    # 0 处次梯度取 0
    active = x.data > 0

    def _backward(g):
        return (g * active,)

    return _make("relu", np.where(active, x.data, 0.0), (x,), _backward)


def dropout(x, p: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """
    反向缩放 dropout

    Args:
        x: 输入张量
        p: 丢弃概率，0 <= p < 1
        training: 推理时为恒等映射
        rng: 随机数生成器（训练时必需）
    """
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout 概率必须满足 0 <= p < 1，当前 p={p}")
    x = _as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ParameterError("训练模式下 dropout 需要随机数生成器")
    scale = (rng.random(x.shape) >= p) / (1.0 - p)

    def _backward(g):
        return (g * scale,)

    return _make("dropout", x.data * scale, (x,), _backward)


def log(x) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(divide="ignore"):
        out = np.log(x.data)
    return _make("log", out, (x,), lambda g: (g / x.data,))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def sqrt(x) -> Tensor:
    x = _as_tensor(x)
    out = np.sqrt(x.data)
    return _make("sqrt", out, (x,), lambda g: (0.5 * g / out,))


def softplus(x) -> Tensor:
    x = _as_tensor(x)
    return _make("softplus", np.logaddexp(0.0, x.data), (x,), lambda g: (g * expit(x.data),))


def lgamma(x):
    """log Γ；张量输入可微（导数为 digamma），数组输入直接求值"""
    if not isinstance(x, Tensor):
        return special.lgamma(x)
    return _make("lgamma", special.lgamma(x.data), (x,), lambda g: (g * special.digamma(x.data),))


def digamma(x):
    """ψ；张量输入可微（导数为 trigamma），数组输入直接求值"""
    if not isinstance(x, Tensor):
        return special.digamma(x)
    return _make("digamma", special.digamma(x.data), (x,), lambda g: (g * special.trigamma(x.data),))


def trigamma(x):
    """ψ'，不可微（不支持高阶导数）"""
    if isinstance(x, Tensor):
        return Tensor(special.trigamma(x.data))
    return special.trigamma(x)


# ---------------------------------------------------------------------------
# 归约与索引
# ---------------------------------------------------------------------------

def tensor_sum(x, axis: Optional[int] = None) -> Tensor:
    x = _as_tensor(x)

    def _backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _make("sum", np.asarray(x.data.sum(axis=axis)), (x,), _backward)


def tensor_mean(x, axis: Optional[int] = None) -> Tensor:
    x = _as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    return tensor_sum(x, axis) * (1.0 / count)


def logsumexp(x, axis: int = 1) -> Tensor:
    """沿 axis 的 log Σ exp，数值稳定"""
    x = _as_tensor(x)
    out = _logsumexp(x.data, axis=axis)

    def _backward(g):
        return (np.expand_dims(g, axis) * softmax(x.data, axis=axis),)

    return _make("logsumexp", np.asarray(out), (x,), _backward)


def reshape(x, shape: Tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: 无法把 {x.shape} 变为 {shape}") from exc
    return _make("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def row_gather(x, index) -> Tensor:
    """按行索引取子矩阵（允许重复索引）"""
    x = _as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < -x.shape[0] or idx.max() >= x.shape[0]):
        raise ShapeError(f"row_gather: 索引越界，行数 {x.shape[0]}")

    def _backward(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, idx, g)
        return (grad,)

    return _make("row_gather", x.data[idx], (x,), _backward)


def take_per_row(x, columns) -> Tensor:
    """从 x[n×C] 的每一行取出 columns[i] 列的元素"""
    x = _as_tensor(x)
    cols = np.asarray(columns, dtype=np.int64)
    if x.ndim != 2 or cols.shape != (x.shape[0],):
        raise ShapeError(f"take_per_row: 形状 {x.shape} 与列索引 {cols.shape} 不匹配")
    rows = np.arange(x.shape[0])

    def _backward(g):
        grad = np.zeros_like(x.data)
        grad[rows, cols] = g
        return (grad,)

    return _make("take_per_row", x.data[rows, cols], (x,), _backward)


def stack_columns(columns: Sequence[Tensor]) -> Tensor:
    """把若干 [n] 张量按列拼成 [n×k]"""
    cols = [_as_tensor(c) for c in columns]
    if not cols:
        raise ShapeError("stack_columns: 至少需要一列")
    length = cols[0].shape
    if any(c.shape != length or c.ndim != 1 for c in cols):
        raise ShapeError("stack_columns: 所有列必须是同长度的一维张量")

    def _backward(g):
        return tuple(g[:, k] for k in range(len(cols)))

    return _make("stack_columns", np.stack([c.data for c in cols], axis=1), cols, _backward)


def row_norm(x) -> Tensor:
    """x[n×d] 每行的欧氏范数；范数为 0 的行梯度取 0"""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"row_norm: 需要二维张量，当前 {x.shape}")
    out = np.sqrt(np.sum(x.data * x.data, axis=1))
    safe = np.where(out > 0, out, 1.0)

    def _backward(g):
        scale = np.where(out > 0, g / safe, 0.0)
        return (scale[:, None] * x.data,)

    return _make("row_norm", out, (x,), _backward)


# ---------------------------------------------------------------------------
# 数值梯度
# ---------------------------------------------------------------------------

def numerical_gradient(fn: Callable[[], Tensor], tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """
    中心差分估计 d fn() / d tensor

    Args:
        fn: 无参函数，返回标量张量；会在原地扰动 tensor.data 后重复调用
        tensor: 求导对象
        h: 差分步长

    Returns:
        与 tensor 同形状的数值梯度
    """
    if not tensor.data.flags.c_contiguous:
        tensor.data = np.ascontiguousarray(tensor.data)
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    grad_flat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            upper = fn().item()
            flat[i] = original - h
            lower = fn().item()
            flat[i] = original
            grad_flat[i] = (upper - lower) / (2.0 * h)
    return grad
