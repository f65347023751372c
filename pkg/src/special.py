"""
Γ 函数族数值实现
lgamma / digamma / trigamma：递推上移到阈值以上，再使用 8 项渐近级数
"""
from typing import Sequence, Union

import numpy as np

from errors import DomainError

ArrayOrScalar = Union[float, np.ndarray]

SHIFT_THRESHOLD = 6.0
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)

# Stirling 级数: B_2k / (2k (2k-1))
_LGAMMA_COEFFS = (
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360360.0,
    1.0 / 156.0,
    -3617.0 / 122400.0,
)

# B_2k / 2k
_DIGAMMA_COEFFS = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
    -3617.0 / 8160.0,
)

# B_2k
_TRIGAMMA_COEFFS = (
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
    -3617.0 / 510.0,
)


def _horner(coeffs: Sequence[float], t: np.ndarray) -> np.ndarray:
    """计算 c0 + c1 t + c2 t^2 + ..."""
    acc = np.zeros_like(t)
    for c in reversed(coeffs):
        acc = acc * t + c
    return acc


def _prepare(x: ArrayOrScalar, name: str) -> np.ndarray:
    arr = np.array(x, dtype=np.float64)
    # 同时拦截 NaN
    if not np.all(arr > 0):
        raise DomainError(f"{name} 要求 x > 0")
    return arr


def _restore(result: np.ndarray, original: ArrayOrScalar) -> ArrayOrScalar:
    if np.ndim(original) == 0:
        return float(result)
    return result


def lgamma(x: ArrayOrScalar) -> ArrayOrScalar:
    """
    log Γ(x)，x > 0

    Args:
        x: 标量或数组

    Returns:
        与输入同形状的 log Γ(x)
    """
    z = _prepare(x, "lgamma")
    correction = np.zeros_like(z)
    small = z < SHIFT_THRESHOLD
    while np.any(small):
        # log Γ(z) = log Γ(z+1) - log z
        correction[small] -= np.log(z[small])
        z[small] += 1.0
        small = z < SHIFT_THRESHOLD

    inv = 1.0 / z
    series = inv * _horner(_LGAMMA_COEFFS, inv * inv)
    result = (z - 0.5) * np.log(z) - z + _HALF_LOG_2PI + series + correction
    return _restore(result, x)


def digamma(x: ArrayOrScalar) -> ArrayOrScalar:
    """ψ(x) = d/dx log Γ(x)，x > 0"""
    z = _prepare(x, "digamma")
    correction = np.zeros_like(z)
    small = z < SHIFT_THRESHOLD
    while np.any(small):
        # ψ(z) = ψ(z+1) - 1/z
        correction[small] -= 1.0 / z[small]
        z[small] += 1.0
        small = z < SHIFT_THRESHOLD

    inv = 1.0 / z
    inv2 = inv * inv
    result = np.log(z) - 0.5 * inv - inv2 * _horner(_DIGAMMA_COEFFS, inv2) + correction
    return _restore(result, x)


def trigamma(x: ArrayOrScalar) -> ArrayOrScalar:
    """ψ'(x)，x > 0"""
    z = _prepare(x, "trigamma")
    correction = np.zeros_like(z)
    small = z < SHIFT_THRESHOLD
    while np.any(small):
        # ψ'(z) = ψ'(z+1) + 1/z^2
        correction[small] += 1.0 / (z[small] * z[small])
        z[small] += 1.0
        small = z < SHIFT_THRESHOLD

    inv = 1.0 / z
    inv2 = inv * inv
    result = inv + 0.5 * inv2 + inv * inv2 * _horner(_TRIGAMMA_COEFFS, inv2) + correction
    return _restore(result, x)
