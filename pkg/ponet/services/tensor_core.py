# ponet/services/tensor_core.py: dense tensor arithmetic
from __future__ import annotations

import math
from typing import Optional, Tuple

import numpy as np

from ..errors import DimensionError, EmptySequenceError, NumericError


Tensor = np.ndarray

LN_EPS = 1e-12
_GELU_C = math.sqrt(2.0 / math.pi)


class OpCounter:
    """
    Per-call multiplication counter.

    Only products that belong to the block's cost model are recorded:
    affine maps, attention dot-products and fusion products. Divisions,
    exponentials and comparisons are free.
    """

    def __init__(self) -> None:
        self.mults = 0

    def add(self, n: int) -> None:
        self.mults += int(n)

    def reset(self) -> None:
        self.mults = 0


def make_rng(seed: int) -> np.random.Generator:
    # PCG64 streams are bit-identical across platforms for the same seed
    return np.random.Generator(np.random.PCG64(seed))


def ensure_finite(x: Tensor, op: str) -> Tensor:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{op}: non-finite values")
    return x


def _check_rank(x: Tensor, op: str) -> None:
    if not 1 <= x.ndim <= 3:
        raise DimensionError(f"{op}: rank {x.ndim} outside 1..3")


def matmul(a: Tensor, b: Tensor, counter: Optional[OpCounter] = None) -> Tensor:
    """
    Matrix product for rank-2 operands, or a batched product for rank-3
    operands sharing the leading dimension.
    """
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise DimensionError(f"matmul: ranks {a.ndim} and {b.ndim} not supported")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions {a.shape} x {b.shape}")
    if a.ndim == 3 and a.shape[0] != b.shape[0]:
        raise DimensionError(f"matmul: batch dimensions {a.shape} x {b.shape}")
    out = a @ b
    if counter is not None:
        batch = a.shape[0] if a.ndim == 3 else 1
        counter.add(batch * a.shape[-2] * a.shape[-1] * b.shape[-1])
    return ensure_finite(out, "matmul")


def affine(x: Tensor, w: Tensor, b: Tensor, counter: Optional[OpCounter] = None) -> Tensor:
    if x.ndim == 1:
        return matmul(x[None, :], w, counter)[0] + b
    return matmul(x, w, counter) + b


def hadamard(a: Tensor, b: Tensor, counter: Optional[OpCounter] = None) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"hadamard: shapes {a.shape} and {b.shape}")
    if counter is not None:
        counter.add(a.size)
    return ensure_finite(a * b, "hadamard")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_rank(x, "softmax")
    if x.shape[axis] == 0:
        raise DimensionError("softmax: empty axis")
    ensure_finite(x, "softmax")
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise DimensionError("log_softmax: empty axis")
    ensure_finite(x, "log_softmax")
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def reduce_mean(x: Tensor, axis: int = 0) -> Tensor:
    if x.ndim == 0 or x.shape[axis] == 0:
        raise EmptySequenceError("reduce_mean: empty sequence")
    return ensure_finite(np.mean(x, axis=axis), "reduce_mean")


def reduce_max_argmax(x: Tensor, axis: int = 0) -> Tuple[Tensor, np.ndarray]:
    """
    Maximum along the sequence axis and the index of its first occurrence.
    """
    if x.ndim == 0 or x.shape[axis] == 0:
        raise EmptySequenceError("reduce_max_argmax: empty sequence")
    # np.argmax returns the lowest index among ties
    idx = np.argmax(x, axis=axis)
    values = np.take_along_axis(x, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    return ensure_finite(values, "reduce_max_argmax"), idx


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    """
    Row-wise layer norm; returns (y, x_hat, inv_std) for the backward pass.
    Zero-variance rows normalize to zero, so the output is the bias.
    """
    mu = np.mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    x_hat = centered * inv_std
    return x_hat * gain + bias, x_hat, inv_std


def layer_norm_backward(dy: Tensor, x_hat: Tensor, inv_std: Tensor, gain: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    d = x_hat.shape[-1]
    dgain = np.sum(dy * x_hat, axis=0)
    dbias = np.sum(dy, axis=0)
    dx_hat = dy * gain
    dx = inv_std * (
        dx_hat
        - np.sum(dx_hat, axis=-1, keepdims=True) / d
        - x_hat * np.sum(dx_hat * x_hat, axis=-1, keepdims=True) / d
    )
    return dx, dgain, dbias


def gelu(x: Tensor) -> Tensor:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def gelu_grad(x: Tensor) -> Tensor:
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
