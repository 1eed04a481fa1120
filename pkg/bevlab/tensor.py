"""Dense tensor arithmetic on numpy arrays.

Every feature map is an ``np.ndarray`` in row-major (C) order, channels last.
Layers are bias-free and deterministic: the same inputs always produce
bit-identical outputs.
"""

from __future__ import annotations

from collections.abc import Sequence
from typing import Literal

import numpy as np

from .errors import DimensionError

Tensor = np.ndarray
ActivationKind = Literal["silu", "elu", "elu_plus_one", "exp"]

DEFAULT_DTYPE = np.float32
RNG_ALGORITHM = "PCG64"
INIT_STD = 0.02


def make_rng(seed: int | Sequence[int]) -> np.random.Generator:
    """Seeded generator; the bit generator is pinned so runs reproduce across numpy versions."""
    return np.random.Generator(np.random.PCG64(seed))


def init_normal(
    shape: Sequence[int], rng: np.random.Generator, std: float = INIT_STD, dtype=DEFAULT_DTYPE
) -> Tensor:
    return (rng.standard_normal(tuple(shape)) * std).astype(dtype)


def strides_of(shape: Sequence[int]) -> tuple[int, ...]:
    """Row-major element strides for ``shape``."""
    strides = [1] * len(shape)
    for i in range(len(shape) - 2, -1, -1):
        strides[i] = strides[i + 1] * shape[i + 1]
    return tuple(strides)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise DimensionError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    return a @ b


def linear(x: Tensor, weight: Tensor) -> Tensor:
    """Bias-free projection of the last axis: ``x[..., C_in] @ weight[C_in, C_out]``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"cannot project {x.shape} with weight {weight.shape}")
    return x @ weight


def sigmoid(x: Tensor) -> Tensor:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def activation(x: Tensor, kind: ActivationKind) -> Tensor:
    x = np.asarray(x)
    if kind == "silu":
        return x * sigmoid(x)
    if kind in ("elu", "elu_plus_one"):
        out = np.where(x > 0, x, np.expm1(np.minimum(x, 0)))
        return out + 1 if kind == "elu_plus_one" else out
    if kind == "exp":
        return np.exp(x)
    raise ValueError(f"unknown activation {kind!r}")


def _check_kernel_size(kh: int, kw: int) -> None:
    if kh not in (1, 3) or kw not in (1, 3):
        raise DimensionError(f"only 1x1 and 3x3 kernels are supported, got {kh}x{kw}")


def conv2d(x: Tensor, kernel: Tensor) -> Tensor:
    """Same-padded cross-correlation of an HxWxCin map with a kh x kw x Cin x Cout kernel."""
    if x.ndim != 3 or kernel.ndim != 4:
        raise DimensionError(f"conv2d needs HxWxC input and 4-D kernel, got {x.shape}, {kernel.shape}")
    kh, kw, c_in, c_out = kernel.shape
    _check_kernel_size(kh, kw)
    if x.shape[2] != c_in:
        raise DimensionError(f"input has {x.shape[2]} channels, kernel expects {c_in}")
    height, width = x.shape[:2]
    py, px = kh // 2, kw // 2
    padded = np.pad(x, ((py, py), (px, px), (0, 0)))
    out = np.zeros((height, width, c_out), dtype=np.result_type(x, kernel))
    for dy in range(kh):
        for dx in range(kw):
            out += padded[dy : dy + height, dx : dx + width] @ kernel[dy, dx]
    return out


def depthwise_conv2d(x: Tensor, kernel: Tensor) -> Tensor:
    """Same-padded per-channel cross-correlation with a kh x kw x C kernel."""
    if x.ndim != 3 or kernel.ndim != 3:
        raise DimensionError(f"depthwise conv needs HxWxC input and 3-D kernel, got {x.shape}, {kernel.shape}")
    kh, kw, channels = kernel.shape
    _check_kernel_size(kh, kw)
    if x.shape[2] != channels:
        raise DimensionError(f"input has {x.shape[2]} channels, kernel expects {channels}")
    height, width = x.shape[:2]
    py, px = kh // 2, kw // 2
    padded = np.pad(x, ((py, py), (px, px), (0, 0)))
    out = np.zeros(x.shape, dtype=np.result_type(x, kernel))
    for dy in range(kh):
        for dx in range(kw):
            out += padded[dy : dy + height, dx : dx + width] * kernel[dy, dx]
    return out


def identity_kernel(kh: int, channels: int, dtype=DEFAULT_DTYPE) -> Tensor:
    """A kh x kh x C x C impulse kernel: conv2d with it returns its input."""
    kernel = np.zeros((kh, kh, channels, channels), dtype=dtype)
    kernel[kh // 2, kh // 2] = np.eye(channels, dtype=dtype)
    return kernel


def adaptive_pool_bins(size: int, out: int) -> list[tuple[int, int]]:
    """Half-open [start, end) ranges for each of ``out`` bins over ``size`` inputs."""
    return [((i * size) // out, -((-(i + 1) * size) // out)) for i in range(out)]


def adaptive_avg_pool(x: Tensor, out: int) -> Tensor:
    """Average-pool an h x w x C map to out x out x C; bins may overlap when sizes don't divide."""
    if x.ndim != 3 or x.shape[0] < 1 or x.shape[1] < 1:
        raise DimensionError(f"adaptive pooling needs a non-empty HxWxC map, got {x.shape}")
    if out < 1:
        raise DimensionError(f"output size must be >= 1, got {out}")
    rows = adaptive_pool_bins(x.shape[0], out)
    cols = adaptive_pool_bins(x.shape[1], out)
    pooled = np.empty((out, out, x.shape[2]), dtype=x.dtype)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            pooled[i, j] = x[r0:r1, c0:c1].mean(axis=(0, 1))
    return pooled


def adaptive_avg_pool_backward(grad: Tensor, in_shape: Sequence[int]) -> Tensor:
    """Transpose of :func:`adaptive_avg_pool` for an input of shape ``in_shape``."""
    out = grad.shape[0]
    rows = adaptive_pool_bins(in_shape[0], out)
    cols = adaptive_pool_bins(in_shape[1], out)
    grad_in = np.zeros(tuple(in_shape), dtype=grad.dtype)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            grad_in[r0:r1, c0:c1] += grad[i, j] / ((r1 - r0) * (c1 - c0))
    return grad_in


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def logsumexp(x: Tensor, axis: int = -1, where: Tensor | None = None) -> Tensor:
    """Stabilised log-sum-exp; entries with ``where == False`` are excluded."""
    if where is not None:
        x = np.where(where, x, -np.inf)
    peak = np.max(x, axis=axis, keepdims=True)
    total = np.sum(np.exp(x - peak), axis=axis, keepdims=True)
    return np.squeeze(peak + np.log(total), axis=axis)
