"""Cross linear attention fusion of LiDAR and image BEV features.

Each branch projects its map to queries, keys and values
(Linear -> Conv3x3 -> SiLU -> Linear) plus a shortcut (Linear(SiLU(x))).
Queries and keys pass through a positive kernel feature map and RoPE, and each
modality queries the other's key/value summary::

    KV  = (s K)^T (s V)              s = 1/sqrt(heads) by default
    out = (Q KV) / (Q sum_j K_j + eps)

Evaluating ``Q (K^T V)`` right-to-left costs O(L C^2); :func:`quadratic_oracle`
evaluates the same expression left-to-right through the explicit L x L score
matrix. The two gated directions are projected, summed and mixed by a 1x1 conv.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, fields

import numpy as np

from ..errors import BoundsError, DimensionError, MemoryGuardError, ValidationError
from ..tensor import (
    DEFAULT_DTYPE,
    activation,
    conv2d,
    depthwise_conv2d,
    identity_kernel,
    init_normal,
    linear,
    make_rng,
)
from .base import MAX_SCORES, QUERY_BLOCK, BaseFusion, merge_heads, split_heads

logger = logging.getLogger(__name__)

FEATURE_MAPS = ("elu_plus_one", "elu")
SCALE_MODES = ("heads", "head_dim")
ROPE_MODES = ("flat", "axial", "none")

AttentionFn = Callable[..., np.ndarray]


@dataclass
class BranchWeights:
    """Per-modality projection weights; every layer is bias-free."""

    in_proj: np.ndarray  # [C, C]
    conv: np.ndarray  # [3, 3, C, C], or [3, 3, C] when depthwise
    q_proj: np.ndarray
    k_proj: np.ndarray
    v_proj: np.ndarray
    shortcut_proj: np.ndarray
    out_proj: np.ndarray

    @property
    def depthwise(self) -> bool:
        return self.conv.ndim == 3

    @classmethod
    def random(
        cls, channels: int, rng: np.random.Generator, depthwise: bool = False, dtype=DEFAULT_DTYPE
    ) -> BranchWeights:
        square = (channels, channels)
        conv_shape = (3, 3, channels) if depthwise else (3, 3, channels, channels)
        return cls(
            in_proj=init_normal(square, rng, dtype=dtype),
            conv=init_normal(conv_shape, rng, dtype=dtype),
            q_proj=init_normal(square, rng, dtype=dtype),
            k_proj=init_normal(square, rng, dtype=dtype),
            v_proj=init_normal(square, rng, dtype=dtype),
            shortcut_proj=init_normal(square, rng, dtype=dtype),
            out_proj=init_normal(square, rng, dtype=dtype),
        )

    @classmethod
    def identity(cls, channels: int, depthwise: bool = False, dtype=DEFAULT_DTYPE) -> BranchWeights:
        """Identity projections and an impulse conv kernel."""
        eye = np.eye(channels, dtype=dtype)
        if depthwise:
            conv = np.zeros((3, 3, channels), dtype=dtype)
            conv[1, 1] = 1
        else:
            conv = identity_kernel(3, channels, dtype)
        return cls(eye, conv, eye.copy(), eye.copy(), eye.copy(), eye.copy(), eye.copy())

    def named(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.{f.name}": getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_named(cls, tensors: dict[str, np.ndarray], prefix: str) -> BranchWeights:
        try:
            return cls(**{f.name: tensors[f"{prefix}.{f.name}"] for f in fields(cls)})
        except KeyError as e:
            raise ValidationError(f"parameter bundle is missing {e.args[0]}") from e


@dataclass
class ClfmParams:
    """All weights and hyperparameters of the fusion module."""

    lidar: BranchWeights
    image: BranchWeights
    fuse: np.ndarray  # [C, C] 1x1 conv
    heads: int = 4
    epsilon: float = 1e-6
    feature_map: str = "elu_plus_one"
    scale: str = "heads"
    rope: str = "flat"

    def __post_init__(self) -> None:
        if self.channels % self.heads:
            raise ValidationError(f"{self.channels} channels not divisible by {self.heads} heads")
        if self.epsilon <= 0:
            raise ValidationError(f"epsilon must be positive, got {self.epsilon}")
        if self.feature_map not in FEATURE_MAPS:
            raise ValidationError(f"feature_map must be one of {FEATURE_MAPS}")
        if self.scale not in SCALE_MODES:
            raise ValidationError(f"scale must be one of {SCALE_MODES}")
        if self.rope not in ROPE_MODES:
            raise ValidationError(f"rope must be one of {ROPE_MODES}")

    @property
    def channels(self) -> int:
        return self.fuse.shape[0]

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads

    @classmethod
    def init(
        cls,
        channels: int,
        heads: int,
        seed: int,
        depthwise: bool = False,
        dtype=DEFAULT_DTYPE,
        **options,
    ) -> ClfmParams:
        """Normal(0, 0.02) weights from a seeded generator."""
        rng = make_rng(seed)
        lidar = BranchWeights.random(channels, rng, depthwise, dtype)
        image = BranchWeights.random(channels, rng, depthwise, dtype)
        fuse = init_normal((channels, channels), rng, dtype=dtype)
        return cls(lidar=lidar, image=image, fuse=fuse, heads=heads, **options)

    @classmethod
    def identity(
        cls, channels: int, heads: int, depthwise: bool = False, dtype=DEFAULT_DTYPE, **options
    ) -> ClfmParams:
        return cls(
            lidar=BranchWeights.identity(channels, depthwise, dtype),
            image=BranchWeights.identity(channels, depthwise, dtype),
            fuse=np.eye(channels, dtype=dtype),
            heads=heads,
            **options,
        )

    def named_weights(self) -> dict[str, np.ndarray]:
        return {**self.lidar.named("lidar"), **self.image.named("image"), "fuse": self.fuse}

    def meta(self) -> dict[str, object]:
        return {
            "heads": self.heads,
            "epsilon": repr(self.epsilon),
            "feature_map": self.feature_map,
            "scale": self.scale,
            "rope": self.rope,
        }

    @classmethod
    def from_bundle(cls, tensors: dict[str, np.ndarray], meta: dict[str, str]) -> ClfmParams:
        if "fuse" not in tensors:
            raise ValidationError("parameter bundle is missing fuse")
        try:
            options = {
                "heads": int(meta["heads"]),
                "epsilon": float(meta["epsilon"]),
                "feature_map": meta["feature_map"],
                "scale": meta["scale"],
                "rope": meta["rope"],
            }
        except (KeyError, ValueError) as e:
            raise ValidationError(f"bad parameter bundle metadata: {e}") from e
        return cls(
            lidar=BranchWeights.from_named(tensors, "lidar"),
            image=BranchWeights.from_named(tensors, "image"),
            fuse=tensors["fuse"],
            **options,
        )

    def rope_table(self, height: int, width: int) -> RopeTable:
        if self.rope == "axial":
            return RopeTable.axial(height, width, self.head_dim)
        if self.rope == "none":
            return RopeTable.disabled(height * width, self.head_dim)
        return RopeTable.flat(height * width, self.head_dim)


@dataclass(frozen=True)
class RopeTable:
    """Per-position cosine/sine factors for each of the d_h/2 channel pairs of a head.

    Pair k rotates channels (k, k + d_h/2) by ``position * base**(-2k/d_h)``.
    """

    cos: np.ndarray  # [L, d_h / 2]
    sin: np.ndarray

    BASE = 10000.0

    @property
    def length(self) -> int:
        return self.cos.shape[0]

    @property
    def head_dim(self) -> int:
        return 2 * self.cos.shape[1]

    @classmethod
    def _pairs(cls, head_dim: int) -> np.ndarray:
        if head_dim % 2:
            raise DimensionError(f"RoPE needs an even head dimension, got {head_dim}")
        return cls.BASE ** (-2.0 * np.arange(head_dim // 2) / head_dim)

    @classmethod
    def from_angles(cls, angles: np.ndarray) -> RopeTable:
        return cls(cos=np.cos(angles), sin=np.sin(angles))

    @classmethod
    def flat(cls, length: int, head_dim: int) -> RopeTable:
        """Angles over the flattened (row-major) BEV index."""
        theta = cls._pairs(head_dim)
        return cls.from_angles(np.arange(length, dtype=np.float64)[:, None] * theta[None, :])

    @classmethod
    def axial(cls, height: int, width: int, head_dim: int) -> RopeTable:
        """First half of the pairs rotate with the row index, second half with the column."""
        theta = cls._pairs(head_dim)
        rows, cols = np.divmod(np.arange(height * width, dtype=np.float64), width)
        split = theta.size // 2
        angles = np.empty((height * width, theta.size))
        angles[:, :split] = rows[:, None] * theta[None, :split]
        angles[:, split:] = cols[:, None] * theta[None, split:]
        return cls.from_angles(angles)

    @classmethod
    def disabled(cls, length: int, head_dim: int) -> RopeTable:
        return cls.from_angles(np.zeros((length, cls._pairs(head_dim).size)))

    def apply(self, x: np.ndarray, heads: int) -> np.ndarray:
        length = x.shape[0]
        if length > self.length:
            raise BoundsError(f"{length} positions exceed the {self.length}-entry RoPE table")
        xh = split_heads(x, heads)
        if xh.shape[2] != self.head_dim:
            raise DimensionError(f"head dim {xh.shape[2]} does not match RoPE table {self.head_dim}")
        half = self.head_dim // 2
        cos = self.cos[:length].astype(x.dtype)
        sin = self.sin[:length].astype(x.dtype)
        first, second = xh[..., :half], xh[..., half:]
        rotated = np.concatenate([first * cos - second * sin, first * sin + second * cos], axis=-1)
        return merge_heads(rotated)


def _check_branch(bev: np.ndarray, branch: BranchWeights) -> None:
    if bev.ndim != 3 or bev.shape[2] != branch.in_proj.shape[0]:
        raise DimensionError(f"BEV {bev.shape} does not fit {branch.in_proj.shape[0]}-channel weights")


def qkv_project(bev: np.ndarray, branch: BranchWeights) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Linear -> Conv3x3 -> SiLU -> flatten, then three parallel projections to Q, K, V."""
    _check_branch(bev, branch)
    hidden = linear(bev, branch.in_proj)
    hidden = depthwise_conv2d(hidden, branch.conv) if branch.depthwise else conv2d(hidden, branch.conv)
    flat = activation(hidden, "silu").reshape(-1, hidden.shape[2])
    return linear(flat, branch.q_proj), linear(flat, branch.k_proj), linear(flat, branch.v_proj)


def shortcut(bev: np.ndarray, branch: BranchWeights) -> np.ndarray:
    _check_branch(bev, branch)
    return linear(activation(bev, "silu").reshape(-1, bev.shape[2]), branch.shortcut_proj)


def kernelize(x: np.ndarray, rope: RopeTable, feature_map: str, heads: int) -> np.ndarray:
    """Positive feature map followed by per-head rotary position encoding."""
    return rope.apply(activation(x, feature_map), heads)


def attention_scale(heads: int, head_dim: int, mode: str = "heads") -> float:
    return 1.0 / math.sqrt(heads if mode == "heads" else head_dim)


def _check_attention_shapes(q: np.ndarray, k: np.ndarray, v: np.ndarray, heads: int) -> None:
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError("attention inputs must be [L, C]")
    if not q.shape[1] == k.shape[1] == v.shape[1] or k.shape[0] != v.shape[0]:
        raise DimensionError(f"incompatible Q {q.shape}, K {k.shape}, V {v.shape}")
    if q.shape[1] % heads:
        raise DimensionError(f"{q.shape[1]} channels cannot be split into {heads} heads")


def linear_cross_attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    heads: int,
    epsilon: float = 1e-6,
    scale: str = "heads",
) -> np.ndarray:
    """Kernelized attention evaluated as Q (K^T V): O(L d^2) per head."""
    _check_attention_shapes(q, k, v, heads)
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    s = attention_scale(heads, qh.shape[2], scale)
    kv = np.matmul((kh * s).transpose(0, 2, 1), vh * s)  # [heads, d, d]
    key_sum = kh.sum(axis=1)[:, :, None]  # [heads, d, 1]
    numerator = np.matmul(qh, kv)
    denominator = np.matmul(qh, key_sum) + epsilon
    return merge_heads(numerator / denominator)


def quadratic_oracle(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    heads: int,
    epsilon: float = 1e-6,
    scale: str = "heads",
    max_scores: int | None = MAX_SCORES,
) -> np.ndarray:
    """The same expression as :func:`linear_cross_attention`, evaluated as (Q K^T) V."""
    _check_attention_shapes(q, k, v, heads)
    if max_scores is not None and q.shape[0] * k.shape[0] > max_scores:
        raise MemoryGuardError(f"{q.shape[0]} x {k.shape[0]} scores exceed the {max_scores} guard")
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    s = attention_scale(heads, qh.shape[2], scale)
    out = np.empty(qh.shape[:2] + (vh.shape[2],), dtype=np.result_type(q, k, v))
    for start in range(0, qh.shape[1], QUERY_BLOCK):
        stop = start + QUERY_BLOCK
        scores = np.matmul(qh[:, start:stop], kh.transpose(0, 2, 1))  # [heads, block, L_k]
        numerator = np.matmul(scores * s, vh * s)
        denominator = scores.sum(axis=2, keepdims=True) + epsilon
        out[:, start:stop] = numerator / denominator
    return merge_heads(out)


def clfm_forward(
    lidar: np.ndarray,
    image: np.ndarray,
    params: ClfmParams,
    attention: AttentionFn = linear_cross_attention,
) -> np.ndarray:
    """Bidirectional fusion; returns a map with the input's H x W x C shape."""
    if lidar.shape != image.shape or lidar.ndim != 3:
        raise DimensionError(f"lidar {lidar.shape} and image {image.shape} BEV maps must match")
    if lidar.shape[2] != params.channels:
        raise DimensionError(f"BEV has {lidar.shape[2]} channels, params expect {params.channels}")
    height, width, channels = lidar.shape
    rope = params.rope_table(height, width)

    def kern(t: np.ndarray) -> np.ndarray:
        return kernelize(t, rope, params.feature_map, params.heads)

    q_l, k_l, v_l = qkv_project(lidar, params.lidar)
    q_i, k_i, v_i = qkv_project(image, params.image)
    x_bar = shortcut(lidar, params.lidar)
    y_bar = shortcut(image, params.image)

    # image queries LiDAR, LiDAR queries image
    x_hat = attention(kern(q_i), kern(k_l), v_l, params.heads, params.epsilon, params.scale)
    y_hat = attention(kern(q_l), kern(k_i), v_i, params.heads, params.epsilon, params.scale)

    mixed = linear(x_hat * x_bar, params.lidar.out_proj) + linear(y_hat * y_bar, params.image.out_proj)
    return conv2d(mixed.reshape(height, width, channels), params.fuse[None, None])


class ClfmFusion(BaseFusion):
    """Cross linear attention fusion; ``oracle=True`` swaps in the quadratic evaluation order."""

    name = "clfm"

    def __init__(self, params: ClfmParams, oracle: bool = False):
        super().__init__(params.channels)
        self.params = params
        self.oracle = oracle

    def fuse(self, lidar: np.ndarray, image: np.ndarray) -> np.ndarray:
        self._check_inputs(lidar, image)
        attention = quadratic_oracle if self.oracle else linear_cross_attention
        return clfm_forward(lidar, image, self.params, attention)
