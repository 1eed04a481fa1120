"""Softmax self-attention over the concatenated, down-projected BEV maps."""

from __future__ import annotations

import numpy as np

from ..tensor import DEFAULT_DTYPE, init_normal, linear, make_rng
from .base import MAX_SCORES, BaseFusion, softmax_attention


class SelfAttentionFusion(BaseFusion):
    name = "sa"

    def __init__(
        self,
        channels: int,
        heads: int = 4,
        seed: int = 0,
        max_scores: int | None = MAX_SCORES,
        dtype=DEFAULT_DTYPE,
    ):
        super().__init__(channels)
        rng = make_rng(seed)
        self.heads = heads
        self.max_scores = max_scores
        self.reduce = init_normal((2 * channels, channels), rng, dtype=dtype)
        self.q_proj = init_normal((channels, channels), rng, dtype=dtype)
        self.k_proj = init_normal((channels, channels), rng, dtype=dtype)
        self.v_proj = init_normal((channels, channels), rng, dtype=dtype)
        self.out_proj = init_normal((channels, channels), rng, dtype=dtype)

    def fuse(self, lidar: np.ndarray, image: np.ndarray) -> np.ndarray:
        self._check_inputs(lidar, image)
        height, width, channels = lidar.shape
        tokens = linear(np.concatenate([lidar, image], axis=2).reshape(-1, 2 * channels), self.reduce)
        attended = softmax_attention(
            linear(tokens, self.q_proj),
            linear(tokens, self.k_proj),
            linear(tokens, self.v_proj),
            self.heads,
            self.max_scores,
        )
        return linear(attended, self.out_proj).reshape(height, width, channels)
