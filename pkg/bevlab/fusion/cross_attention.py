"""Bidirectional softmax cross-attention; both directions are summed and projected."""

from __future__ import annotations

import numpy as np

from ..tensor import DEFAULT_DTYPE, init_normal, linear, make_rng
from .base import MAX_SCORES, BaseFusion, softmax_attention


class CrossAttentionFusion(BaseFusion):
    name = "ca"

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
        self.projections = {
            side: {name: init_normal((channels, channels), rng, dtype=dtype) for name in ("q", "k", "v")}
            for side in ("lidar", "image")
        }
        self.out_proj = init_normal((channels, channels), rng, dtype=dtype)

    def _attend(self, queries: np.ndarray, keys: np.ndarray, q_side: str, kv_side: str) -> np.ndarray:
        q = linear(queries, self.projections[q_side]["q"])
        k = linear(keys, self.projections[kv_side]["k"])
        v = linear(keys, self.projections[kv_side]["v"])
        return softmax_attention(q, k, v, self.heads, self.max_scores)

    def fuse(self, lidar: np.ndarray, image: np.ndarray) -> np.ndarray:
        self._check_inputs(lidar, image)
        height, width, channels = lidar.shape
        x = lidar.reshape(-1, channels)
        y = image.reshape(-1, channels)
        summed = self._attend(y, x, "image", "lidar") + self._attend(x, y, "lidar", "image")
        return linear(summed, self.out_proj).reshape(height, width, channels)
