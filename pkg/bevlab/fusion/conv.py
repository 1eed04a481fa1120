"""Channel concatenation followed by a 3x3 convolution."""

from __future__ import annotations

import numpy as np

from ..tensor import DEFAULT_DTYPE, conv2d, init_normal, make_rng
from .base import BaseFusion


class ConvFusion(BaseFusion):
    name = "conv"

    def __init__(self, channels: int, seed: int = 0, dtype=DEFAULT_DTYPE):
        super().__init__(channels)
        self.kernel = init_normal((3, 3, 2 * channels, channels), make_rng(seed), dtype=dtype)

    def fuse(self, lidar: np.ndarray, image: np.ndarray) -> np.ndarray:
        self._check_inputs(lidar, image)
        return conv2d(np.concatenate([lidar, image], axis=2), self.kernel)
