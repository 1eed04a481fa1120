"""Abstract base class for BEV fusion schemes."""

from __future__ import annotations

import logging
import math
import time
from abc import ABC, abstractmethod

import numpy as np

from ..errors import DimensionError, MemoryGuardError
from ..tensor import softmax

logger = logging.getLogger(__name__)

MAX_SCORES = 10**8
QUERY_BLOCK = 1024


class BaseFusion(ABC):
    """Fuses a LiDAR BEV map and an image BEV map of the same shape into one map."""

    name: str = "base"

    def __init__(self, channels: int):
        self.channels = channels

    def _check_inputs(self, lidar: np.ndarray, image: np.ndarray) -> None:
        if lidar.shape != image.shape or lidar.ndim != 3:
            raise DimensionError(f"[{self.name}] lidar {lidar.shape} and image {image.shape} must match")
        if lidar.shape[2] != self.channels:
            raise DimensionError(
                f"[{self.name}] expected {self.channels} channels, got {lidar.shape[2]}"
            )

    @abstractmethod
    def fuse(self, lidar: np.ndarray, image: np.ndarray) -> np.ndarray:
        """Return the fused H x W x C map. Must be implemented by subclasses."""
        ...

    def timed_fuse(self, lidar: np.ndarray, image: np.ndarray) -> tuple[np.ndarray, int]:
        """Fuse and report wall-clock nanoseconds."""
        start = time.perf_counter_ns()
        fused = self.fuse(lidar, image)
        elapsed = time.perf_counter_ns() - start
        logger.debug("[%s] fused %s in %.3f ms", self.name, lidar.shape, elapsed / 1e6)
        return fused, elapsed


def split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    """[L, C] -> [heads, L, C // heads]."""
    length, channels = x.shape
    if channels % heads:
        raise DimensionError(f"{channels} channels cannot be split into {heads} heads")
    return x.reshape(length, heads, channels // heads).transpose(1, 0, 2)


def merge_heads(x: np.ndarray) -> np.ndarray:
    """[heads, L, d] -> [L, heads * d]."""
    heads, length, dim = x.shape
    return x.transpose(1, 0, 2).reshape(length, heads * dim)


def softmax_attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    heads: int,
    max_scores: int | None = MAX_SCORES,
) -> np.ndarray:
    """Scaled dot-product softmax attention, evaluated in query blocks."""
    if max_scores is not None and q.shape[0] * k.shape[0] > max_scores:
        raise MemoryGuardError(f"{q.shape[0]} x {k.shape[0]} scores exceed the {max_scores} guard")
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    scale = 1.0 / math.sqrt(qh.shape[2])
    out = np.empty(qh.shape[:2] + (vh.shape[2],), dtype=np.result_type(q, v))
    for start in range(0, qh.shape[1], QUERY_BLOCK):
        stop = start + QUERY_BLOCK
        weights = softmax(np.matmul(qh[:, start:stop], kh.transpose(0, 2, 1)) * scale, axis=-1)
        out[:, start:stop] = np.matmul(weights, vh)
    return merge_heads(out)
