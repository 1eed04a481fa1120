"""Wall-clock scaling of the linear and quadratic attention orders, and of the fusion schemes."""

from __future__ import annotations

import asyncio
import logging
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .fusion import FUSION_SCHEMES, make_fusion
from .fusion.clfm import linear_cross_attention, quadratic_oracle
from .models import RunReport
from .tensor import activation, make_rng

logger = logging.getLogger(__name__)

MIN_TRIALS = 3
DEFAULT_LENGTHS = (1024, 4096, 16384, 65536)


@dataclass
class BenchRow:
    length: int
    linear_ns: int
    quadratic_ns: int | None = None

    @property
    def speedup(self) -> float | None:
        if self.quadratic_ns is None:
            return None
        return self.quadratic_ns / max(self.linear_ns, 1)

    def to_row(self) -> dict:
        speedup = self.speedup
        return {
            "length": self.length,
            "linear_ns": self.linear_ns,
            "quadratic_ns": "" if self.quadratic_ns is None else self.quadratic_ns,
            "speedup": "" if speedup is None else round(speedup, 3),
        }


@dataclass
class BenchSummary:
    rows: list[BenchRow]
    channels: int
    heads: int
    trials: int

    @property
    def linear_slope(self) -> float | None:
        if len(self.rows) < 2:
            return None
        return fit_loglog_slope([r.length for r in self.rows], [r.linear_ns for r in self.rows])

    @property
    def quadratic_slope(self) -> float | None:
        timed = [r for r in self.rows if r.quadratic_ns is not None]
        if len(timed) < 2:
            return None
        return fit_loglog_slope([r.length for r in timed], [r.quadratic_ns for r in timed])

    def speedup_at(self, length: int) -> float | None:
        for row in self.rows:
            if row.length == length:
                return row.speedup
        return None


def fit_loglog_slope(lengths: Sequence[float], times: Sequence[float]) -> float:
    """Least-squares slope of log(time) against log(length)."""
    if len(lengths) != len(times) or len(lengths) < 2:
        raise ValidationError(f"need at least 2 matched points, got {len(lengths)} and {len(times)}")
    x = np.log(np.asarray(lengths, dtype=np.float64))
    y = np.log(np.asarray(times, dtype=np.float64))
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)


def _time_once(fn: Callable[[], object]) -> int:
    start = time.perf_counter_ns()
    fn()
    return time.perf_counter_ns() - start


async def _time_parallel(fn: Callable[[], object], trials: int) -> list[int]:
    return list(await asyncio.gather(*[asyncio.to_thread(_time_once, fn) for _ in range(trials)]))


def median_ns(fn: Callable[[], object], trials: int, warmup: int = 1, parallel: bool = False) -> int:
    """Median wall-clock nanoseconds of ``fn`` over ``trials`` runs after ``warmup`` discarded runs."""
    for _ in range(warmup):
        fn()
    if parallel:
        samples = asyncio.run(_time_parallel(fn, trials))
    else:
        samples = [_time_once(fn) for _ in range(trials)]
    logger.debug("Trial timings (ns): %s", samples)
    return int(np.median(samples))


def _attention_inputs(length: int, channels: int, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rng = make_rng([seed, length])
    q, k, v = (rng.standard_normal((length, channels)).astype(np.float32) for _ in range(3))
    return activation(q, "elu_plus_one"), activation(k, "elu_plus_one"), v


def clfm_bench(
    lengths: Sequence[int] = DEFAULT_LENGTHS,
    channels: int = 16,
    heads: int = 4,
    trials: int = 5,
    warmup: int = 1,
    quadratic_max_length: int = 16384,
    seed: int = 0,
    parallel: bool = False,
) -> BenchSummary:
    """Median timings of both attention orders per sequence length.

    The quadratic order is skipped above ``quadratic_max_length``.
    """
    if trials < MIN_TRIALS:
        raise ValidationError(f"benchmark needs at least {MIN_TRIALS} trials, got {trials}")
    if channels % heads:
        raise ValidationError(f"{channels} channels not divisible by {heads} heads")
    rows = []
    for length in sorted(lengths):
        q, k, v = _attention_inputs(length, channels, seed)
        linear_ns = median_ns(lambda: linear_cross_attention(q, k, v, heads), trials, warmup, parallel)
        quadratic_ns = None
        if length <= quadratic_max_length:
            quadratic_ns = median_ns(
                lambda: quadratic_oracle(q, k, v, heads, max_scores=None), trials, warmup, parallel
            )
        else:
            logger.warning("Skipping quadratic order at L=%d (cap %d)", length, quadratic_max_length)
        row = BenchRow(length, linear_ns, quadratic_ns)
        logger.info("L=%d: linear %d ns, speedup %s", length, linear_ns, row.speedup)
        rows.append(row)
    return BenchSummary(rows=rows, channels=channels, heads=heads, trials=trials)


def fusion_scheme_timing(
    grids: Sequence[int] = (16, 32),
    channels: int = 16,
    heads: int = 4,
    trials: int = 3,
    seed: int = 0,
) -> list[dict]:
    """Median fuse() time of every registered scheme on square grids of each side length."""
    rows = []
    for side in grids:
        rng = make_rng([seed, side])
        lidar = rng.standard_normal((side, side, channels)).astype(np.float32)
        image = rng.standard_normal((side, side, channels)).astype(np.float32)
        for scheme in FUSION_SCHEMES:
            fusion = make_fusion(scheme, channels, heads=heads, seed=seed, max_scores=None)
            elapsed = median_ns(lambda f=fusion: f.fuse(lidar, image), trials)
            rows.append({"scheme": scheme, "grid": side, "channels": channels, "median_ns": elapsed})
            logger.info("%s on %dx%d: %.3f ms", scheme, side, side, elapsed / 1e6)
    return rows


def bench_report(summary: BenchSummary, environment: dict | None = None) -> RunReport:
    final: dict = {}
    for key, slope in (("linear_slope", summary.linear_slope), ("quadratic_slope", summary.quadratic_slope)):
        if slope is not None:
            final[key] = round(slope, 4)
    return RunReport(
        command="bench",
        rows=[r.to_row() for r in summary.rows],
        final=final,
        environment=environment or {},
    )
