"""Central finite-difference checks of every analytical gradient, in float64."""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Iterable
from dataclasses import dataclass

import numpy as np

from .errors import GradientCheckError
from .geometry import lift_splat, lift_splat_backward
from .icd import InstanceScene, cosine_similarity_matrix, icd_batch, icd_loss, icd_loss_grad
from .losses import (
    box_regression_grad,
    box_regression_loss,
    focal_loss,
    focal_loss_grad,
    smooth_l1,
    smooth_l1_grad,
)
from .models import (
    AnchorBev,
    BevGridSpec,
    BoxResiduals,
    DepthDistribution,
    FocalParams,
    InstancePairBatch,
    PinholeCamera,
    Temperature,
)
from .tensor import make_rng

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-4
FOCAL_STEP = 1e-5
KINK_MARGIN = 1e-2

ScalarFn = Callable[[np.ndarray], float]
GradFn = Callable[[np.ndarray], np.ndarray]


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    cases: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance

    def to_row(self) -> dict:
        return {
            "gradient": self.name,
            "max_rel_err": self.max_rel_err,
            "cases": self.cases,
            "passed": self.passed,
        }


def central_difference(fn: ScalarFn, x: np.ndarray, step: float = DEFAULT_STEP) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat, out = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        upper = fn(x)
        flat[i] = original - step
        lower = fn(x)
        flat[i] = original
        out[i] = (upper - lower) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst absolute deviation scaled by the largest numeric component."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.max(np.abs(numeric))) if numeric.size else 0.0, 1e-12)
    return float(np.max(np.abs(analytic - numeric))) / scale if numeric.size else 0.0


def check_gradient(
    name: str,
    cases: Iterable[tuple[ScalarFn, GradFn, np.ndarray]],
    tolerance: float = 1e-4,
    step: float = DEFAULT_STEP,
) -> GradCheckResult:
    """Compare ``grad_fn(x)`` with central differences of ``fn`` at every case's ``x``."""
    worst, count = 0.0, 0
    for fn, grad_fn, x in cases:
        err = relative_error(grad_fn(x), central_difference(fn, x, step))
        worst = max(worst, err) if math.isfinite(err) else math.inf
        count += 1
    result = GradCheckResult(name, worst, count, tolerance)
    logger.info("%-28s max rel err %.3e over %d cases", name, worst, count)
    return result


# ── Case generators ───────────────────────────────────────────────────


def _icd_cases(rng, cases: int, wrt: str, include_positive: bool, n: int = 4, e: int = 8):
    def loss(a, b, rho):
        m = cosine_similarity_matrix(InstancePairBatch(a, b))
        return icd_loss(m, Temperature(rho=float(rho)), include_positive)

    def grads(a, b, rho):
        return icd_loss_grad(InstancePairBatch(a, b), Temperature(rho=float(rho)), include_positive)

    for _ in range(cases):
        a = rng.standard_normal((n, e))
        b = rng.standard_normal((n, e))
        rho = float(rng.uniform(math.log(0.2), math.log(5.0)))
        if wrt == "a":
            yield (
                lambda x, b=b, rho=rho: loss(x, b, rho),
                lambda x, b=b, rho=rho: grads(x, b, rho).grad_a,
                a,
            )
        elif wrt == "b":
            yield (
                lambda x, a=a, rho=rho: loss(a, x, rho),
                lambda x, a=a, rho=rho: grads(a, x, rho).grad_b,
                b,
            )
        else:
            yield (
                lambda x, a=a, b=b: loss(a, b, x[0]),
                lambda x, a=a, b=b: np.array([grads(a, b, x[0]).grad_rho]),
                np.array([rho]),
            )


def _focal_cases(rng, cases: int, size: int = 16):
    for _ in range(cases):
        gamma = float(rng.choice([0.0, 1.0, 2.0, 3.5]))
        params = FocalParams(alpha=float(rng.uniform(0.1, 0.9)), gamma=gamma)
        labels = rng.integers(2, size=size).astype(np.float64)
        probs = rng.uniform(0.05, 0.95, size=size)
        yield (
            lambda x, y=labels, p=params: float(np.sum(focal_loss(x, y, p))),
            lambda x, y=labels, p=params: focal_loss_grad(x, y, p),
            probs,
        )


def _away_from_kink(rng, shape) -> np.ndarray:
    x = rng.uniform(-3.0, 3.0, size=shape)
    near = np.abs(np.abs(x) - 1.0) < KINK_MARGIN
    x[near] += 3 * KINK_MARGIN * np.sign(x[near])
    return x


def _smooth_l1_cases(rng, cases: int, size: int = 16):
    for _ in range(cases):
        yield (
            lambda x: float(np.sum(smooth_l1(x))),
            smooth_l1_grad,
            _away_from_kink(rng, size),
        )


def _box_regression_cases(rng, cases: int, boxes: int = 3):
    def as_residuals(x):
        return [BoxResiduals.from_array(row) for row in x.reshape(-1, 7)]

    for _ in range(cases):
        yield (
            lambda x: box_regression_loss(as_residuals(x)),
            lambda x: box_regression_grad(as_residuals(x)),
            _away_from_kink(rng, (boxes, 7)),
        )


def _lift_splat_cases(rng, cases: int):
    grid = BevGridSpec(origin_x=0.0, origin_y=-4.0, cell_size=1.0, height=8, width=8, channels=2)
    camera = PinholeCamera(fx=4.0, cx=2.0, width=4)
    edges = np.linspace(0.5, 7.5, 6)
    for _ in range(cases):
        depth = DepthDistribution(rng.dirichlet(np.ones(5), size=(2, 4)), edges)
        upstream = rng.standard_normal(grid.shape)
        yield (
            lambda x, d=depth, g=upstream: float(np.sum(lift_splat(x, d, camera, grid) * g)),
            lambda x, d=depth, g=upstream: lift_splat_backward(g, d, camera, grid),
            rng.standard_normal((2, 4, 2)),
        )


def _instance_crop_cases(rng, cases: int, pool_size: int = 3):
    anchors = [AnchorBev(0, 0, 2, 1), AnchorBev(3, 2, 5, 5), AnchorBev(1, 3, 1, 4)]
    for _ in range(cases):
        teacher = rng.standard_normal((6, 6, 2))
        temp = Temperature(rho=float(rng.uniform(-1.0, 1.0)))

        def result(x, t=teacher, tp=temp):
            return icd_batch([InstanceScene(t, x, anchors)], pool_size, tp)

        yield (
            lambda x, r=result: r(x).loss,
            lambda x, r=result: r(x).grad_student[0],
            rng.standard_normal((6, 6, 2)),
        )


def run_gradcheck(
    cases: int = 20, tolerance: float = 1e-4, step: float = DEFAULT_STEP, seed: int = 0
) -> list[GradCheckResult]:
    """One result per checked gradient; every case is drawn from a generator seeded by ``seed``."""
    checks = [
        ("icd_loss.a", lambda r: _icd_cases(r, cases, "a", False), step),
        ("icd_loss.b", lambda r: _icd_cases(r, cases, "b", False), step),
        ("icd_loss.rho", lambda r: _icd_cases(r, cases, "rho", False), step),
        ("nt_xent.a", lambda r: _icd_cases(r, cases, "a", True), step),
        ("nt_xent.b", lambda r: _icd_cases(r, cases, "b", True), step),
        ("nt_xent.rho", lambda r: _icd_cases(r, cases, "rho", True), step),
        ("focal_loss.beta_hat", lambda r: _focal_cases(r, cases), FOCAL_STEP),
        ("smooth_l1.x", lambda r: _smooth_l1_cases(r, cases), step),
        ("box_regression.residuals", lambda r: _box_regression_cases(r, cases), step),
        ("lift_splat.features", lambda r: _lift_splat_cases(r, cases), step),
        ("instance_crops.student_bev", lambda r: _instance_crop_cases(r, cases), step),
    ]
    results = []
    for index, (name, make_cases, h) in enumerate(checks):
        rng = make_rng([seed, index])
        results.append(check_gradient(name, make_cases(rng), tolerance, h))
    return results


def assert_all_passed(results: list[GradCheckResult]) -> None:
    failed = [r for r in results if not r.passed]
    if failed:
        details = ", ".join(f"{r.name} ({r.max_rel_err:.3e} > {r.tolerance:g})" for r in failed)
        raise GradientCheckError(f"{len(failed)} gradient check(s) failed: {details}")
