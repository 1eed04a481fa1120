"""Detection losses and the total training objective, with analytical derivatives."""

from __future__ import annotations

import math
from collections.abc import Sequence

import numpy as np

from .errors import EmptyBatchError, NonFiniteError
from .models import Box3D, BoxResiduals, FocalParams, wrap_angle

PROB_CLAMP = 1e-7


def _clamp_prob(beta_hat):
    return np.clip(beta_hat, PROB_CLAMP, 1.0 - PROB_CLAMP)


def focal_loss(beta_hat, beta, params: FocalParams = FocalParams()):
    """Elementwise focal loss; ``beta`` is the 0/1 label, ``beta_hat`` the predicted probability."""
    p = _clamp_prob(np.asarray(beta_hat, dtype=np.float64))
    y = np.asarray(beta, dtype=np.float64)
    a, g = params.alpha, params.gamma
    loss = -a * (1 - p) ** g * y * np.log(p) - (1 - a) * p**g * (1 - y) * np.log1p(-p)
    return loss if loss.ndim else float(loss)


def focal_loss_grad(beta_hat, beta, params: FocalParams = FocalParams()):
    """d focal_loss / d beta_hat, evaluated at the clamped probability."""
    p = _clamp_prob(np.asarray(beta_hat, dtype=np.float64))
    y = np.asarray(beta, dtype=np.float64)
    a, g = params.alpha, params.gamma
    positive = a * (g * (1 - p) ** (g - 1) * np.log(p) - (1 - p) ** g / p) if g else -a / p
    negative = (1 - a) * (
        (-g * p ** (g - 1) * np.log1p(-p) if g else 0.0) + p**g / (1 - p)
    )
    grad = y * positive + (1 - y) * negative
    return grad if np.ndim(grad) else float(grad)


def smooth_l1(x):
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    out = np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)
    return out if out.ndim else float(out)


def smooth_l1_grad(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.where(np.abs(x) < 1.0, x, np.sign(x))
    return out if out.ndim else float(out)


def residuals_between(pred: Box3D, target: Box3D) -> BoxResiduals:
    """Prediction-minus-target offsets with the heading difference wrapped to (-pi, pi]."""
    return BoxResiduals(
        dx=pred.cx - target.cx,
        dy=pred.cy - target.cy,
        dz=pred.cz - target.cz,
        dh=pred.h - target.h,
        dw=pred.w - target.w,
        dl=pred.l - target.l,
        dtheta=wrap_angle(pred.yaw - target.yaw),
    )


def _residual_matrix(residuals: Sequence[BoxResiduals]) -> np.ndarray:
    if not residuals:
        raise EmptyBatchError("box regression loss needs at least one box")
    return np.stack([r.as_array() for r in residuals])


def box_regression_loss(residuals: Sequence[BoxResiduals]) -> float:
    return float(np.sum(smooth_l1(_residual_matrix(residuals))))


def box_regression_grad(residuals: Sequence[BoxResiduals]) -> np.ndarray:
    """Per-box gradient wrt the 7 residual components, shape [N, 7]."""
    return smooth_l1_grad(_residual_matrix(residuals))


def total_loss(l_cls: float, l_reg: float, l_contrast: float) -> float:
    total = l_cls + l_reg + l_contrast
    if not math.isfinite(total):
        raise NonFiniteError(f"total loss is {total} (cls={l_cls}, reg={l_reg}, contrast={l_contrast})")
    return total
