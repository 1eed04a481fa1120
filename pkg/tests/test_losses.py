"""Tests for detection losses and their derivatives."""

from __future__ import annotations

import math

import numpy as np
import pytest

from bevlab.errors import EmptyBatchError, NonFiniteError, ValidationError
from bevlab.gradcheck import central_difference, relative_error
from bevlab.losses import (
    box_regression_grad,
    box_regression_loss,
    focal_loss,
    focal_loss_grad,
    residuals_between,
    smooth_l1,
    smooth_l1_grad,
    total_loss,
)
from bevlab.icd import icd_loss
from bevlab.models import Box3D, BoxResiduals, FocalParams, Temperature


class TestFocalLoss:
    def test_reference_value(self):
        loss = focal_loss(0.9, 1, FocalParams(alpha=0.25, gamma=2.0))
        assert loss == pytest.approx(0.25 * 0.1**2 * -math.log(0.9), abs=1e-15)
        assert loss == pytest.approx(2.634013e-4, abs=1e-9)

    def test_confident_positive(self):
        assert focal_loss(1.0, 1) == pytest.approx(0.0, abs=1e-12)

    def test_gamma_zero_is_half_bce(self):
        p = np.array([0.2, 0.7, 0.95])
        y = np.array([1.0, 0.0, 1.0])
        bce = -(y * np.log(p) + (1 - y) * np.log(1 - p))
        assert np.allclose(focal_loss(p, y, FocalParams(alpha=0.5, gamma=0.0)), 0.5 * bce)

    def test_non_negative(self, rng):
        p = rng.uniform(0, 1, 200)
        y = rng.integers(2, size=200)
        assert (focal_loss(p, y) >= 0).all()

    def test_monotone_for_positives(self):
        losses = focal_loss(np.linspace(0.01, 0.99, 100), np.ones(100))
        assert (np.diff(losses) < 0).all()

    def test_invalid_params(self):
        with pytest.raises(ValidationError):
            FocalParams(alpha=1.5)
        with pytest.raises(ValidationError):
            FocalParams(gamma=-1.0)

    @pytest.mark.parametrize("label", [0.0, 1.0])
    def test_gradient_matches_finite_differences(self, label):
        p = np.linspace(0.1, 0.9, 9)
        y = np.full(9, label)
        numeric = central_difference(lambda x: float(np.sum(focal_loss(x, y))), p, step=1e-5)
        assert relative_error(focal_loss_grad(p, y), numeric) <= 1e-5


class TestSmoothL1:
    @pytest.mark.parametrize(("x", "expected"), [(0.5, 0.125), (1.0, 0.5), (2.0, 1.5), (-2.0, 1.5)])
    def test_fixed_points(self, x, expected):
        assert smooth_l1(x) == expected

    def test_branch_derivatives(self):
        assert smooth_l1_grad(0.5) == 0.5
        assert smooth_l1_grad(2.0) == 1.0
        assert smooth_l1_grad(-2.0) == -1.0

    def test_derivative_continuous_at_boundary(self):
        eps = 1e-6
        assert abs(smooth_l1_grad(1 - eps) - smooth_l1_grad(1 + eps)) <= 2 * eps
        assert abs(smooth_l1_grad(-1 + eps) - smooth_l1_grad(-1 - eps)) <= 2 * eps


class TestBoxRegression:
    def test_perfect_regression(self):
        assert box_regression_loss([BoxResiduals(), BoxResiduals()]) == 0.0

    def test_half_residuals(self):
        residuals = [BoxResiduals.from_array(np.full(7, 0.5))]
        assert box_regression_loss(residuals) == pytest.approx(0.875)

    def test_permutation_invariant(self, rng):
        residuals = [BoxResiduals.from_array(rng.uniform(-3, 3, 7)) for _ in range(5)]
        assert box_regression_loss(residuals) == pytest.approx(box_regression_loss(residuals[::-1]))

    def test_empty(self):
        with pytest.raises(EmptyBatchError):
            box_regression_loss([])

    def test_gradient_shape(self):
        grad = box_regression_grad([BoxResiduals(dx=2.0), BoxResiduals(dy=-0.25)])
        assert grad.shape == (2, 7)
        assert grad[0, 0] == 1.0
        assert grad[1, 1] == -0.25

    def test_heading_residual_wraps(self):
        pred = Box3D(0, 0, 0, 1, 1, 1, yaw=3.0)
        target = Box3D(0, 0, 0, 1, 1, 1, yaw=-3.0)
        assert residuals_between(pred, target).dtheta == pytest.approx(6.0 - 2 * math.pi)

    def test_size_residuals_are_raw_differences(self):
        pred = Box3D(1, 2, 3, 4.5, 2.0, 1.5)
        target = Box3D(0, 0, 0, 4.0, 1.8, 1.6)
        r = residuals_between(pred, target)
        assert (r.dx, r.dy, r.dz) == (1, 2, 3)
        assert r.dl == pytest.approx(0.5)
        assert r.dh == pytest.approx(-0.1)


class TestTotalLoss:
    def test_zero(self):
        assert total_loss(0.0, 0.0, 0.0) == 0.0

    def test_sum(self):
        assert total_loss(1.0, 2.0, 3.0) == 6.0

    def test_linearity(self):
        assert total_loss(2 * 0.5, 2 * 1.25, 2 * -0.75) == pytest.approx(2 * total_loss(0.5, 1.25, -0.75))

    def test_sum_of_independent_terms(self, rng):
        p = rng.uniform(0.05, 0.95, 16)
        y = rng.integers(2, size=16)
        l_cls = float(np.mean(focal_loss(p, y)))
        pred = Box3D(cx=10.0, cy=1.0, cz=0.8, l=4.2, w=1.7, h=1.5, yaw=0.2)
        target = Box3D(cx=10.4, cy=0.7, cz=0.75, l=4.0, w=1.8, h=1.5, yaw=-0.1)
        l_reg = box_regression_loss([residuals_between(pred, target)])
        l_contrast = icd_loss(np.array([[0.9, 0.1], [-0.2, 0.8]]), Temperature.from_tau(0.5))

        expected_cls = float(
            np.mean(
                [
                    -0.25 * (1 - q) ** 2 * math.log(q) if label else -0.75 * q**2 * math.log(1 - q)
                    for q, label in zip(p, y, strict=True)
                ]
            )
        )
        deltas = [0.4, -0.3, 0.05, 0.0, -0.1, 0.2, 0.3]
        expected_reg = sum(0.5 * d * d if abs(d) < 1 else abs(d) - 0.5 for d in deltas)
        expected_contrast = -((0.9 - 0.1) + (0.8 + 0.2)) / 0.5

        assert l_cls == pytest.approx(expected_cls, rel=1e-12)
        assert l_reg == pytest.approx(expected_reg, rel=1e-9)
        assert l_contrast == pytest.approx(expected_contrast, rel=1e-12)
        assert total_loss(l_cls, l_reg, l_contrast) == pytest.approx(expected_cls + expected_reg + expected_contrast)

    def test_nan_rejected(self):
        with pytest.raises(NonFiniteError):
            total_loss(math.nan, 0.0, 0.0)
