"""Tests for the finite-difference gradient checker."""

from __future__ import annotations

import numpy as np
import pytest

from bevlab.errors import GradientCheckError
from bevlab.gradcheck import (
    GradCheckResult,
    assert_all_passed,
    central_difference,
    check_gradient,
    relative_error,
    run_gradcheck,
)


def square(x: np.ndarray) -> float:
    return float(np.sum(x**2))


class TestCentralDifference:
    def test_square(self, rng):
        x = rng.standard_normal(6)
        assert np.allclose(central_difference(square, x), 2 * x, atol=1e-8)

    def test_input_untouched(self):
        x = np.array([1.0, 2.0])
        central_difference(square, x)
        assert x.tolist() == [1.0, 2.0]

    def test_relative_error_scale(self):
        assert relative_error(np.array([1.0, 2.1]), np.array([1.0, 2.0])) == pytest.approx(0.05)
        assert relative_error(np.zeros(3), np.zeros(3)) == 0.0


class TestCheckGradient:
    def test_correct_gradient_passes(self, rng):
        cases = [(square, lambda x: 2 * x, rng.standard_normal(4)) for _ in range(3)]
        result = check_gradient("square", cases)
        assert result.passed
        assert result.cases == 3

    def test_sign_flip_is_caught(self, rng):
        cases = [(square, lambda x: -2 * x, rng.standard_normal(4))]
        result = check_gradient("square", cases)
        assert not result.passed
        assert result.max_rel_err == pytest.approx(2.0, rel=1e-6)
        with pytest.raises(GradientCheckError, match="square"):
            assert_all_passed([result])

    def test_row(self):
        row = GradCheckResult("focal_loss.beta_hat", 3e-6, 20, 1e-4).to_row()
        assert row == {"gradient": "focal_loss.beta_hat", "max_rel_err": 3e-6, "cases": 20, "passed": True}


class TestRunGradcheck:
    def test_every_gradient_checked_and_passes(self):
        results = run_gradcheck(cases=3, seed=0)
        names = [r.name for r in results]
        assert len(names) == len(set(names)) == 11
        assert all(r.cases == 3 for r in results)
        assert_all_passed(results)
