"""Tests for the attention scaling benchmark."""

from __future__ import annotations

import logging

import numpy as np
import pytest

from bevlab.bench import (
    BenchRow,
    BenchSummary,
    bench_report,
    clfm_bench,
    fit_loglog_slope,
    fusion_scheme_timing,
    median_ns,
)
from bevlab.errors import ValidationError


class TestSlopeFit:
    def test_quadratic_data(self):
        lengths = [1024, 4096, 16384]
        assert fit_loglog_slope(lengths, [3.0 * n**2 for n in lengths]) == pytest.approx(2.0)

    def test_linear_data(self):
        lengths = [10, 100, 1000]
        assert fit_loglog_slope(lengths, [7.0 * n for n in lengths]) == pytest.approx(1.0)

    def test_needs_two_points(self):
        with pytest.raises(ValidationError):
            fit_loglog_slope([1024], [5.0])


class TestMedianNs:
    def test_runs_warmup_then_trials(self):
        calls = []
        median_ns(lambda: calls.append(1), trials=3, warmup=2)
        assert len(calls) == 5

    def test_parallel_trials(self):
        calls = []
        assert median_ns(lambda: calls.append(1), trials=4, warmup=0, parallel=True) >= 0
        assert len(calls) == 4


class TestBenchRows:
    def test_speedup(self):
        row = BenchRow(length=1024, linear_ns=100, quadratic_ns=2500)
        assert row.speedup == 25.0
        assert row.to_row()["speedup"] == 25.0

    def test_skipped_quadratic_is_blank(self):
        row = BenchRow(length=65536, linear_ns=100)
        assert row.speedup is None
        assert row.to_row()["quadratic_ns"] == ""

    def test_summary_slopes(self):
        rows = [BenchRow(n, n, n * n) for n in (64, 128, 256)] + [BenchRow(512, 512)]
        summary = BenchSummary(rows=rows, channels=16, heads=4, trials=3)
        assert summary.linear_slope == pytest.approx(1.0)
        assert summary.quadratic_slope == pytest.approx(2.0)
        assert summary.speedup_at(128) == 128.0
        assert summary.speedup_at(999) is None
        report = bench_report(summary)
        assert report.final == {"linear_slope": 1.0, "quadratic_slope": 2.0}
        assert len(report.rows) == 4


class TestClfmBench:
    def test_too_few_trials(self):
        with pytest.raises(ValidationError):
            clfm_bench(lengths=(16, 32), trials=2)

    def test_small_run(self, caplog):
        with caplog.at_level(logging.WARNING):
            summary = clfm_bench(lengths=(32, 16), channels=8, heads=2, trials=3, quadratic_max_length=16)
        assert [r.length for r in summary.rows] == [16, 32]
        assert summary.rows[0].quadratic_ns is not None
        assert summary.rows[1].quadratic_ns is None
        assert "Skipping quadratic order" in caplog.text

    def test_fusion_scheme_timing(self):
        rows = fusion_scheme_timing(grids=(4,), channels=8, heads=2, trials=3)
        assert sorted(r["scheme"] for r in rows) == ["ca", "clfm", "conv", "sa"]
        assert all(r["median_ns"] >= 0 for r in rows)


@pytest.mark.slow
class TestScaling:
    def test_complexity_claim(self):
        summary = clfm_bench(lengths=(1024, 4096, 16384, 65536), channels=16, heads=4, trials=5)
        assert summary.linear_slope <= 1.2
        assert summary.quadratic_slope >= 1.8
        assert summary.speedup_at(16384) >= 10.0
        assert np.isfinite([r.linear_ns for r in summary.rows]).all()
