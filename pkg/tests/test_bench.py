"""Benchmark harness tests: report shape, FLOP formula, slope fitting.

The real timing measurement lives in the acceptance suite; here the dims
are tiny so nothing takes long, and slope fitting is checked on synthetic
reports with exactly known answers.
"""

import numpy as np
import pytest

from nlroi.bench import (
    DEFAULT_DIMS,
    BenchRecord,
    BenchReport,
    attention_flops,
    fit_slope,
    run_bench,
)

SMALL_DIMS = (2, 4, 2, 2, 2)


class TestRunBench:
    def test_one_record_per_requested_n(self):
        report = run_bench([1, 2, 4], dims=SMALL_DIMS, reps=2)
        assert [r.n for r in report.records] == [1, 2, 4]

    def test_single_n_gives_single_record(self):
        report = run_bench([1], dims=SMALL_DIMS, reps=2)
        assert len(report.records) == 1
        assert report.records[0].n == 1

    def test_times_positive(self):
        report = run_bench([1, 3], dims=SMALL_DIMS, reps=3)
        assert all(r.seconds > 0 for r in report.records)

    def test_report_carries_dims_and_reps(self):
        report = run_bench([2], dims=SMALL_DIMS, reps=4)
        assert report.dims == SMALL_DIMS
        assert report.reps == 4

    def test_flop_column_n8_with_dfhw_36(self):
        # 2 * 8^2 * 36 = 4608
        dims = (3, 4, 2, 3, 3)
        assert attention_flops(8, dims) == 4608
        report = run_bench([8], dims=dims, reps=1)
        assert report.records[0].flops == 4608

    def test_flops_grow_quadratically(self):
        report = run_bench([2, 4, 8], dims=SMALL_DIMS, reps=1)
        f = [r.flops for r in report.records]
        assert f[1] == 4 * f[0] and f[2] == 16 * f[0]

    def test_empty_n_list_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            run_bench([], dims=SMALL_DIMS)

    def test_nonpositive_n_rejected(self):
        with pytest.raises(ValueError, match=">= 1"):
            run_bench([0, 2], dims=SMALL_DIMS)

    def test_descending_n_list_rejected(self):
        with pytest.raises(ValueError, match="ascending"):
            run_bench([4, 2], dims=SMALL_DIMS)

    def test_duplicate_n_rejected(self):
        with pytest.raises(ValueError, match="ascending"):
            run_bench([2, 2, 4], dims=SMALL_DIMS)

    def test_zero_reps_rejected(self):
        with pytest.raises(ValueError, match="reps"):
            run_bench([2], dims=SMALL_DIMS, reps=0)

    def test_default_dims_keep_quadratic_term_dominant(self):
        # attention flops / embedding-conv flops is N/(2D); at the small
        # end of the fit window the quadratic stage must already dominate.
        d = DEFAULT_DIMS[0]
        assert 32 / (2 * d) >= 4


class TestReportLines:
    def test_header_and_tab_separated_rows(self):
        report = run_bench([1, 2], dims=SMALL_DIMS, reps=1)
        lines = list(report.lines())
        assert lines[0] == "n\tseconds\tflops"
        assert len(lines) == 3
        for line, rec in zip(lines[1:], report.records):
            n, seconds, flops = line.split("\t")
            assert int(n) == rec.n
            assert float(seconds) == pytest.approx(rec.seconds)
            assert int(flops) == rec.flops


def synthetic_report(times_of_n):
    records = tuple(
        BenchRecord(n=n, seconds=times_of_n(n), flops=attention_flops(n, SMALL_DIMS))
        for n in (32, 45, 64, 91, 128, 181, 256)
    )
    return BenchReport(dims=SMALL_DIMS, reps=1, records=records)


class TestFitSlope:
    def test_exact_quadratic_times_give_slope_two(self):
        report = synthetic_report(lambda n: 1e-6 * n * n)
        assert fit_slope(report) == pytest.approx(2.0, abs=1e-12)

    def test_exact_linear_times_give_slope_one(self):
        report = synthetic_report(lambda n: 1e-6 * n)
        assert fit_slope(report) == pytest.approx(1.0, abs=1e-12)

    def test_power_law_recovered(self):
        report = synthetic_report(lambda n: 2.5e-7 * n**1.7)
        assert fit_slope(report) == pytest.approx(1.7, abs=1e-12)

    def test_window_filters_records(self):
        # Quadratic inside [32, 64], wildly off outside; the window must
        # exclude the outside points.
        def times(n):
            return 1e-6 * n * n if n <= 64 else 1.0

        report = synthetic_report(times)
        assert fit_slope(report, n_min=32, n_max=64) == pytest.approx(2.0, abs=1e-12)

    def test_too_few_points_in_window_rejected(self):
        report = synthetic_report(lambda n: 1e-6 * n)
        with pytest.raises(ValueError, match="two records"):
            fit_slope(report, n_min=100, n_max=101)
