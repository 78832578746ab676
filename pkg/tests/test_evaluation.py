"""
Tests for the forecast metrics, repeat aggregation and report emission.
"""
import json

import numpy as np
import pytest

from evaluation import (
    IntervalMetrics, MetricsReport, aggregate_repeats, crossing_metrics, evaluate_bundle,
    format_table, interval_label, interval_metrics, oracle_tilted_loss, point_metrics,
    read_report_json, table_columns, tilted_test_loss, write_report_csv, write_report_json,
)
from losses import ForecastBundle, QuantileLevels
from tensor import ShapeError

LEVELS = QuantileLevels((0.05, 0.2, 0.8, 0.95))


def _report(model, mae, icp=0.9):
    return MetricsReport(model, mae, mae * 2, 1.0, 0.0, 0,
                         [IntervalMetrics(0.05, 0.95, icp, 2.0)])


# ==========================================================================
# point / quantile metrics
# ==========================================================================

class TestMetrics:
    def test_point_metrics(self):
        mae, rmse = point_metrics([1.0, 2.0, 3.0], [1.0, 2.0, 5.0])
        assert mae == pytest.approx(2.0 / 3.0)
        assert rmse == pytest.approx(np.sqrt(4.0 / 3.0))

    def test_point_metrics_shape_mismatch(self):
        with pytest.raises(ShapeError):
            point_metrics(np.zeros(3), np.zeros(4))

    def test_point_metrics_empty(self):
        with pytest.raises(ValueError):
            point_metrics([], [])

    def test_tilted_test_loss(self):
        levels = QuantileLevels((0.1, 0.9))
        bundle = ForecastBundle(np.zeros(2), np.array([[0.0, 1.0], [-1.0, 0.0]]), levels)
        # residuals: y=[1, -2] -> (1, 0) and (-1, -2)
        expected = 0.1 * 1.0 + 0.0 + 0.9 * 1.0 + 0.1 * 2.0
        assert tilted_test_loss(bundle, np.array([1.0, -2.0]), levels) == pytest.approx(expected)

    def test_crossings_count_adjacent_strict_inversions(self):
        bundle = ForecastBundle(np.zeros(1), np.array([[0.0, 1.0, 0.5, 2.0]]), LEVELS)
        loss, crosses = crossing_metrics(bundle, LEVELS)
        assert loss == pytest.approx(0.5)
        assert crosses == 1

    def test_ties_are_not_crossings(self):
        levels = QuantileLevels((0.1, 0.5, 0.9))
        bundle = ForecastBundle(np.zeros(1), np.array([[1.0, 1.0, 2.0]]), levels)
        assert crossing_metrics(bundle, levels) == (0.0, 0)

    def test_crossing_loss_ignores_a_common_shift(self, rng):
        q = rng.normal(size=(50, 4))
        base = crossing_metrics(ForecastBundle(np.zeros(50), q, LEVELS), LEVELS)
        shifted = crossing_metrics(ForecastBundle(np.zeros(50), q + 3.7, LEVELS), LEVELS)
        assert shifted[0] == pytest.approx(base[0], rel=1e-12)
        assert shifted[1] == base[1]

    def test_crossings_use_adjacent_pairs_only(self):
        q = np.array([[3.0, 2.0, 1.0, 0.0]])
        loss, crosses = crossing_metrics(ForecastBundle(np.zeros(1), q, LEVELS), LEVELS)
        all_pairs = sum(max(0.0, q[0, i] - q[0, j]) for i in range(4) for j in range(i + 1, 4))
        assert (loss, crosses) == (3.0, 3)
        assert all_pairs == 10.0

    def test_crossings_need_two_levels(self):
        levels = QuantileLevels((0.5,))
        with pytest.raises(ValueError):
            crossing_metrics(ForecastBundle(np.zeros(1), np.zeros((1, 1)), levels), levels)

    def test_interval_bounds_are_inclusive(self):
        icp, mil = interval_metrics([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [0.0, 1.0, 1.5])
        assert icp == pytest.approx(2.0 / 3.0)
        assert mil == pytest.approx(1.0)

    def test_coverage_survives_monotone_relabeling(self, rng):
        lower = rng.integers(-20, 10, 200) / 8.0
        upper = lower + rng.integers(0, 16, 200) / 8.0
        y = rng.integers(-20, 26, 200) / 8.0

        def relabel(v):
            return v ** 3 + v

        icp, _ = interval_metrics(lower, upper, y)
        assert interval_metrics(relabel(lower), relabel(upper), relabel(y))[0] == icp

    def test_interval_length_mismatch(self):
        with pytest.raises(ShapeError):
            interval_metrics([0.0], [1.0, 2.0], [0.5])

    @pytest.mark.parametrize("pair,label", [((0.05, 0.95), "90%"), ((0.2, 0.8), "60%"),
                                            ((0.1, 0.9), "80%")])
    def test_interval_labels(self, pair, label):
        assert interval_label(*pair) == label

    def test_oracle_loss_matches_bundle_loss(self, rng):
        y = rng.normal(size=(5, 2, 2))
        q = np.sort(rng.normal(size=(5, 2, 2, 4)), axis=-1)
        bundle = ForecastBundle(y * 0.0, q, LEVELS)
        assert oracle_tilted_loss(q, y, LEVELS) == pytest.approx(tilted_test_loss(bundle, y, LEVELS))


# ==========================================================================
# evaluate_bundle
# ==========================================================================

class TestEvaluateBundle:
    def test_full_report(self, rng):
        y = rng.normal(size=50)
        q = np.stack([y - 2, y - 1, y + 1, y + 2], axis=-1)
        report = evaluate_bundle("m", ForecastBundle(y, q, LEVELS), y, LEVELS,
                                 [(0.05, 0.95), (0.2, 0.8)])
        assert report.mae == 0.0
        assert report.num_crosses == 0
        assert [iv.label for iv in report.intervals] == ["90%", "60%"]
        assert report.intervals[0].icp == 1.0
        assert report.intervals[0].mil == pytest.approx(4.0)

    def test_mean_only(self):
        report = evaluate_bundle("m", ForecastBundle(np.ones(3)), np.zeros(3))
        assert report.mae == 1.0
        assert report.tilted_total is None

    def test_mean_only_rejects_intervals(self):
        with pytest.raises(ValueError, match="no quantile heads"):
            evaluate_bundle("m", ForecastBundle(np.ones(3)), np.zeros(3), None, [(0.05, 0.95)])

    def test_interval_level_missing(self):
        with pytest.raises(ValueError):
            evaluate_bundle("m", ForecastBundle(np.zeros(2), np.zeros((2, 4)), LEVELS),
                            np.zeros(2), LEVELS, [(0.1, 0.9)])


# ==========================================================================
# aggregation
# ==========================================================================

class TestAggregate:
    def test_mean_and_sample_std(self):
        out = aggregate_repeats([_report("m", 1.0, 0.8), _report("m", 3.0, 1.0)])
        assert out.mae == pytest.approx(2.0)
        assert out.std["mae"] == pytest.approx(np.sqrt(2.0))
        assert out.intervals[0].icp == pytest.approx(0.9)
        assert out.intervals[0].icp_std == pytest.approx(np.std([0.8, 1.0], ddof=1))
        assert out.n_repeats == 2

    def test_single_report_has_zero_std(self):
        out = aggregate_repeats([_report("m", 1.0)])
        assert out.std["mae"] == 0.0
        assert out.intervals[0].icp_std == 0.0

    def test_missing_fields_must_agree(self):
        partial = MetricsReport("m", 1.0, 1.0)
        with pytest.raises(ValueError):
            aggregate_repeats([_report("m", 1.0), partial])

    def test_empty(self):
        with pytest.raises(ValueError):
            aggregate_repeats([])


# ==========================================================================
# emission
# ==========================================================================

class TestEmission:
    def test_json_round_trip(self, tmp_path):
        reports = [aggregate_repeats([_report("a", 1.0), _report("a", 2.0)])]
        path = tmp_path / "report.json"
        write_report_json(path, reports)
        back = read_report_json(path)
        assert back[0].to_dict() == reports[0].to_dict()
        assert json.loads(path.read_text(encoding="utf-8"))["reports"][0]["model"] == "a"

    def test_columns(self):
        columns = table_columns([_report("a", 1.0), MetricsReport("b", 1.0, 1.0)])
        assert columns == ["MAE", "RMSE", "Tilted Loss", "Crossing Loss", "Num. Crosses",
                           "ICP 90%", "MIL 90%"]

    def test_csv(self, tmp_path):
        path = tmp_path / "report.csv"
        write_report_csv(path, [_report("a", 1.0), MetricsReport("Linear", 0.5, 0.7)])
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0].startswith("Model,Repeats,MAE,MAE std,RMSE")
        assert "ICP 90%" in lines[0]
        assert lines[2].startswith("Linear,1,0.5,,0.7,")

    def test_table_shows_spread_for_repeats(self):
        agg = aggregate_repeats([_report("a", 1.0), _report("a", 2.0)])
        text = format_table([agg, MetricsReport("Linear", 0.5, 0.7)])
        assert "1.500 (± 0.707)" in text
        assert text.splitlines()[2].endswith("| -")
