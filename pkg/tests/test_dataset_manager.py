"""
Tests for dataset loading, synthetic generators, windowing, splitting,
standardization and dataset persistence.
"""
import logging

import numpy as np
import pytest
from scipy.stats import norm

from dataset_manager import (
    DatasetParseError, SeriesDataset, Standardizer, SynthParams, load_dataset, load_motorcycle,
    pairs_dataset, save_dataset, split, split_counts, standardize, synth_grid_series,
    synth_motorcycle, window,
)


def _write_csv(path, rows, header=True):
    lines = (["times,accel"] if header else []) + [",".join(str(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _marker_series(T):
    """Grid series whose value at step t is t."""
    return SeriesDataset(np.arange(T, dtype=float).reshape(T, 1, 1))


# ==========================================================================
# motorcycle CSV
# ==========================================================================

class TestLoadMotorcycle:
    def test_reads_133_records(self, tmp_path, caplog):
        rows = [(2.4 + 0.4 * i, -float(i % 7)) for i in range(133)]
        path = _write_csv(tmp_path / "mcycle.csv", rows)
        with caplog.at_level(logging.WARNING):
            ds = load_motorcycle(path)
        assert len(ds) == 133
        assert ds.kind == "pairs"
        assert ds.inputs[0] == pytest.approx(2.4)
        assert "expected 133" not in caplog.text

    def test_headerless_file(self, tmp_path):
        ds = load_motorcycle(_write_csv(tmp_path / "m.csv", [(1, 2), (3, 4)], header=False))
        np.testing.assert_array_equal(ds.targets, [2.0, 4.0])

    def test_unexpected_count_warns(self, tmp_path, caplog):
        path = _write_csv(tmp_path / "m.csv", [(i, i) for i in range(10)])
        with caplog.at_level(logging.WARNING):
            load_motorcycle(path)
        assert "expected 133" in caplog.text

    def test_malformed_row_reports_line(self, tmp_path):
        path = _write_csv(tmp_path / "m.csv", [(1, 2), (3, "oops"), (5, 6)])
        with pytest.raises(DatasetParseError) as exc:
            load_motorcycle(path)
        assert exc.value.line == 3
        assert str(exc.value).startswith("line 3:")

    def test_short_row(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("1,2\n3\n", encoding="utf-8")
        with pytest.raises(DatasetParseError) as exc:
            load_motorcycle(path)
        assert exc.value.line == 2

    def test_non_finite_value(self, tmp_path):
        path = _write_csv(tmp_path / "m.csv", [(1, 2), (3, "nan")])
        with pytest.raises(DatasetParseError):
            load_motorcycle(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("times,accel\n", encoding="utf-8")
        with pytest.raises(DatasetParseError):
            load_motorcycle(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_motorcycle(tmp_path / "absent.csv")


class TestSynthMotorcycle:
    def test_shape_and_order(self):
        ds = synth_motorcycle(0)
        assert len(ds) == 133
        assert np.all(np.diff(ds.inputs) >= 0)
        assert 2.4 <= ds.inputs.min() and ds.inputs.max() <= 57.6

    def test_deterministic(self):
        np.testing.assert_array_equal(synth_motorcycle(3).targets, synth_motorcycle(3).targets)
        assert not np.array_equal(synth_motorcycle(3).targets, synth_motorcycle(4).targets)


# ==========================================================================
# synthetic grids
# ==========================================================================

class TestSynthGrid:
    def test_shapes_and_determinism(self):
        a, oracle = synth_grid_series(7, 3, 4, 50)
        b, _ = synth_grid_series(7, 3, 4, 50)
        assert a.targets.shape == (50, 3, 4)
        assert oracle.signal.shape == (50, 3, 4)
        np.testing.assert_array_equal(a.targets, b.targets)

    @pytest.mark.parametrize("extents", [(0, 2, 10), (2, 0, 10), (2, 2, 0)])
    def test_non_positive_extent(self, extents):
        with pytest.raises(ValueError):
            synth_grid_series(0, *extents)

    def test_noise_free_series_equals_every_quantile(self):
        ds, oracle = synth_grid_series(1, 2, 2, 30, SynthParams(noise=0.0))
        np.testing.assert_array_equal(ds.targets, oracle.signal)
        for tau in (0.05, 0.5, 0.95):
            np.testing.assert_allclose(oracle.quantile(tau), oracle.signal)

    def test_median_is_signal_and_levels_are_ordered(self):
        _, oracle = synth_grid_series(1, 2, 3, 40)
        np.testing.assert_array_equal(oracle.quantile(0.5), oracle.signal)
        stacked = oracle.at((0.05, 0.1, 0.9, 0.95), np.arange(40))
        assert stacked.shape == (40, 2, 3, 4)
        assert np.all(np.diff(stacked, axis=-1) > 0)

    def test_day_and_night_regimes(self):
        _, oracle = synth_grid_series(0, 1, 1, 48)
        day, night = oracle.scale[:24, 0, 0], oracle.scale[24:, 0, 0]
        np.testing.assert_allclose(day, 2.5)
        np.testing.assert_allclose(night, 1.0)

    def test_oracle_quantile_matches_empirical(self):
        _, oracle = synth_grid_series(2, 2, 2, 10)
        s, g = oracle.signal[3, 1, 0], oracle.scale[3, 1, 0]
        draws = s + g * np.random.default_rng(0).standard_normal(1_000_000)
        assert np.quantile(draws, 0.9) == pytest.approx(oracle.quantile(0.9, 3)[1, 0], abs=0.01 * g)
        assert oracle.quantile(0.9, 3)[1, 0] == pytest.approx(s + g * norm.ppf(0.9), abs=1e-8)


# ==========================================================================
# splitting
# ==========================================================================

class TestSplit:
    def test_counts(self):
        assert split_counts(100, (0.5, 0.25, 0.25)) == [50, 25, 25]
        assert split_counts(133, (2 / 3, 0.0, 1 / 3)) == [89, 0, 44]

    def test_chronological_order(self):
        idx = split(100, (0.5, 0.25, 0.25))
        np.testing.assert_array_equal(idx["train"], np.arange(50))
        np.testing.assert_array_equal(idx["test"], np.arange(75, 100))

    def test_random_partition(self, rng):
        idx = split(40, (0.5, 0.25, 0.25), chronological=False, rng=rng)
        joined = np.sort(np.concatenate(list(idx.values())))
        np.testing.assert_array_equal(joined, np.arange(40))
        assert np.all(np.diff(idx["train"]) > 0)

    def test_random_needs_rng(self):
        with pytest.raises(ValueError):
            split(10, (0.5, 0.5, 0.0), chronological=False)

    @pytest.mark.parametrize("fractions", [(0.5, 0.5, 0.5), (-0.1, 0.6, 0.5)])
    def test_bad_fractions(self, fractions):
        with pytest.raises(ValueError):
            split_counts(10, fractions)

    def test_positive_fraction_yielding_empty_split(self):
        with pytest.raises(ValueError, match="empty"):
            split_counts(3, (0.9, 0.05, 0.05))

    def test_pairs_dataset(self, rng):
        wds = pairs_dataset(synth_motorcycle(0), (2 / 3, 0.0, 1 / 3), rng)
        assert [len(wds.split(n)) for n in ("train", "val", "test")] == [89, 0, 44]
        with pytest.raises(KeyError):
            wds.split("holdout")


# ==========================================================================
# windowing
# ==========================================================================

class TestWindow:
    def test_minimal_series_gives_one_window(self):
        wds = window(_marker_series(5), 3, 2)
        assert len(wds.split("train")) == 1

    def test_window_contents(self):
        wds = window(_marker_series(20), 4, 2)
        train = wds.split("train")
        assert len(train) == 20 - 4 - 2 + 1
        for inputs, target in zip(train.inputs[..., 0, 0], train.targets[:, 0, 0]):
            np.testing.assert_array_equal(inputs, np.arange(target - 2 - 3, target - 1))

    def test_too_short(self):
        with pytest.raises(ValueError, match="too short"):
            window(_marker_series(4), 3, 2)

    @pytest.mark.parametrize("L,k", [(0, 1), (2, 0)])
    def test_invalid_lengths(self, L, k):
        with pytest.raises(ValueError):
            window(_marker_series(10), L, k)

    def test_no_window_straddles_splits(self):
        wds = window(_marker_series(100), 5, 2, (0.5, 0.25, 0.25))
        bounds = {"train": (0, 50), "val": (50, 75), "test": (75, 100)}
        for name, (lo, hi) in bounds.items():
            s = wds.split(name)
            assert s.inputs.min() >= lo
            assert s.targets.max() < hi
            assert len(s) == (hi - lo) - 5 - 2 + 1

    def test_segment_shorter_than_window(self):
        with pytest.raises(ValueError, match="shorter than one window"):
            window(_marker_series(20), 4, 2, (0.6, 0.2, 0.2))

    def test_pairs_rejected(self):
        with pytest.raises(ValueError):
            window(synth_motorcycle(0), 2, 1)


# ==========================================================================
# standardization
# ==========================================================================

class TestStandardize:
    def test_train_statistics(self):
        ds, _ = synth_grid_series(0, 2, 2, 200)
        data, y_std, x_std = standardize(window(ds, 4, 1, (0.6, 0.2, 0.2)))
        train = data.split("train")
        np.testing.assert_allclose(train.targets.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(train.targets.std(axis=0), 1.0, atol=1e-12)
        assert x_std is y_std

    def test_round_trip(self, rng):
        values = rng.normal(5.0, 3.0, size=(50, 3))
        s = Standardizer.fit(values)
        np.testing.assert_allclose(s.inverse(s.transform(values)), values, atol=1e-12)

    def test_affine_invariance(self, rng):
        values = rng.normal(size=(40, 2, 2))
        shifted = 3.5 * values - 7.0
        np.testing.assert_allclose(Standardizer.fit(shifted).transform(shifted),
                                   Standardizer.fit(values).transform(values), atol=1e-12)

    def test_zero_variance_names_cell(self):
        values = np.ones((5, 2, 2))
        values[:, 0, 0] = np.arange(5)
        with pytest.raises(ValueError, match=r"cell \(0, 1\)"):
            Standardizer.fit(values, "train targets")

    def test_inverse_bundle(self, rng):
        from losses import ForecastBundle, QuantileLevels
        s = Standardizer(np.array([1.0, 2.0]), np.array([2.0, 4.0]))
        bundle = ForecastBundle(np.zeros((3, 2)), np.ones((3, 2, 2)), QuantileLevels((0.1, 0.9)))
        back = s.inverse_bundle(bundle)
        np.testing.assert_allclose(back.mean, np.tile([1.0, 2.0], (3, 1)))
        np.testing.assert_allclose(back.quantiles[..., 1], np.tile([3.0, 6.0], (3, 1)))

    def test_dict_round_trip(self):
        s = Standardizer(np.array([1.0, 2.0]), np.array([0.5, 4.0]))
        back = Standardizer.from_dict(s.to_dict())
        np.testing.assert_array_equal(back.mean, s.mean)
        np.testing.assert_array_equal(back.std, s.std)


# ==========================================================================
# persistence
# ==========================================================================

class TestPersistence:
    @pytest.mark.parametrize("compress", [False, True])
    def test_grid_round_trip(self, tmp_path, compress):
        ds, oracle = synth_grid_series(3, 2, 3, 25)
        save_dataset(tmp_path, ds, oracle, {"preset": "taxi"}, compress)
        back, back_oracle, sidecar = load_dataset(tmp_path)
        np.testing.assert_array_equal(back.targets, ds.targets)
        np.testing.assert_array_equal(back_oracle.scale, oracle.scale)
        assert sidecar["preset"] == "taxi"
        assert sidecar["shape"] == [25, 2, 3]

    def test_pairs_round_trip(self, tmp_path):
        ds = synth_motorcycle(1)
        save_dataset(tmp_path, ds)
        back, oracle, _ = load_dataset(tmp_path)
        assert oracle is None
        assert back.kind == "pairs"
        np.testing.assert_array_equal(back.inputs, ds.inputs)

    def test_missing_sidecar(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path)
