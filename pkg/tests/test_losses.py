"""
Tests for the training losses (grid l2, tilted, joint objective) and
for the quantile-level / forecast-bundle containers they consume.
"""
import numpy as np
import pytest

import autograd as ag
from losses import (
    ForecastBundle, QuantileLevels, head_objective, heads_for, joint_objective, l2_grid, tilted,
)
from optim import AdamState, adam_step
from tensor import ShapeError

TAUS = (0.05, 0.2, 0.5, 0.8, 0.95)


def _pinball(tau, y, q):
    r = y - q
    return np.sum(np.maximum(tau * r, (tau - 1.0) * r))


def _adam_constant_quantile(y, tau):
    """Fit one constant to ``y`` under the pinball loss with Adam."""
    q = ag.leaf(np.array([np.median(y)]), name="q")
    state = AdamState(lr=0.05)
    target = ag.constant(y)
    for step in range(2000):
        if step == 1500:
            state.lr = 1e-3
        grads = ag.backward(tilted(tau, target - q))
        adam_step(state, {"q": q}, {"q": grads[q]})
    return float(q.value[0])


def _oracle_distance(y, tau, q_fit, resolution=0.01):
    """Distance from ``q_fit`` to the set of grid minimizers of the pinball loss."""
    grid = np.arange(y.min() - resolution, y.max() + 2 * resolution, resolution)
    losses = np.array([_pinball(tau, y, g) for g in grid])
    near = grid[losses <= losses.min() + 1e-9]
    return float(np.min(np.abs(near - q_fit)))


# ==========================================================================
# QuantileLevels / ForecastBundle
# ==========================================================================

class TestQuantileLevels:
    def test_parse(self):
        q = QuantileLevels.parse("0.05, 0.2,0.8,0.95")
        assert q.levels == (0.05, 0.2, 0.8, 0.95)
        assert q.J == 4
        assert q.index(0.8) == 2

    @pytest.mark.parametrize("levels", [(), (0.0, 0.5), (0.5, 1.0), (0.2, 0.2), (0.8, 0.2)])
    def test_invalid(self, levels):
        with pytest.raises(ValueError):
            QuantileLevels(levels)

    def test_unknown_level(self):
        with pytest.raises(KeyError):
            QuantileLevels((0.1, 0.9)).index(0.5)

    def test_parse_rejects_text(self):
        with pytest.raises(ValueError, match="Invalid quantile level list"):
            QuantileLevels.parse("0.1,abc")

    def test_heads_layout(self):
        assert heads_for(None) == ["mean"]
        assert heads_for(QuantileLevels((0.1, 0.9))) == ["mean", 0.1, 0.9]


class TestForecastBundle:
    def test_from_outputs(self):
        outputs = np.arange(12.0).reshape(2, 2, 3)
        b = ForecastBundle.from_outputs(outputs, QuantileLevels((0.1, 0.9)))
        np.testing.assert_array_equal(b.mean, [[0.0, 3.0], [6.0, 9.0]])
        np.testing.assert_array_equal(b.quantile(0.9), [[2.0, 5.0], [8.0, 11.0]])

    def test_mean_only(self):
        b = ForecastBundle.from_outputs(np.ones((4, 1)))
        assert b.quantiles is None
        assert b.J == 0
        with pytest.raises(ValueError):
            b.quantile(0.5)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ForecastBundle(np.zeros((3,)), np.zeros((4, 2)))

    def test_level_count_mismatch(self):
        with pytest.raises(ShapeError):
            ForecastBundle(np.zeros(3), np.zeros((3, 2)), QuantileLevels((0.1, 0.5, 0.9)))


# ==========================================================================
# l2 / tilted
# ==========================================================================

class TestPointLosses:
    def test_l2_grid_value(self):
        y = np.array([[1.0, 2.0], [3.0, 4.0]])
        y_hat = np.array([[1.0, 1.0], [1.0, 1.0]])
        assert l2_grid(y, y_hat).item() == pytest.approx(0 + 1 + 4 + 9)

    def test_l2_shape_mismatch(self):
        with pytest.raises(ShapeError):
            l2_grid(np.zeros((2, 2)), np.zeros((2, 3)))

    @pytest.mark.parametrize("tau,r,expected", [
        (0.9, 2.0, 1.8), (0.9, -2.0, 0.2), (0.9, 0.0, 0.0), (0.1, -1.0, 0.9),
    ])
    def test_tilted_values(self, tau, r, expected):
        assert tilted(tau, np.array([r])).item() == pytest.approx(expected)

    @pytest.mark.parametrize("tau", [0.0, 1.0, -0.5])
    def test_tilted_level_range(self, tau):
        with pytest.raises(ValueError):
            tilted(tau, np.array([1.0]))


# ==========================================================================
# joint objective
# ==========================================================================

class TestJointObjective:
    def _case(self, rng):
        levels = QuantileLevels((0.1, 0.5, 0.9))
        y = rng.normal(size=(2, 3, 3))
        outputs = rng.normal(size=(2, 3, 3, 4))
        return levels, y, outputs

    def test_value(self, rng):
        levels, y, outputs = self._case(rng)
        bundle = ForecastBundle.from_outputs(outputs, levels)
        expected = np.sum((y - outputs[..., 0]) ** 2) + sum(
            _pinball(tau, y, outputs[..., 1 + j]) for j, tau in enumerate(levels))
        assert joint_objective(y, bundle, levels).item() == pytest.approx(expected)

    def test_no_levels_is_l2(self, rng):
        _, y, outputs = self._case(rng)
        bundle = ForecastBundle(outputs[..., 0])
        assert joint_objective(y, bundle, None).item() == pytest.approx(
            l2_grid(y, outputs[..., 0]).item())

    def test_head_objective_matches_joint(self, rng):
        levels, y, outputs = self._case(rng)
        joint = joint_objective(y, ForecastBundle.from_outputs(outputs, levels), levels).item()
        assert head_objective(y, outputs, ["mean", 0.1, 0.5, 0.9]).item() == pytest.approx(joint)

    def test_head_objective_quantile_only(self, rng):
        y = rng.normal(size=5)
        q = rng.normal(size=(5, 1))
        assert head_objective(y, q, [0.8]).item() == pytest.approx(_pinball(0.8, y, q[:, 0]))

    def test_head_objective_mean_must_lead(self, rng):
        with pytest.raises(ValueError):
            head_objective(rng.normal(size=3), rng.normal(size=(3, 2)), [0.5, "mean"])

    def test_head_count_mismatch(self, rng):
        with pytest.raises(ShapeError):
            head_objective(rng.normal(size=3), rng.normal(size=(3, 2)), ["mean"])

    def test_level_count_mismatch(self, rng):
        levels, y, outputs = self._case(rng)
        bundle = ForecastBundle.from_outputs(outputs[..., :3])
        with pytest.raises(ShapeError):
            joint_objective(y, bundle, levels)

    @pytest.mark.parametrize("seed", range(20))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        levels = QuantileLevels((0.05, 0.5, 0.95))
        y = rng.normal(size=(2, 2, 2))
        outputs = ag.leaf(rng.normal(size=(2, 2, 2, 4)))

        def f():
            return joint_objective(y, ForecastBundle.from_outputs(outputs, levels), levels, 0.7)

        assert ag.grad_check(f, [outputs]) < 1e-6


# ==========================================================================
# pinball minimizers agree with a grid-search oracle
# ==========================================================================

class TestPinballOracle:
    @pytest.mark.parametrize("tau", TAUS)
    def test_constant_minimizer(self, tau):
        rng = np.random.default_rng(77)
        for _ in range(3):
            y = rng.normal(size=25)
            assert _oracle_distance(y, tau, _adam_constant_quantile(y, tau)) <= 0.02


@pytest.mark.slow
@pytest.mark.parametrize("tau", TAUS)
def test_constant_minimizer_fifty_samples(tau):
    rng = np.random.default_rng(2024)
    for _ in range(50):
        y = rng.normal(size=25)
        assert _oracle_distance(y, tau, _adam_constant_quantile(y, tau)) <= 0.02
