"""
Training losses: grid l2, tilted (pinball) and the joint mean + quantile
objective.

All losses are plain sums over cells and levels and return scalar
``autograd`` nodes; callers divide by the batch size.
"""
from dataclasses import dataclass

import numpy as np

import autograd as ag
from tensor import ShapeError

MEAN_HEAD = "mean"


@dataclass(frozen=True)
class QuantileLevels:
    levels: tuple

    def __post_init__(self):
        levels = tuple(float(t) for t in self.levels)
        if not levels:
            raise ValueError("QuantileLevels needs at least one level")
        for tau in levels:
            if not 0.0 < tau < 1.0:
                raise ValueError(f"Quantile level {tau} is outside (0, 1)")
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValueError(f"Quantile levels must be strictly increasing: {levels}")
        object.__setattr__(self, "levels", levels)

    @classmethod
    def parse(cls, text):
        """Parse a comma-separated list such as ``"0.05,0.2,0.8,0.95"``."""
        try:
            return cls(tuple(float(t) for t in text.split(",") if t.strip()))
        except ValueError as e:
            raise ValueError(f"Invalid quantile level list {text!r}: {e}") from e

    @property
    def J(self):
        return len(self.levels)

    def index(self, tau):
        for j, level in enumerate(self.levels):
            if abs(level - tau) < 1e-12:
                return j
        raise KeyError(f"Level {tau} not in {self.levels}")

    def as_array(self):
        return np.array(self.levels)

    def __len__(self):
        return len(self.levels)

    def __iter__(self):
        return iter(self.levels)


def heads_for(levels):
    """Head layout of a joint model: mean first, then one head per level."""
    return [MEAN_HEAD] + ([] if levels is None else list(levels))


@dataclass
class ForecastBundle:
    """Mean prediction and J quantile predictions aligned on the target shape.

    ``mean`` has the target shape; ``quantiles`` adds a trailing level axis.
    Either field may be an ``autograd.Node`` (training) or an array.
    """
    mean: object
    quantiles: object = None
    levels: QuantileLevels = None

    def __post_init__(self):
        if self.quantiles is None:
            return
        q_shape = np.shape(_value(self.quantiles))
        if self.mean is not None and np.shape(_value(self.mean)) != q_shape[:-1]:
            raise ShapeError(f"Mean shape {np.shape(_value(self.mean))} does not match "
                             f"quantile shape {q_shape[:-1]}",
                             axis="spatial", expected=q_shape[:-1],
                             actual=np.shape(_value(self.mean)))
        if self.levels is not None and q_shape[-1] != self.levels.J:
            raise ShapeError(f"Bundle has {q_shape[-1]} quantile channels but "
                             f"{self.levels.J} levels",
                             axis="levels", expected=self.levels.J, actual=q_shape[-1])

    @classmethod
    def from_outputs(cls, outputs, levels=None):
        """Split network outputs (..., 1 + J): channel 0 mean, the rest quantiles."""
        n_out = outputs.shape[-1]
        if isinstance(outputs, ag.Node):
            mean = ag.take(outputs, 0)
            quantiles = ag.narrow(outputs, 1, n_out) if n_out > 1 else None
        else:
            outputs = np.asarray(outputs, dtype=np.float64)
            mean = outputs[..., 0]
            quantiles = outputs[..., 1:] if n_out > 1 else None
        return cls(mean, quantiles, levels)

    @property
    def J(self):
        return 0 if self.quantiles is None else np.shape(_value(self.quantiles))[-1]

    def to_numpy(self):
        return ForecastBundle(
            None if self.mean is None else np.array(_value(self.mean), copy=True),
            None if self.quantiles is None else np.array(_value(self.quantiles), copy=True),
            self.levels)

    def quantile(self, tau):
        """Array of predictions for one level."""
        if self.quantiles is None or self.levels is None:
            raise ValueError("Bundle has no quantile heads")
        return np.asarray(_value(self.quantiles))[..., self.levels.index(tau)]


def _value(x):
    return x.value if isinstance(x, ag.Node) else x


def _check_same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape {a.shape} does not match {b.shape}",
                         axis="target", expected=a.shape, actual=b.shape)


def _check_tau(tau):
    tau = np.asarray(tau, dtype=np.float64)
    if np.any(tau <= 0.0) or np.any(tau >= 1.0):
        raise ValueError(f"Quantile level(s) {tau} outside (0, 1)")
    return tau


def l2_grid(y, y_hat):
    """Sum of squared residuals over all cells."""
    y, y_hat = ag.as_node(y), ag.as_node(y_hat)
    _check_same_shape(y, y_hat, "l2_grid")
    return ag.total(ag.square(y - y_hat))


def tilted(tau, residual):
    """Pinball loss summed over the elements of ``residual`` (r = y - q)."""
    return ag.total(ag.tilted(residual, _check_tau(tau)))


def joint_objective(y, bundle, levels, l2_weight=1.0):
    """Squared error of the mean plus the tilted loss of every quantile head."""
    y = ag.as_node(y)
    loss = l2_weight * l2_grid(y, bundle.mean)
    if levels is None:
        return loss
    quantiles = ag.as_node(bundle.quantiles)
    if quantiles.shape[-1] != levels.J:
        raise ShapeError(f"Bundle has {quantiles.shape[-1]} quantile channels, "
                         f"expected {levels.J}",
                         axis="levels", expected=levels.J, actual=quantiles.shape[-1])
    _check_same_shape(y, ag.take(quantiles, 0), "joint_objective quantiles")
    residual = ag.reshape(y, y.shape + (1,)) - quantiles
    return loss + tilted(levels.as_array(), residual)


def head_objective(y, outputs, heads, l2_weight=1.0):
    """Objective for an arbitrary head layout (``"mean"`` or a level per channel).

    ``["mean"]`` is plain l2, ``[tau]`` a single pinball task, and
    ``["mean", t1, ..., tJ]`` the joint objective.
    """
    y, outputs = ag.as_node(y), ag.as_node(outputs)
    if outputs.shape[-1] != len(heads):
        raise ShapeError(f"Model has {outputs.shape[-1]} outputs but {len(heads)} heads",
                         axis="heads", expected=len(heads), actual=outputs.shape[-1])
    if heads and heads[0] == MEAN_HEAD:
        levels = QuantileLevels(tuple(heads[1:])) if len(heads) > 1 else None
        return joint_objective(y, ForecastBundle.from_outputs(outputs), levels, l2_weight)
    if MEAN_HEAD in heads:
        raise ValueError(f"The mean head must come first: {heads}")
    taus = _check_tau(np.array(heads, dtype=np.float64))
    residual = ag.reshape(y, y.shape + (1,)) - outputs
    return tilted(taus, residual)
