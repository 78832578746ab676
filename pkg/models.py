"""
Model families and the fitting / prediction operations built on them.

  JointMLP            dense stack for 1-D problems (in -> 50 tanh -> 10 -> 1+J)
  DeepJMQRNet         stacked ConvLSTM + dropout + shared 1x1 multi-head output
  LinearModel         linear regression / linear quantile regression on lag features
  IndependentEnsemble 1+J single-output models presented as one predictor
  MCDropoutPredictor  mean-only network + MC dropout + Gaussian intervals

Every model exposes ``heads`` (``"mean"`` or a level per output channel),
``forward(x, mode, rng)`` returning an ``autograd.Node`` shaped
``target_shape + (len(heads),)``, ``named_parameters`` and ``descriptor``.
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

import autograd as ag
from constants import DEFAULT_MC_SAMPLES, GAL_GRID_SIZE, GAL_GRID_SPAN, MOTORCYCLE_HIDDEN
from layers import ConvLSTMLayer, DenseLayer, Module, MultiHeadOutput, convlstm_unroll, dropout
from losses import MEAN_HEAD, ForecastBundle, heads_for
from optim import train
from tensor import ShapeError

PPF_TOL = 1e-10


def _clean_heads(heads):
    out = []
    for h in heads:
        out.append(MEAN_HEAD if h == MEAN_HEAD else float(h))
    if not out:
        raise ValueError("A model needs at least one head")
    return out


class JointMLP(Module):
    family = "joint_mlp"

    def __init__(self, heads, n_inputs=1, hidden=MOTORCYCLE_HIDDEN,
                 activations=("tanh", "linear"), keep=1.0, seed=0):
        super().__init__()
        if len(hidden) != len(activations):
            raise ValueError(f"hidden {hidden} and activations {activations} differ in length")
        self.heads = _clean_heads(heads)
        self.n_inputs, self.hidden = n_inputs, tuple(hidden)
        self.activations, self.keep, self.seed = tuple(activations), keep, seed
        rng = np.random.default_rng(seed)
        self.layers = []
        width = n_inputs
        for i, (units, act) in enumerate(zip(self.hidden, self.activations)):
            self.layers.append(self._add_child(f"dense{i}", DenseLayer(width, units, act, rng)))
            width = units
        self.output = self._add_child("output", DenseLayer(width, len(self.heads), "linear", rng))

    def forward(self, x, mode="eval", rng=None):
        x = np.asarray(x, dtype=np.float64)
        h = ag.constant(x.reshape(x.shape[0], -1))
        for layer in self.layers:
            h = dropout(layer.forward(h), self.keep, mode, rng)
        return self.output.forward(h)

    def descriptor(self):
        return {"family": self.family, "heads": self.heads, "n_inputs": self.n_inputs,
                "hidden": list(self.hidden), "activations": list(self.activations),
                "keep": self.keep, "seed": self.seed}


class DeepJMQRNet(Module):
    family = "deepjmqr"

    def __init__(self, heads, in_channels=1, filters=(16,), kernel_size=(3, 3), keep=0.8,
                 output_gate_source="cell", seed=0):
        super().__init__()
        if not filters:
            raise ValueError("DeepJMQRNet needs at least one ConvLSTM layer")
        self.heads = _clean_heads(heads)
        self.in_channels, self.filters = in_channels, tuple(filters)
        self.kernel_size, self.keep = tuple(kernel_size), keep
        self.output_gate_source, self.seed = output_gate_source, seed
        rng = np.random.default_rng(seed)
        self.stack = []
        width = in_channels
        for i, S in enumerate(self.filters):
            self.stack.append(self._add_child(f"convlstm{i}", ConvLSTMLayer(
                width, S, self.kernel_size, rng, output_gate_source)))
            width = S
        self.head = self._add_child("head", MultiHeadOutput(width, len(self.heads), rng))

    def forward(self, x, mode="eval", rng=None):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 4:
            x = x[..., None]
        if x.ndim != 5 or x.shape[-1] != self.in_channels:
            raise ShapeError(f"DeepJMQRNet expects (B, L, M, N, {self.in_channels}), got {x.shape}",
                             axis="input", expected=self.in_channels, actual=x.shape)
        hidden = convlstm_unroll(self.stack, x, self.keep, mode, rng)
        return self.head.forward(dropout(hidden, self.keep, mode, rng))

    def descriptor(self):
        return {"family": self.family, "heads": self.heads, "in_channels": self.in_channels,
                "filters": list(self.filters), "kernel_size": list(self.kernel_size),
                "keep": self.keep, "output_gate_source": self.output_gate_source,
                "seed": self.seed}


def lag_features(x):
    """Flatten inputs into per-target feature rows.

    (B,) and (B, F) are 1-D problems; (B, L, M, N[, C]) windows become
    (B, M, N, L*C): every cell is described by its own lags, which makes
    the linear model an autoregression shared across cells.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[:, None]
    if x.ndim == 2:
        return x
    if x.ndim == 4:
        x = x[..., None]
    if x.ndim != 5:
        raise ShapeError(f"Cannot build lag features from shape {x.shape}",
                         axis="input", expected="1, 2, 4 or 5 dims", actual=x.ndim)
    b, lags, m, n, c = x.shape
    return x.transpose(0, 2, 3, 1, 4).reshape(b, m, n, lags * c)


class LinearModel(Module):
    """Linear predictor on standardized lag features for one task."""
    family = "linear"

    def __init__(self, heads, n_features, kept=None, feature_mean=None, feature_std=None,
                 seed=0, intercept=0.0):
        super().__init__()
        self.heads = _clean_heads(heads)
        if len(self.heads) != 1:
            raise ValueError(f"LinearModel fits one task, got heads {self.heads}")
        self.n_features, self.seed = n_features, seed
        self.kept = list(range(n_features)) if kept is None else [int(k) for k in kept]
        n_kept = len(self.kept)
        self.feature_mean = np.zeros(n_kept) if feature_mean is None else np.asarray(feature_mean, dtype=np.float64)
        self.feature_std = np.ones(n_kept) if feature_std is None else np.asarray(feature_std, dtype=np.float64)
        rng = np.random.default_rng(seed)
        self.weights = self._add_param("weights", rng.normal(0.0, 0.01, (n_kept, 1))) if n_kept else None
        self.intercept = self._add_param("intercept", np.full(1, float(intercept)))

    def features(self, x):
        feats = lag_features(x)
        if feats.shape[-1] != self.n_features:
            raise ShapeError(f"Linear model expects {self.n_features} features, got {feats.shape[-1]}",
                             axis="features", expected=self.n_features, actual=feats.shape[-1])
        return (feats[..., self.kept] - self.feature_mean) / self.feature_std

    def forward(self, x, mode="eval", rng=None):
        feats = self.features(x)
        if self.weights is None:
            zeros = ag.constant(np.zeros(feats.shape[:-1] + (1,)))
            return zeros + self.intercept
        return ag.constant(feats) @ self.weights + self.intercept

    def coefficients(self):
        """(weights over all features, intercept) on the raw feature scale."""
        w = np.zeros(self.n_features)
        b = float(self.intercept.value[0])
        if self.weights is not None:
            scaled = self.weights.value[:, 0] / self.feature_std
            w[self.kept] = scaled
            b -= float(np.dot(scaled, self.feature_mean))
        return w, b

    def descriptor(self):
        return {"family": self.family, "heads": self.heads, "n_features": self.n_features,
                "kept": self.kept, "feature_mean": self.feature_mean.tolist(),
                "feature_std": self.feature_std.tolist(), "seed": self.seed}


class IndependentEnsemble(Module):
    """Single-output models whose outputs are concatenated head by head."""
    family = "independent"

    def __init__(self, members):
        super().__init__()
        if not members:
            raise ValueError("IndependentEnsemble needs at least one member")
        self.members = list(members)
        for i, m in enumerate(self.members):
            if len(m.heads) != 1:
                raise ValueError(f"Member {i} has {len(m.heads)} heads; expected 1")
            self._add_child(f"member{i}", m)
        self.heads = [m.heads[0] for m in self.members]

    def forward(self, x, mode="eval", rng=None):
        return ag.concat([m.forward(x, mode, rng) for m in self.members], axis=-1)

    def descriptor(self):
        return {"family": self.family, "heads": self.heads,
                "members": [m.descriptor() for m in self.members]}


@dataclass
class MCDropoutPredictor:
    network: object
    n_samples: int = DEFAULT_MC_SAMPLES
    sigma2: float = 0.0
    calibration: str = "zhu"

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError(f"MC dropout needs at least 2 samples, got {self.n_samples}")
        if self.sigma2 < 0:
            raise ValueError(f"sigma2 must be >= 0, got {self.sigma2}")
        if self.network.heads != [MEAN_HEAD]:
            raise ValueError(f"MC dropout needs a mean-only network, got heads {self.network.heads}")

    @property
    def heads(self):
        return self.network.heads

    def descriptor(self):
        return {"family": "mc_dropout", "heads": self.heads, "n_samples": self.n_samples,
                "sigma2": self.sigma2, "calibration": self.calibration,
                "network": self.network.descriptor()}


def mc_moments(predictor, x, rng):
    """Sample mean and spread (mean squared deviation) over S_MC dropout passes."""
    passes = np.stack([predictor.network.forward(x, mode="mc", rng=rng).value[..., 0]
                       for _ in range(predictor.n_samples)])
    mean = passes.mean(axis=0)
    spread = np.mean((passes - mean) ** 2, axis=0)
    return mean, spread


def mc_predict(predictor, x, rng):
    """Predictive mean and variance: E = mean of passes, V = sigma2 + spread."""
    mean, spread = mc_moments(predictor, x, rng)
    return mean, predictor.sigma2 + spread


def calibrate_sigma_zhu(y_val, y_pred):
    """Noise variance as the mean squared validation residual."""
    y_val = np.asarray(y_val, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_val.size == 0:
        raise ValueError("Validation set is empty")
    if y_val.shape != y_pred.shape:
        raise ShapeError(f"Validation targets {y_val.shape} vs predictions {y_pred.shape}",
                         axis="target", expected=y_val.shape, actual=y_pred.shape)
    return float(np.mean((y_val - y_pred) ** 2))


def default_sigma_grid(train_targets):
    """Log-spaced noise-variance candidates scaled by the target variance."""
    var = float(np.var(np.asarray(train_targets, dtype=np.float64)))
    lo, hi = GAL_GRID_SPAN
    return np.geomspace(lo, hi, GAL_GRID_SIZE) * (var if var > 0 else 1.0)


def gaussian_log_likelihood(y, mean, var):
    with np.errstate(divide="ignore", invalid="ignore"):
        ll = -0.5 * np.log(2.0 * np.pi * var) - (y - mean) ** 2 / (2.0 * var)
    return float(np.nansum(np.where(np.isnan(ll), -np.inf, ll)))


def select_sigma_by_likelihood(y, mean, spread, grid):
    """Grid value maximizing sum_i log N(y_i | mean_i, sigma2 + spread_i).

    Ties go to the first maximal element.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise ValueError("sigma2 grid is empty")
    if np.size(y) == 0:
        raise ValueError("Validation set is empty")
    scores = [gaussian_log_likelihood(y, mean, s2 + spread) for s2 in grid]
    return float(grid[int(np.argmax(scores))])


def calibrate_sigma_gal(predictor, x_val, y_val, grid, rng):
    """Choose sigma2 by validation log-likelihood over ``grid``."""
    mean, spread = mc_moments(predictor, x_val, rng)
    sigma2 = select_sigma_by_likelihood(np.asarray(y_val, dtype=np.float64), mean, spread, grid)
    logging.info(f"Gal calibration selected sigma2={sigma2:.6g} from {len(grid)} candidates")
    return sigma2


def normal_cdf(x):
    return 0.5 * (1.0 + erf(np.asarray(x, dtype=np.float64) / np.sqrt(2.0)))


def normal_ppf(tau, tol=PPF_TOL):
    """Standard normal inverse CDF by bisection on ``normal_cdf``."""
    tau = np.asarray(tau, dtype=np.float64)
    if np.any(tau <= 0.0) or np.any(tau >= 1.0):
        raise ValueError(f"Levels must lie in (0, 1), got {tau}")
    lo = np.full(tau.shape, -40.0)
    hi = np.full(tau.shape, 40.0)
    while np.max(hi - lo) > tol:
        mid = 0.5 * (lo + hi)
        below = normal_cdf(mid) < tau
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def gaussian_quantiles(mean, var, levels):
    """Quantiles mean + z_tau * sqrt(var); monotone in tau by construction."""
    mean = np.asarray(mean, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    if np.any(var < 0):
        raise ValueError("Predictive variance must be non-negative")
    z = normal_ppf(levels.as_array())
    z = np.where(np.abs(levels.as_array() - 0.5) < 1e-15, 0.0, z)
    quantiles = mean[..., None] + np.sqrt(var)[..., None] * z
    return ForecastBundle(mean, quantiles, levels)


def mc_dropout_bundle(predictor, x, levels, rng):
    mean, var = mc_predict(predictor, x, rng)
    return gaussian_quantiles(mean, var, levels)


def fit_joint(model, data, levels, cfg, monitor=None):
    """Train one model with 1 + J heads on the joint objective.

    ``levels=None`` means J = 0: a mean-only model trained on l2.
    """
    expected = heads_for(levels)
    if model.heads != expected:
        raise ValueError(f"Model heads {model.heads} do not match levels {expected}")
    return train(model, data, cfg, monitor=monitor)


def fit_independent(factory, data, levels, cfg, monitor=None):
    """Train the mean model and one model per level separately.

    ``factory(heads)`` builds an untrained single-output model; every member
    starts from the same seed.  Returns one ``TrainResult`` per head.
    """
    results = []
    for head in heads_for(levels):
        model = factory([head])
        logging.info(f"Fitting independent model for head {head}")
        results.append(train(model, data, cfg, monitor=monitor))
    return results


def fit_linear(data, task, cfg, monitor=None):
    """Train a linear model for ``task`` ("mean" or a level); returns the ``TrainResult``.

    Features are standardized on the train split; constant columns are
    dropped with a warning.  The intercept starts at the train-target mean
    (or ``task``-quantile), the optimum when every weight is zero.
    """
    head = MEAN_HEAD if task == MEAN_HEAD else float(task)
    if head != MEAN_HEAD and not 0.0 < head < 1.0:
        raise ValueError(f"Quantile level {head} is outside (0, 1)")
    feats = lag_features(data.splits["train"].inputs)
    rows = feats.reshape(-1, feats.shape[-1])
    mean, std = rows.mean(axis=0), rows.std(axis=0)
    kept = [j for j in range(rows.shape[1]) if std[j] > 1e-12]
    dropped = sorted(set(range(rows.shape[1])) - set(kept))
    if dropped:
        logging.warning(f"Dropping {len(dropped)} constant feature column(s): {dropped}")
    targets = np.asarray(data.splits["train"].targets, dtype=np.float64).ravel()
    start = targets.mean() if head == MEAN_HEAD else np.quantile(targets, head)
    model = LinearModel([head], rows.shape[1], kept, mean[kept], std[kept], seed=cfg.seed,
                        intercept=start)
    return train(model, data, cfg, monitor=monitor)


def fit_linear_qr(data, task, cfg):
    """Linear regression (``task="mean"``) or linear quantile regression at level ``task``."""
    return fit_linear(data, task, cfg).model
