"""
Datasets: the motorcycle CSV, synthetic generators with known quantiles,
sliding windows, chronological / random splits, standardization, and
persistence as a tensor container plus JSON sidecar.

Dataset kinds:
  pairs  1-D regression records (x, y), e.g. the motorcycle data
  grid   spatio-temporal series y[t, m, n]
"""
import csv
import json
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from constants import DATASET_FILE, DATASET_SIDECAR, MOTORCYCLE_RECORDS
from losses import ForecastBundle
from models import normal_ppf
from tensor_container import read_container, write_container

SPLIT_NAMES = ("train", "val", "test")


class DatasetParseError(ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


@dataclass
class SeriesDataset:
    targets: np.ndarray                 # (T,) for pairs, (T, M, N) for grids
    inputs: np.ndarray = None           # (T,) for pairs; None for grids
    times: np.ndarray = None
    kind: str = "grid"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.times is None:
            self.times = np.arange(len(self.targets), dtype=np.float64)
        self.times = np.asarray(self.times, dtype=np.float64)
        if self.inputs is not None:
            self.inputs = np.asarray(self.inputs, dtype=np.float64)
            if len(self.inputs) != len(self.targets):
                raise ValueError(f"{len(self.inputs)} inputs vs {len(self.targets)} targets")
        if len(self.times) != len(self.targets):
            raise ValueError(f"{len(self.times)} timestamps vs {len(self.targets)} targets")
        if self.kind == "grid":
            if self.targets.ndim != 3:
                raise ValueError(f"Grid targets must be (T, M, N), got {self.targets.shape}")
            if np.any(np.diff(self.times) <= 0):
                raise ValueError("Grid timestamps must be strictly increasing")
        elif self.kind != "pairs":
            raise ValueError(f"Unknown dataset kind {self.kind!r}")

    def __len__(self):
        return len(self.targets)


@dataclass
class Split:
    inputs: np.ndarray
    targets: np.ndarray
    index: np.ndarray            # target time step (grids) or record number (pairs)

    def __len__(self):
        return len(self.targets)


@dataclass
class WindowedDataset:
    splits: dict
    window: int = 1
    horizon: int = 0
    kind: str = "grid"
    meta: dict = field(default_factory=dict)

    def split(self, name):
        if name not in self.splits:
            raise KeyError(f"No split named {name!r}; have {sorted(self.splits)}")
        return self.splits[name]


class OracleQuantiles:
    """True conditional quantiles signal + scale * z_tau of a synthetic grid."""

    def __init__(self, signal, scale):
        self.signal = np.asarray(signal, dtype=np.float64)
        self.scale = np.asarray(scale, dtype=np.float64)
        if self.signal.shape != self.scale.shape:
            raise ValueError("signal and scale shapes differ")
        if np.any(self.scale < 0):
            raise ValueError("scale must be non-negative")

    def quantile(self, tau, t=None):
        """Quantile field for level ``tau`` at time step(s) ``t`` (all steps if None)."""
        s = self.signal if t is None else self.signal[t]
        g = self.scale if t is None else self.scale[t]
        z = 0.0 if abs(tau - 0.5) < 1e-15 else float(normal_ppf(tau))
        return s + g * z

    def at(self, levels, t):
        """Stacked quantiles (..., J) for the given time steps."""
        return np.stack([self.quantile(tau, t) for tau in levels], axis=-1)


# ---------- loading ----------

def _is_number(text):
    try:
        float(text)
        return True
    except ValueError:
        return False


def load_motorcycle(path):
    """Read the two-column (time ms, acceleration g) CSV; header auto-skipped."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Motorcycle CSV not found: {path}")
    times, accel = [], []
    with open(path, "r", encoding="utf-8-sig", newline="") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            cells = [c.strip() for c in row if c.strip()]
            if not cells:
                continue
            if lineno == 1 and not times and not all(_is_number(c) for c in cells):
                logging.debug(f"Skipping header row in {path}: {cells}")
                continue
            if len(cells) < 2:
                raise DatasetParseError(f"expected 2 numeric columns, got {len(cells)}", lineno)
            try:
                t, a = float(cells[0]), float(cells[1])
            except ValueError:
                raise DatasetParseError(f"non-numeric value in {cells[:2]}", lineno) from None
            if not (math.isfinite(t) and math.isfinite(a)):
                raise DatasetParseError(f"non-finite value in {cells[:2]}", lineno)
            times.append(t)
            accel.append(a)
    if not times:
        raise DatasetParseError(f"no records in {path}")
    if len(times) != MOTORCYCLE_RECORDS:
        logging.warning(f"Motorcycle file {path} has {len(times)} records, "
                        f"expected {MOTORCYCLE_RECORDS}")
    return SeriesDataset(np.array(accel), np.array(times), np.arange(len(times)),
                         kind="pairs", meta={"origin": str(path), "units": {"x": "ms", "y": "g"}})


def synth_motorcycle(seed, n=MOTORCYCLE_RECORDS):
    """Crash-pulse surrogate: flat, sharp dip, rebound, decay; noise peaks in the pulse."""
    rng = np.random.default_rng(seed)
    t = np.sort(rng.uniform(2.4, 57.6, n))
    mean = -120.0 * np.exp(-((t - 21.0) / 4.0) ** 2) + 45.0 * np.exp(-((t - 32.0) / 5.0) ** 2)
    sd = 1.5 + 28.0 * np.exp(-((t - 26.0) / 9.0) ** 2) + 6.0 / (1.0 + np.exp(-(t - 40.0) / 3.0))
    y = mean + sd * rng.standard_normal(n)
    return SeriesDataset(y, t, np.arange(n), kind="pairs",
                         meta={"origin": "synthetic_motorcycle", "seed": seed,
                               "units": {"x": "ms", "y": "g"}})


@dataclass
class SynthParams:
    base: float = 10.0
    amplitude: float = 4.0
    period: int = 48
    spatial_gradient: float = 0.5
    noise: float = 1.0
    heteroscedasticity: float = 1.5
    day_fraction: float = 0.5


def synth_grid_series(seed, M, N, T, params=None):
    """y = s + g * eps with seasonal-plus-spatial signal s and a positive
    day/night scale g. Returns (dataset, oracle)."""
    params = params or SynthParams()
    for name, extent in (("M", M), ("N", N), ("T", T)):
        if extent < 1:
            raise ValueError(f"{name} must be >= 1, got {extent}")
    if params.period < 1 or params.noise < 0 or params.heteroscedasticity < 0:
        raise ValueError(f"Invalid synthetic parameters: {params}")
    t = np.arange(T, dtype=np.float64)[:, None, None]
    m = np.arange(M, dtype=np.float64)[None, :, None] / max(M, 1)
    n = np.arange(N, dtype=np.float64)[None, None, :] / max(N, 1)
    phase = np.pi * (m + n)
    amp = params.amplitude * (1.0 + 0.5 * m)
    signal = (params.base + params.spatial_gradient * (m - n) * 4.0
              + amp * np.sin(2.0 * np.pi * t / params.period + phase))
    day = ((t % params.period) / params.period < params.day_fraction).astype(np.float64)
    scale = params.noise * (1.0 + params.heteroscedasticity * day) * (1.0 + 0.25 * n)
    scale = np.broadcast_to(scale, signal.shape).copy()

    rng = np.random.default_rng(seed)
    y = signal + scale * rng.standard_normal((T, M, N))
    ds = SeriesDataset(y, None, np.arange(T), kind="grid",
                       meta={"origin": "synthetic_grid", "seed": seed, "params": asdict(params)})
    return ds, OracleQuantiles(signal, scale)


# ---------- splitting / windowing ----------

def split_counts(n, fractions):
    """Sizes of consecutive splits: rounded (half up) for all but the last,
    which takes the remainder. A positive fraction yielding 0 is an error."""
    fractions = [float(f) for f in fractions]
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"Split fractions must be non-negative and sum to 1, got {fractions}")
    counts = [int(math.floor(n * f + 0.5)) for f in fractions[:-1]]
    counts.append(n - sum(counts))
    if counts[-1] < 0:
        raise ValueError(f"Split fractions {fractions} overflow {n} items")
    for f, c, name in zip(fractions, counts, SPLIT_NAMES):
        if f > 0 and c == 0:
            raise ValueError(f"Split {name!r} is empty ({f} of {n} items)")
    return counts


def split(n, fractions, names=SPLIT_NAMES, chronological=True, rng=None):
    """Index arrays per split. Chronological splits are contiguous and ordered;
    random splits permute with ``rng`` first (indices sorted within a split)."""
    counts = split_counts(n, fractions)
    order = np.arange(n)
    if not chronological:
        if rng is None:
            raise ValueError("Random splits need an rng")
        order = rng.permutation(n)
    out, start = {}, 0
    for name, count in zip(names, counts):
        idx = order[start:start + count]
        out[name] = idx if chronological else np.sort(idx)
        start += count
    return out


def _window_segment(y, start, stop, L, k):
    """Windows whose inputs and target all lie in steps [start, stop)."""
    first_target = start + L + k - 1
    targets_t = np.arange(first_target, stop)
    if len(targets_t) == 0:
        return Split(np.empty((0, L) + y.shape[1:]), np.empty((0,) + y.shape[1:]),
                     np.empty(0, dtype=int))
    offsets = np.arange(-k - L + 1, -k + 1)
    inputs = y[targets_t[:, None] + offsets[None, :]]
    return Split(inputs, y[targets_t], targets_t)


def window(ds, L, k, fractions=None):
    """Sliding windows: the target at step t uses steps t-k-L+1 ... t-k.

    Without ``fractions`` every window goes to a single ``train`` split.  With
    fractions the time axis is cut chronologically first and each segment is
    windowed on its own, so no window straddles a split boundary.
    """
    if ds.kind != "grid":
        raise ValueError("window() needs a temporal (grid) dataset")
    if L < 1 or k < 1:
        raise ValueError(f"Window length and horizon must be >= 1, got L={L}, k={k}")
    T = len(ds)
    if T < L + k:
        raise ValueError(f"Series of length {T} is too short for L={L}, k={k} "
                         f"(need at least {L + k})")
    y = ds.targets
    if fractions is None:
        splits = {"train": _window_segment(y, 0, T, L, k)}
    else:
        splits, start = {}, 0
        for name, count in zip(SPLIT_NAMES, split_counts(T, fractions)):
            seg = _window_segment(y, start, start + count, L, k)
            if count > 0 and len(seg) == 0:
                raise ValueError(f"Split {name!r} ({count} steps) is shorter than one window "
                                 f"(L + k = {L + k})")
            splits[name] = seg
            start += count
    return WindowedDataset(splits, L, k, "grid", dict(ds.meta))


def pairs_dataset(ds, fractions, rng=None, chronological=False):
    """Split (x, y) records; random by default (motorcycle protocol)."""
    if ds.kind != "pairs":
        raise ValueError("pairs_dataset() needs a pairs dataset")
    idx = split(len(ds), fractions, chronological=chronological, rng=rng)
    splits = {name: Split(ds.inputs[i], ds.targets[i], i) for name, i in idx.items()}
    return WindowedDataset(splits, 1, 0, "pairs", dict(ds.meta))


# ---------- standardization ----------

@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values, what="values"):
        """Statistics over axis 0 (samples); one entry per column / cell."""
        values = np.asarray(values, dtype=np.float64)
        if len(values) == 0:
            raise ValueError(f"Cannot standardize empty {what}")
        mean, std = values.mean(axis=0), values.std(axis=0)
        bad = np.argwhere(np.atleast_1d(std) <= 1e-12)
        if bad.size:
            where = tuple(int(i) for i in bad[0])
            raise ValueError(f"Zero variance in {what} at column/cell {where}")
        return cls(mean, std)

    def transform(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def inverse(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean

    def inverse_bundle(self, bundle):
        """Map a standardized forecast back to the original scale."""
        mean = None if bundle.mean is None else self.inverse(bundle.mean)
        q = None
        if bundle.quantiles is not None:
            q = np.asarray(bundle.quantiles) * np.asarray(self.std)[..., None] \
                + np.asarray(self.mean)[..., None]
        return ForecastBundle(mean, q, bundle.levels)

    def to_dict(self):
        return {"mean": np.asarray(self.mean).tolist(), "std": np.asarray(self.std).tolist()}

    @classmethod
    def from_dict(cls, data):
        return cls(np.asarray(data["mean"], dtype=np.float64), np.asarray(data["std"], dtype=np.float64))


def standardize(wds):
    """Standardize with train-split statistics.

    Returns (dataset, target_standardizer, input_standardizer). Grid inputs
    are the same series as the targets and share their per-cell statistics.
    """
    train = wds.split("train")
    y_std = Standardizer.fit(train.targets, "train targets")
    x_std = y_std if wds.kind == "grid" else Standardizer.fit(train.inputs, "train inputs")
    splits = {name: Split(x_std.transform(s.inputs), y_std.transform(s.targets), s.index)
              for name, s in wds.splits.items()}
    return WindowedDataset(splits, wds.window, wds.horizon, wds.kind, dict(wds.meta)), y_std, x_std


# ---------- persistence ----------

def write_dataset_container(path, ds, oracle=None, compress=False):
    arrays = {"targets": ds.targets, "times": ds.times}
    if ds.inputs is not None:
        arrays["inputs"] = ds.inputs
    if oracle is not None:
        arrays["signal"] = oracle.signal
        arrays["scale"] = oracle.scale
    return write_container(path, arrays, {"kind": ds.kind}, compress)


def write_dataset_sidecar(path, ds, extra_meta=None):
    sidecar = {"kind": ds.kind, "shape": list(ds.targets.shape), "meta": ds.meta}
    sidecar.update(extra_meta or {})
    with open(path, "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2)
    return path


def save_dataset(directory, ds, oracle=None, extra_meta=None, compress=False):
    """Write ``dataset.bin`` + ``dataset.json`` sidecar into ``directory``."""
    directory = Path(directory)
    return (write_dataset_container(directory / DATASET_FILE, ds, oracle, compress),
            write_dataset_sidecar(directory / DATASET_SIDECAR, ds, extra_meta))


def load_dataset(directory):
    """Inverse of ``save_dataset``. Returns (dataset, oracle or None, sidecar)."""
    directory = Path(directory)
    sidecar_path = directory / DATASET_SIDECAR
    if not sidecar_path.exists():
        raise FileNotFoundError(f"Dataset sidecar not found: {sidecar_path}")
    with open(sidecar_path, "r", encoding="utf-8") as f:
        sidecar = json.load(f)
    arrays, _ = read_container(directory / DATASET_FILE)
    ds = SeriesDataset(arrays["targets"], arrays.get("inputs"), arrays["times"],
                       kind=sidecar["kind"], meta=sidecar.get("meta", {}))
    oracle = None
    if "signal" in arrays:
        oracle = OracleQuantiles(arrays["signal"], arrays["scale"])
    return ds, oracle, sidecar
