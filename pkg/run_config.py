"""
Run configuration: strict JSON loading, flag overrides, preset resolution
and the resolved write-back stored in every run directory.

Schema (every key optional; unknown keys are errors):

  {
    "seed": 0, "out": "runs", "name": null, "repeats": 1, "workers": 1,
    "levels": [0.05, 0.1, 0.9, 0.95], "intervals": [[0.05, 0.95], [0.1, 0.9]],
    "dataset": {"preset": "taxi", "path": null, "directory": null,
                "height": null, "width": null, "steps": null, "params": {},
                "window": null, "horizon": null, "fractions": null,
                "split_seed": null, "standardize": true, "report_scale": null,
                "compress": false},
    "model": {"family": "deepjmqr", "hidden": [50, 10],
              "activations": ["tanh", "linear"], "filters": null,
              "kernel_size": [3, 3], "keep": null, "output_gate_source": "cell",
              "mc_samples": 100, "calibrations": ["zhu", "gal"], "label": null},
    "train": {"epochs": 200, "batch_size": 32, "lr": 0.001, "beta1": 0.9,
              "beta2": 0.999, "eps": 1e-08, "patience": 20,
              "early_stopping": true, "restore_best": true, "l2_weight": 1.0,
              "monitor": null}
  }

``null`` means "take the preset / family default"; ``resolve`` fills them in.
"""
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from constants import (
    ADAM_BETA1, ADAM_BETA2, ADAM_EPS, ADAM_LR, DEFAULT_BATCH_SIZE, DEFAULT_EPOCHS,
    DEFAULT_KEEP, DEFAULT_MC_SAMPLES, DEFAULT_OUTPUT_DIR, DEFAULT_PATIENCE, MOTORCYCLE_HIDDEN,
)
from dataset_manager import SynthParams
from layers import OUTPUT_GATE_SOURCES
from losses import QuantileLevels
from model_registry import get_family, get_preset, network_for
from optim import TrainConfig

CALIBRATIONS = ("zhu", "gal")
REPORT_SCALES = ("original", "standardized")


class ConfigError(ValueError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


@dataclass
class DatasetSpec:
    preset: str = "taxi"
    path: str = None
    directory: str = None
    height: int = None
    width: int = None
    steps: int = None
    params: dict = field(default_factory=dict)
    window: int = None
    horizon: int = None
    fractions: list = None
    split_seed: int = None
    standardize: bool = True
    report_scale: str = None
    compress: bool = False


@dataclass
class ModelSpec:
    family: str = "deepjmqr"
    hidden: list = field(default_factory=lambda: list(MOTORCYCLE_HIDDEN))
    activations: list = field(default_factory=lambda: ["tanh", "linear"])
    filters: list = None
    kernel_size: list = field(default_factory=lambda: [3, 3])
    keep: float = None
    output_gate_source: str = "cell"
    mc_samples: int = DEFAULT_MC_SAMPLES
    calibrations: list = field(default_factory=lambda: list(CALIBRATIONS))
    label: str = None


@dataclass
class TrainSpec:
    epochs: int = DEFAULT_EPOCHS
    batch_size: int = DEFAULT_BATCH_SIZE
    lr: float = ADAM_LR
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    patience: int = DEFAULT_PATIENCE
    early_stopping: bool = True
    restore_best: bool = True
    l2_weight: float = 1.0
    monitor: str = None


@dataclass
class RunConfig:
    seed: int = 0
    out: str = DEFAULT_OUTPUT_DIR
    name: str = None
    repeats: int = 1
    workers: int = 1
    levels: list = None
    intervals: list = None
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainSpec = field(default_factory=TrainSpec)

    # ---------- derived locations ----------

    @property
    def dataset_dir(self):
        if self.dataset.directory:
            return Path(self.dataset.directory)
        return Path(self.out) / "data" / self.dataset.preset

    @property
    def run_name(self):
        return self.name or f"{self.dataset.preset}_{self.model.family}_seed{self.seed}"

    @property
    def run_dir(self):
        return Path(self.out) / self.run_name

    @property
    def label(self):
        return self.model.label or get_family(self.model.family).display_name

    def quantile_levels(self):
        return QuantileLevels(tuple(self.levels))

    def repeat_seeds(self):
        """Seed of every sub-run: ``seed + r``."""
        return [self.seed + r for r in range(self.repeats)]

    def train_config(self, seed):
        t = self.train
        return TrainConfig(epochs=t.epochs, batch_size=t.batch_size, lr=t.lr, beta1=t.beta1,
                           beta2=t.beta2, eps=t.eps, patience=t.patience,
                           early_stopping=t.early_stopping, restore_best=t.restore_best,
                           seed=seed, keep=self.model.keep, window=max(self.dataset.window, 1),
                           horizon=max(self.dataset.horizon, 1), levels=tuple(self.levels),
                           l2_weight=t.l2_weight)


_NESTED = {"dataset": DatasetSpec, "model": ModelSpec, "train": TrainSpec}


def _check_type(value, expected, key):
    if value is None:
        return value
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if expected in (int, float) and isinstance(value, bool):
        raise ConfigError(f"Config key {key} must be {expected.__name__}, got a boolean", key)
    if not isinstance(value, expected):
        raise ConfigError(f"Config key {key} must be {expected.__name__}, "
                          f"got {type(value).__name__}", key)
    return value


def _build(cls, data, prefix):
    if not isinstance(data, dict):
        raise ConfigError(f"Config block {prefix or '<root>'} must be an object", prefix or None)
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        path = f"{prefix}{key}"
        if key not in known:
            raise ConfigError(f"Unknown config key {path!r}; valid keys: {sorted(known)}", path)
        if cls is RunConfig and key in _NESTED:
            kwargs[key] = _build(_NESTED[key], value, f"{path}.")
        else:
            kwargs[key] = _check_type(value, known[key].type, path)
    return cls(**kwargs)


def config_from_dict(data):
    return _build(RunConfig, data, "")


def load_config(path):
    """Read a JSON config; unknown keys and wrong types raise ``ConfigError``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
    return config_from_dict(data)


def config_to_dict(cfg):
    return asdict(cfg)


def write_config(path, cfg):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config_to_dict(cfg), f, indent=2)


def parse_levels(text):
    return list(QuantileLevels.parse(text).levels)


def parse_intervals(text):
    """``"0.05:0.95,0.2:0.8"`` -> [[0.05, 0.95], [0.2, 0.8]]."""
    pairs = []
    for chunk in text.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = chunk.split(":")
        if len(parts) != 2:
            raise ConfigError(f"Interval {chunk!r} must look like lower:upper", "intervals")
        try:
            lower, upper = float(parts[0]), float(parts[1])
        except ValueError:
            raise ConfigError(f"Interval {chunk!r} is not numeric", "intervals") from None
        pairs.append([lower, upper])
    if not pairs:
        raise ConfigError(f"No intervals in {text!r}", "intervals")
    return pairs


def apply_overrides(cfg, seed=None, out=None, repeats=None, levels=None, intervals=None):
    """Command-line flags win over file values."""
    changes = {}
    if seed is not None:
        changes["seed"] = seed
    if out is not None:
        changes["out"] = out
    if repeats is not None:
        changes["repeats"] = repeats
    if levels is not None:
        changes["levels"] = parse_levels(levels)
    if intervals is not None:
        changes["intervals"] = parse_intervals(intervals)
    return replace(cfg, **changes)


def _default_keep(family, dataset_kind):
    if family.training == "mc_dropout" or network_for(family, dataset_kind) == "convlstm":
        return DEFAULT_KEEP
    return 1.0


def resolve(cfg):
    """Fill every ``null`` from the preset / family defaults and validate."""
    try:
        preset = get_preset(cfg.dataset.preset)
        family = get_family(cfg.model.family)
    except ValueError as e:
        raise ConfigError(str(e), "dataset.preset" if "preset" in str(e) else "model.family") from e

    ds = cfg.dataset
    unknown = sorted(set(ds.params) - {f.name for f in fields(SynthParams)})
    if unknown:
        raise ConfigError(f"Unknown synthetic parameter(s) {unknown}", "dataset.params")
    ds = replace(
        ds,
        height=ds.height if ds.height is not None else preset.height,
        width=ds.width if ds.width is not None else preset.width,
        steps=ds.steps if ds.steps is not None else preset.steps,
        params={**preset.params, **ds.params},
        window=ds.window if ds.window is not None else preset.window,
        horizon=ds.horizon if ds.horizon is not None else preset.horizon,
        fractions=list(ds.fractions if ds.fractions is not None else preset.fractions),
        report_scale=ds.report_scale or preset.report_scale,
    )
    if ds.report_scale not in REPORT_SCALES:
        raise ConfigError(f"report_scale must be one of {REPORT_SCALES}", "dataset.report_scale")
    if len(ds.fractions) != 3:
        raise ConfigError(f"fractions must list train/val/test, got {ds.fractions}",
                          "dataset.fractions")

    model = cfg.model
    model = replace(model, keep=model.keep if model.keep is not None
                    else _default_keep(family, preset.kind),
                    filters=list(model.filters if model.filters is not None else preset.filters))
    if not model.filters or any(not isinstance(s, int) or isinstance(s, bool) or s < 1
                                for s in model.filters):
        raise ConfigError(f"filters must list positive integers, got {model.filters}", "model.filters")
    if not 0.0 < model.keep <= 1.0:
        raise ConfigError(f"keep must be in (0, 1], got {model.keep}", "model.keep")
    if model.output_gate_source not in OUTPUT_GATE_SOURCES:
        raise ConfigError(f"output_gate_source must be one of {OUTPUT_GATE_SOURCES}",
                          "model.output_gate_source")
    bad = [c for c in model.calibrations if c not in CALIBRATIONS]
    if bad or not model.calibrations:
        raise ConfigError(f"calibrations must be a non-empty subset of {CALIBRATIONS}",
                          "model.calibrations")
    if family.training == "mc_dropout" and model.keep >= 1.0:
        raise ConfigError("MC dropout needs keep < 1", "model.keep")

    levels = cfg.levels if cfg.levels is not None else list(preset.levels)
    if cfg.intervals is not None:
        intervals = cfg.intervals
    elif family.training == "mean":
        intervals = []
    else:
        intervals = [list(p) for p in preset.intervals]
    try:
        q = QuantileLevels(tuple(levels))
    except ValueError as e:
        raise ConfigError(str(e), "levels") from e
    for pair in intervals:
        if len(pair) != 2 or not 0.0 < pair[0] < pair[1] < 1.0:
            raise ConfigError(f"Invalid interval {pair}; need 0 < lower < upper < 1", "intervals")
        for tau in pair:
            try:
                q.index(tau)
            except KeyError:
                raise ConfigError(f"Interval {pair} uses level {tau}, which is not among the "
                                  f"quantile levels {list(q.levels)}", "intervals") from None
    if cfg.repeats < 1 or cfg.workers < 1:
        raise ConfigError("repeats and workers must be >= 1", "repeats")
    if cfg.seed < 0:
        raise ConfigError(f"seed must be non-negative, got {cfg.seed}", "seed")

    resolved = replace(cfg, dataset=ds, model=model, levels=list(q.levels),
                       intervals=[list(p) for p in intervals])
    try:
        resolved.train_config(cfg.seed)
    except ValueError as e:
        raise ConfigError(f"Invalid training settings: {e}", "train") from e
    logging.debug(f"Resolved config: {config_to_dict(resolved)}")
    return resolved
