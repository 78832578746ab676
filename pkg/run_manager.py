"""
Run pipelines behind the CLI commands.

Run directory layout (one sub-run):
  config.json      fully resolved RunConfig
  weights.bin      tensor container with every trainable parameter
  descriptor.json  architecture, heads, seed, standardization, calibration
  history.csv      per-epoch losses
  report.json / report.csv  after ``evaluate``

With ``repeats > 1`` the run directory holds ``config.json`` and the
aggregated reports; each sub-run lives in ``repeat_NNN/``.
"""
import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from constants import (
    ABORT_FILE, CONFIG_FILE, DATASET_FILE, DATASET_SIDECAR, DESCRIPTOR_FILE, HISTORY_FILE, PARTIAL_SUFFIX,
    PLOT_DATA_FILE, PREDICTIONS_CSV, PREDICTIONS_JSON, REPORT_CSV, REPORT_JSON, WEIGHTS_FILE,
)
from dataset_manager import (
    DatasetParseError, Standardizer, SynthParams, load_dataset, load_motorcycle, pairs_dataset,
    split_counts, standardize, synth_grid_series, synth_motorcycle, window,
    write_dataset_container, write_dataset_sidecar,
)
from evaluation import aggregate_repeats, evaluate_bundle, format_table, read_report_json, \
    write_report_csv, write_report_json
from losses import MEAN_HEAD, ForecastBundle, heads_for
from model_registry import build_model, build_network, get_family, get_preset, model_from_descriptor, \
    network_for
from models import (
    IndependentEnsemble, MCDropoutPredictor, calibrate_sigma_gal, calibrate_sigma_zhu,
    default_sigma_grid, fit_independent, fit_joint, fit_linear, lag_features, mc_dropout_bundle,
    mc_moments,
)
from optim import EVAL_CHUNK, EpochRecord, TrainingAborted, write_history_csv
from run_config import load_config, resolve, apply_overrides, write_config
from tensor import ShapeError
from tensor_container import read_container, write_container


@dataclass
class PreparedData:
    data: object                 # WindowedDataset the model sees
    raw: object                  # the same samples in original units
    target_std: Standardizer = None
    input_std: Standardizer = None


# ---------- file helpers ----------

def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2)


def _read_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def write_run_files(directory, writers):
    """Call ``write(path)`` for every ``(file name, write)`` pair.

    Each file is written next to its target as ``<name>.partial`` and only
    renamed into place once every writer succeeded.  On failure the partial
    files are deleted and files from an earlier call stay untouched.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    staged = []
    try:
        for name, write in writers:
            target = directory / name
            partial = target.with_name(target.name + PARTIAL_SUFFIX)
            staged.append((partial, target))
            write(partial)
    except Exception:
        for partial, _ in staged:
            try:
                partial.unlink(missing_ok=True)
            except OSError:
                pass
        raise
    for partial, target in staged:
        os.replace(partial, target)
    return [target for _, target in staged]


# ---------- datasets ----------

def build_series(cfg):
    """(dataset, oracle or None) for the configured preset."""
    spec = cfg.dataset
    preset = get_preset(spec.preset)
    if preset.kind == "grid":
        return synth_grid_series(cfg.seed, spec.height, spec.width, spec.steps,
                                 SynthParams(**spec.params))
    if spec.path:
        return load_motorcycle(spec.path), None
    return synth_motorcycle(cfg.seed), None


def generate_dataset(cfg):
    """Persist the dataset, its sidecar and the resolved config; returns the directory."""
    directory = cfg.dataset_dir
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IOError(f"Cannot create dataset directory {directory}: {e}") from e
    ds, oracle = build_series(cfg)
    counts = split_counts(len(ds), cfg.dataset.fractions)
    extra = {
        "preset": cfg.dataset.preset,
        "seed": cfg.seed,
        "params": cfg.dataset.params,
        "fractions": cfg.dataset.fractions,
        "split_boundaries": [int(b) for b in np.cumsum([0] + counts)],
    }
    write_run_files(directory, [
        (DATASET_FILE, lambda p: write_dataset_container(p, ds, oracle, cfg.dataset.compress)),
        (DATASET_SIDECAR, lambda p: write_dataset_sidecar(p, ds, extra)),
        (CONFIG_FILE, lambda p: write_config(p, cfg)),
    ])
    logging.info(f"Generated {cfg.dataset.preset} dataset {ds.targets.shape} in {directory}")
    return directory


def load_series(cfg):
    directory = cfg.dataset_dir
    if not (directory / DATASET_SIDECAR).exists():
        raise FileNotFoundError(f"No dataset in {directory}; run 'generate' first")
    ds, oracle, sidecar = load_dataset(directory)
    if sidecar.get("preset") not in (None, cfg.dataset.preset):
        raise ValueError(f"Dataset in {directory} was generated for preset "
                         f"{sidecar.get('preset')!r}, config asks for {cfg.dataset.preset!r}")
    return ds, oracle


def prepare(cfg, ds, seed):
    """Window / split and standardize ``ds`` for one sub-run."""
    spec = cfg.dataset
    if ds.kind == "grid":
        raw = window(ds, spec.window, spec.horizon, spec.fractions)
    else:
        split_seed = spec.split_seed if spec.split_seed is not None else seed
        raw = pairs_dataset(ds, spec.fractions, np.random.default_rng(split_seed))
    if not spec.standardize:
        return PreparedData(raw, raw)
    data, target_std, input_std = standardize(raw)
    return PreparedData(data, raw, target_std, input_std)


def _feature_count(network, data):
    if network == "convlstm":
        return 1
    return lag_features(data.split("train").inputs[:1]).shape[-1]


# ---------- training ----------

def sum_histories(histories):
    """Epoch-wise sums over the members' histories (common epochs only)."""
    n = min(len(h) for h in histories)

    def _sum(values):
        return None if any(v is None for v in values) else float(sum(values))

    return [EpochRecord(histories[0][e].epoch,
                        _sum([h[e].train_loss for h in histories]),
                        _sum([h[e].val_loss for h in histories]),
                        _sum([h[e].monitor_loss for h in histories]))
            for e in range(n)]


def fit_family(cfg, prepared, seed):
    """Train the configured family; returns (model, history, member results)."""
    family = get_family(cfg.model.family)
    data = prepared.data
    levels = cfg.quantile_levels()
    tcfg = cfg.train_config(seed)
    monitor = cfg.train.monitor
    network = network_for(family, data.kind)
    n_features = _feature_count(network, data)

    if family.training == "independent":
        if network == "linear":
            results = [fit_linear(data, head, tcfg, monitor) for head in heads_for(levels)]
        else:
            def factory(heads):
                return build_network(network, heads, cfg.model, n_features, seed)
            results = fit_independent(factory, data, levels, tcfg, monitor)
        model = IndependentEnsemble([r.model for r in results])
        return model, sum_histories([r.history for r in results]), results

    if network == "linear":
        result = fit_linear(data, MEAN_HEAD, tcfg, monitor)
        return result.model, result.history, [result]

    joint_levels = levels if family.training == "joint" else None
    model = build_model(family.id, heads_for(joint_levels), cfg.model, data.kind, n_features, seed)
    result = fit_joint(model, data, joint_levels, tcfg, monitor)
    return model, result.history, [result]


def calibrate(cfg, network, prepared, seed):
    """sigma2 per requested calibration, estimated on the validation split."""
    split = prepared.data.splits.get("val")
    if split is None or len(split) == 0:
        logging.warning("No validation split; calibrating sigma2 on the training split")
        split = prepared.data.split("train")
    predictor = MCDropoutPredictor(network, cfg.model.mc_samples)
    calibrated = {}
    if "zhu" in cfg.model.calibrations:
        mean, _ = mc_moments(predictor, split.inputs, np.random.default_rng([seed, 1]))
        calibrated["zhu"] = calibrate_sigma_zhu(split.targets, mean)
    if "gal" in cfg.model.calibrations:
        grid = default_sigma_grid(prepared.data.split("train").targets)
        calibrated["gal"] = calibrate_sigma_gal(predictor, split.inputs, split.targets, grid,
                                                np.random.default_rng([seed, 1]))
    logging.info(f"Calibrated sigma2: {calibrated}")
    return calibrated


def _head_name(head):
    return head if head == MEAN_HEAD else f"{head:g}"


def train_subrun(cfg, ds, seed, directory):
    """Fit one seeded sub-run and write its artifacts into ``directory``."""
    directory = Path(directory)
    prepared = prepare(cfg, ds, seed)
    family = get_family(cfg.model.family)
    try:
        model, history, results = fit_family(cfg, prepared, seed)
    except TrainingAborted as e:
        diagnostic = {"seed": seed, "epoch": e.epoch, "message": str(e),
                      "last_good_epoch": e.epoch - 1}
        write_run_files(directory, [
            (HISTORY_FILE, lambda p: write_history_csv(p, e.history)),
            (WEIGHTS_FILE, lambda p: write_container(p, e.snapshot, {"aborted": True})),
            (ABORT_FILE, lambda p: _write_json(p, diagnostic)),
        ])
        raise

    train_split = prepared.data.split("train")
    descriptor = {
        "run": cfg.run_name,
        "label": cfg.label,
        "family": family.id,
        "seed": seed,
        "levels": cfg.levels,
        "dataset_kind": prepared.data.kind,
        "window": prepared.data.window,
        "horizon": prepared.data.horizon,
        "input_shape": list(train_split.inputs.shape[1:]),
        "target_shape": list(train_split.targets.shape[1:]),
        "target_standardizer": prepared.target_std.to_dict() if prepared.target_std else None,
        "input_standardizer": prepared.input_std.to_dict() if prepared.input_std else None,
        "epochs_run": len(history),
        "best_epoch": [r.best_epoch for r in results],
        "stopped_early": [r.stopped_early for r in results],
        "model": model.descriptor(),
    }
    if family.training == "mc_dropout":
        calibrated = calibrate(cfg, model, prepared, seed)
        first = next(iter(calibrated))
        predictor = MCDropoutPredictor(model, cfg.model.mc_samples, calibrated[first], first)
        descriptor["model"] = predictor.descriptor()
        descriptor["calibrated"] = calibrated

    writers = [
        (WEIGHTS_FILE, lambda p: write_container(p, model.state_dict(), {"run": cfg.run_name},
                                                 cfg.dataset.compress)),
        (DESCRIPTOR_FILE, lambda p: _write_json(p, descriptor)),
        (HISTORY_FILE, lambda p: write_history_csv(p, history)),
    ]
    if len(results) > 1:
        for head, r in zip(model.heads, results):
            writers.append((f"history_{_head_name(head)}.csv",
                            lambda p, h=r.history: write_history_csv(p, h)))
    write_run_files(directory, writers)
    logging.info(f"Sub-run seed {seed}: {len(results)} model(s), {len(history)} epoch(s) -> {directory}")
    return descriptor


def subrun_dirs(cfg, run_dir=None):
    run_dir = Path(run_dir) if run_dir is not None else cfg.run_dir
    if cfg.repeats == 1:
        return [run_dir]
    return [run_dir / f"repeat_{r:03d}" for r in range(cfg.repeats)]


def train_run(cfg):
    """Train every repeat of ``cfg`` (already resolved); returns the descriptors.

    Sub-runs may execute in worker threads; results are collected in repeat
    order.  With several repeats the aggregated report is written as well.
    """
    ds, _ = load_series(cfg)
    run_dir = cfg.run_dir
    write_run_files(run_dir, [(CONFIG_FILE, lambda p: write_config(p, cfg))])
    seeds, dirs = cfg.repeat_seeds(), subrun_dirs(cfg)
    logging.info(f"Training {cfg.model.family} on {cfg.dataset.preset}: "
                 f"{len(seeds)} repeat(s), {cfg.workers} worker(s) -> {run_dir}")

    if cfg.workers > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            futures = [pool.submit(train_subrun, cfg, ds, s, d) for s, d in zip(seeds, dirs)]
            descriptors = [f.result() for f in futures]
    else:
        descriptors = [train_subrun(cfg, ds, s, d) for s, d in zip(seeds, dirs)]

    if cfg.repeats > 1:
        evaluate_run(run_dir)
    return descriptors


# ---------- prediction ----------

def load_artifact(directory):
    """(model, descriptor) of one sub-run."""
    directory = Path(directory)
    desc_path = directory / DESCRIPTOR_FILE
    if not desc_path.exists():
        raise FileNotFoundError(f"No trained model in {directory}; run 'train' first")
    desc = _read_json(desc_path)
    arrays, meta = read_container(directory / WEIGHTS_FILE)
    if meta.get("aborted"):
        raise ValueError(f"Sub-run in {directory} aborted during training; see {ABORT_FILE}")
    model = model_from_descriptor(desc["model"])
    network = model.network if isinstance(model, MCDropoutPredictor) else model
    network.load_state_dict(arrays)
    return model, desc


def predict_outputs(model, x, chunk=EVAL_CHUNK):
    """Deterministic (dropout off) raw outputs ``(..., n_heads)``."""
    if len(x) == 0:
        raise ValueError("Nothing to predict: empty input")
    return np.concatenate([model.forward(x[lo:lo + chunk], mode="eval").value
                           for lo in range(0, len(x), chunk)])


def forecast_bundles(model, desc, x, levels):
    """[(label, ForecastBundle)] on the model's (standardized) scale.

    MC-dropout artifacts give one bundle per calibrated sigma2; every other
    model gives one bundle.
    """
    label = desc["label"]
    if isinstance(model, MCDropoutPredictor):
        out = []
        for name, sigma2 in desc["calibrated"].items():
            predictor = MCDropoutPredictor(model.network, model.n_samples, sigma2, name)
            rng = np.random.default_rng([desc["seed"], 2])
            out.append((f"{label} ({name.capitalize()})",
                        mc_dropout_bundle(predictor, x, levels, rng)))
        return out
    outputs = predict_outputs(model, x)
    if model.heads == [MEAN_HEAD]:
        return [(label, ForecastBundle(outputs[..., 0]))]
    if model.heads != heads_for(levels):
        raise ValueError(f"Model heads {model.heads} do not match the requested levels "
                         f"{list(levels)}")
    return [(label, ForecastBundle.from_outputs(outputs, levels))]


def _standardizers(desc):
    ts = desc.get("target_standardizer")
    xs = desc.get("input_standardizer")
    return (Standardizer.from_dict(ts) if ts else None,
            Standardizer.from_dict(xs) if xs else None)


def read_input_window(path, desc):
    """Parse a CSV input file in original units.

    pairs: one x value per row -> (n,).  grids: L rows of M*N values
    (row-major cells) -> (1, L, M, N).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Input file not found: {path}")
    rows = []
    with open(path, "r", encoding="utf-8-sig", newline="") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            cells = [c.strip() for c in row if c.strip()]
            if not cells:
                continue
            try:
                rows.append([float(c) for c in cells])
            except ValueError:
                raise DatasetParseError(f"non-numeric value in {cells}", lineno) from None
            if not np.all(np.isfinite(rows[-1])):
                raise DatasetParseError(f"non-finite value in {cells}", lineno)
    if not rows:
        raise DatasetParseError(f"no values in {path}")
    expected = desc["input_shape"]
    if desc["dataset_kind"] == "pairs":
        return np.array([r[0] for r in rows])
    L, M, N = expected[0], expected[1], expected[2]
    widths = {len(r) for r in rows}
    if len(rows) != L or widths != {M * N}:
        raise ShapeError(f"Input window must be {L} rows of {M * N} values, got {len(rows)} "
                         f"rows of {sorted(widths)}", axis="input", expected=expected,
                         actual=(len(rows), sorted(widths)))
    return np.array(rows).reshape(1, L, M, N)


def _bundle_columns(levels, with_quantiles):
    return ["mean"] + ([f"q{tau:g}" for tau in levels] if with_quantiles else [])


def _bundle_values(bundle):
    mean = np.asarray(bundle.mean)
    cols = [mean[..., None]]
    if bundle.quantiles is not None:
        cols.append(np.asarray(bundle.quantiles))
    return np.concatenate(cols, axis=-1)


def _position_rows(kind, index, x, target_shape):
    """Per-target position columns: (sample, x) for pairs, (sample, t, m, n) for grids."""
    if kind == "pairs":
        return ["sample", "x"], [[int(i), float(v)] for i, v in zip(index, x)]
    rows = []
    for s, t in enumerate(index):
        for m in range(target_shape[0]):
            for n in range(target_shape[1]):
                rows.append([s, int(t), m, n])
    return ["sample", "t", "m", "n"], rows


def predict_run(run_dir, input_path=None, repeat=0, out_dir=None):
    """Write predictions.csv/json and plot_data.csv for the test split or an input file."""
    run_dir = Path(run_dir)
    cfg = resolve(load_config(run_dir / CONFIG_FILE))
    dirs = subrun_dirs(cfg, run_dir)
    if not 0 <= repeat < len(dirs):
        raise ValueError(f"Repeat {repeat} out of range; run has {len(dirs)} sub-run(s)")
    model, desc = load_artifact(dirs[repeat])
    target_std, input_std = _standardizers(desc)
    levels = cfg.quantile_levels()

    if input_path is not None:
        x_raw = read_input_window(input_path, desc)
        x_model = input_std.transform(x_raw) if input_std else x_raw
        y = None
        index = np.arange(len(x_raw)) if desc["dataset_kind"] == "pairs" else np.array([-1])
    else:
        ds, _ = load_series(cfg)
        prepared = prepare(cfg, ds, desc["seed"])
        test, raw_test = prepared.data.split("test"), prepared.raw.split("test")
        x_raw, x_model, y, index = raw_test.inputs, test.inputs, raw_test.targets, raw_test.index
    bundles = [(label, target_std.inverse_bundle(b) if target_std else b)
               for label, b in forecast_bundles(model, desc, x_model, levels)]

    out_dir = Path(out_dir) if out_dir else dirs[repeat]
    kind = desc["dataset_kind"]
    pos_header, positions = _position_rows(kind, index, x_raw, desc["target_shape"])
    header = ["model"] + pos_header + _bundle_columns(levels, bundles[0][1].quantiles is not None)
    flat_y = None if y is None else np.asarray(y).reshape(-1)

    def _write_predictions(path):
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            for label, bundle in bundles:
                values = _bundle_values(bundle).reshape(len(positions), -1)
                for pos, vals in zip(positions, values):
                    writer.writerow([label] + pos + [repr(float(v)) for v in vals])

    def _write_plot_data(path):
        plot_header = ["model"] + pos_header[1:] + (["y"] if flat_y is not None else []) + header[len(pos_header) + 1:]
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(plot_header)
            for label, bundle in bundles:
                values = _bundle_values(bundle).reshape(len(positions), -1)
                order = sorted(range(len(positions)), key=lambda i: positions[i][1:])
                for i in order:
                    row = [label] + positions[i][1:]
                    if flat_y is not None:
                        row.append(repr(float(flat_y[i])))
                    writer.writerow(row + [repr(float(v)) for v in values[i]])

    def _write_json_bundles(path):
        _write_json(path, {
            "levels": list(levels),
            "index": [int(i) for i in index],
            "bundles": [{"model": label, "mean": np.asarray(b.mean).tolist(),
                         "quantiles": None if b.quantiles is None else np.asarray(b.quantiles).tolist()}
                        for label, b in bundles],
        })

    written = write_run_files(out_dir, [
        (PREDICTIONS_CSV, _write_predictions),
        (PREDICTIONS_JSON, _write_json_bundles),
        (PLOT_DATA_FILE, _write_plot_data),
    ])
    logging.info(f"Wrote predictions for {len(positions)} target(s) to {out_dir}")
    return written


# ---------- evaluation / reports ----------

def evaluate_subrun(cfg, model, desc, prepared, oracle, levels):
    """[(label, MetricsReport)] for one sub-run's test split."""
    test, raw_test = prepared.data.split("test"), prepared.raw.split("test")
    if len(test) == 0:
        raise ValueError("Test split is empty; nothing to evaluate")
    original = cfg.dataset.report_scale == "original"
    y = raw_test.targets if original else test.targets
    intervals = [tuple(p) for p in cfg.intervals]
    rows = []
    has_quantiles = False
    for label, bundle in forecast_bundles(model, desc, test.inputs, levels):
        if original and prepared.target_std is not None:
            bundle = prepared.target_std.inverse_bundle(bundle)
        q_levels = levels if bundle.quantiles is not None else None
        has_quantiles = has_quantiles or q_levels is not None
        rows.append((label, evaluate_bundle(label, bundle, y, q_levels, intervals)))
    if oracle is not None and original and has_quantiles:
        t = raw_test.index
        truth = ForecastBundle(oracle.signal[t], oracle.at(levels, t), levels)
        rows.append(("Oracle", evaluate_bundle("Oracle", truth, y, levels, intervals)))
    return rows


def evaluate_run(run_dir, levels=None, intervals=None):
    """Score every sub-run, aggregate repeats per label, write report.json/csv."""
    run_dir = Path(run_dir)
    cfg = resolve(apply_overrides(load_config(run_dir / CONFIG_FILE),
                                  levels=levels, intervals=intervals))
    ds, oracle = load_series(cfg)
    q_levels = cfg.quantile_levels()
    per_label = {}
    for seed, directory in zip(cfg.repeat_seeds(), subrun_dirs(cfg, run_dir)):
        model, desc = load_artifact(directory)
        prepared = prepare(cfg, ds, seed)
        for label, report in evaluate_subrun(cfg, model, desc, prepared, oracle, q_levels):
            per_label.setdefault(label, []).append(report)
    reports = [aggregate_repeats(rs) for rs in per_label.values()]
    write_run_files(run_dir, [
        (REPORT_JSON, lambda p: write_report_json(p, reports)),
        (REPORT_CSV, lambda p: write_report_csv(p, reports)),
    ])
    logging.info(f"Evaluated {cfg.repeats} sub-run(s) of {run_dir}: {[r.model for r in reports]}")
    return reports


def report_runs(run_dirs, out_dir):
    """Merge the reports of several runs into one table; returns its text form."""
    reports = []
    for d in run_dirs:
        path = Path(d) / REPORT_JSON
        if not path.exists():
            raise FileNotFoundError(f"No report in {d}; run 'evaluate' first")
        reports.extend(read_report_json(path))
    if not reports:
        raise ValueError("No reports to assemble")
    write_run_files(out_dir, [
        (REPORT_JSON, lambda p: write_report_json(p, reports)),
        (REPORT_CSV, lambda p: write_report_csv(p, reports)),
    ])
    return format_table(reports)


# ---------- regularization study ----------

def monitor_curve(history):
    values = [r.monitor_loss for r in history]
    if not values or any(v is None for v in values):
        raise ValueError("History has no monitored loss; train with a monitor split")
    return np.array(values)


def rise_after_minimum(curve):
    """Largest relative increase of ``curve`` over its minimum, after that minimum."""
    curve = np.asarray(curve, dtype=np.float64)
    k = int(np.argmin(curve))
    low = curve[k]
    return float((curve[k:].max() - low) / abs(low)) if low != 0 else float(curve[k:].max() - low)


def regularization_study(cfg, ds, seed, monitor="test"):
    """Monitored-loss curves of the joint and independent families.

    Early stopping and best-snapshot restore are switched off so both
    families train for the full epoch budget.
    """
    train = replace(cfg.train, early_stopping=False, restore_best=False, monitor=monitor)
    prepared = prepare(cfg, ds, seed)
    joint_family = "deepjmqr" if prepared.data.kind == "grid" else "joint_mlp"
    curves = {}
    for name, family in (("joint", joint_family), ("independent", "independent")):
        run_cfg = replace(cfg, train=train, model=replace(cfg.model, family=family))
        _, history, _ = fit_family(run_cfg, prepared, seed)
        curves[name] = monitor_curve(history)
    return curves
