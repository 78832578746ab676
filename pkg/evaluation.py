"""
Forecast quality metrics: point error, tilted loss, quantile crossings,
prediction-interval coverage/width, and mean +- std aggregation over repeats.
"""
import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from losses import tilted
from tensor import ShapeError

SCALAR_FIELDS = ("mae", "rmse", "tilted_total", "crossing_loss", "num_crosses")
COLUMN_NAMES = {
    "mae": "MAE",
    "rmse": "RMSE",
    "tilted_total": "Tilted Loss",
    "crossing_loss": "Crossing Loss",
    "num_crosses": "Num. Crosses",
}


def interval_label(lower, upper):
    """Nominal coverage alpha = upper - lower as a percentage label, e.g. ``90%``."""
    return f"{round((upper - lower) * 100, 6):g}%"


@dataclass
class IntervalMetrics:
    lower: float
    upper: float
    icp: float
    mil: float
    icp_std: float = None
    mil_std: float = None

    @property
    def label(self):
        return interval_label(self.lower, self.upper)


@dataclass
class MetricsReport:
    model: str
    mae: float
    rmse: float
    tilted_total: float = None
    crossing_loss: float = None
    num_crosses: float = None
    intervals: list = field(default_factory=list)
    std: dict = None
    n_repeats: int = 1

    def to_dict(self):
        out = {"model": self.model, "n_repeats": self.n_repeats}
        for name in SCALAR_FIELDS:
            out[name] = getattr(self, name)
        out["intervals"] = [
            {"label": iv.label, "lower": iv.lower, "upper": iv.upper, "icp": iv.icp,
             "mil": iv.mil, "icp_std": iv.icp_std, "mil_std": iv.mil_std}
            for iv in self.intervals
        ]
        out["std"] = self.std
        return out

    @classmethod
    def from_dict(cls, data):
        intervals = [IntervalMetrics(iv["lower"], iv["upper"], iv["icp"], iv["mil"],
                                     iv.get("icp_std"), iv.get("mil_std"))
                     for iv in data.get("intervals", [])]
        return cls(data["model"], data["mae"], data["rmse"], data.get("tilted_total"),
                   data.get("crossing_loss"), data.get("num_crosses"), intervals,
                   data.get("std"), data.get("n_repeats", 1))


def _flat_pair(y, y_hat, what):
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ShapeError(f"{what}: shape {y.shape} vs {y_hat.shape}",
                         axis="target", expected=y.shape, actual=y_hat.shape)
    if y.size == 0:
        raise ValueError(f"{what}: empty input")
    return y.ravel(), y_hat.ravel()


def point_metrics(y, y_hat):
    """(MAE, RMSE) of the mean forecast."""
    y, y_hat = _flat_pair(y, y_hat, "point_metrics")
    residual = y - y_hat
    return float(np.mean(np.abs(residual))), float(np.sqrt(np.mean(residual ** 2)))


def _quantile_array(bundle, levels):
    if bundle.quantiles is None:
        raise ValueError("Bundle has no quantile heads")
    q = np.asarray(getattr(bundle.quantiles, "value", bundle.quantiles), dtype=np.float64)
    if q.shape[-1] != levels.J:
        raise ShapeError(f"Bundle has {q.shape[-1]} quantile channels, expected {levels.J}",
                         axis="levels", expected=levels.J, actual=q.shape[-1])
    return q


def tilted_test_loss(bundle, y, levels):
    """Tilted loss summed over test points and levels."""
    q = _quantile_array(bundle, levels)
    y = np.asarray(y, dtype=np.float64)
    if q.shape[:-1] != y.shape:
        raise ShapeError(f"Quantiles {q.shape[:-1]} vs targets {y.shape}",
                         axis="target", expected=y.shape, actual=q.shape[:-1])
    return tilted(levels.as_array(), y[..., None] - q).item()


def crossing_metrics(bundle, levels):
    """(crossing loss, number of crosses) over adjacent level pairs.

    A cross is a strict inversion q(tau_j) > q(tau_j+1); ties are not counted.
    """
    if levels.J < 2:
        raise ValueError(f"Crossing metrics need at least 2 levels, got {levels.J}")
    q = _quantile_array(bundle, levels)
    gaps = q[..., :-1] - q[..., 1:]
    return float(np.sum(np.maximum(gaps, 0.0))), int(np.count_nonzero(gaps > 0.0))


def interval_metrics(lower, upper, y):
    """(ICP, MIL): share of targets inside [lower, upper] and mean width."""
    lower = np.asarray(lower, dtype=np.float64).ravel()
    upper = np.asarray(upper, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if y.size == 0:
        raise ValueError("interval_metrics: empty input")
    if not lower.size == upper.size == y.size:
        raise ShapeError(f"interval_metrics: lengths {lower.size}, {upper.size}, {y.size}",
                         axis=0, expected=y.size, actual=(lower.size, upper.size))
    inside = (lower <= y) & (y <= upper)
    return float(np.mean(inside)), float(np.mean(upper - lower))


def evaluate_bundle(label, bundle, y, levels=None, intervals=()):
    """Every applicable metric for one forecast bundle."""
    mae, rmse = point_metrics(y, bundle.mean)
    report = MetricsReport(label, mae, rmse)
    if levels is None or bundle.quantiles is None:
        if intervals:
            raise ValueError(f"Model {label!r} has no quantile heads; "
                             f"cannot evaluate intervals {list(intervals)}")
        return report
    report.tilted_total = tilted_test_loss(bundle, y, levels)
    if levels.J >= 2:
        report.crossing_loss, report.num_crosses = crossing_metrics(bundle, levels)
    for lo, hi in intervals:
        try:
            q_lo, q_hi = bundle.quantile(lo), bundle.quantile(hi)
        except KeyError as e:
            raise ValueError(f"Interval ({lo}, {hi}) needs levels missing from the model: {e}") from e
        icp, mil = interval_metrics(q_lo, q_hi, y)
        report.intervals.append(IntervalMetrics(lo, hi, icp, mil))
    return report


def oracle_tilted_loss(oracle_quantiles, y, levels):
    """Tilted loss of known true quantiles (..., J) on targets ``y``."""
    q = np.asarray(oracle_quantiles, dtype=np.float64)
    return tilted(levels.as_array(), np.asarray(y, dtype=np.float64)[..., None] - q).item()


def _mean_std(values):
    values = np.asarray(values, dtype=np.float64)
    if values.size == 1:
        return float(values[0]), 0.0
    return float(values.mean()), float(values.std(ddof=1))


def aggregate_repeats(reports):
    """Per-field sample mean and standard deviation (n - 1) over repeats.

    A single report yields std 0.
    """
    if not reports:
        raise ValueError("aggregate_repeats needs at least one report")
    first = reports[0]
    out = MetricsReport(first.model, 0.0, 0.0, std={}, n_repeats=len(reports))
    for name in SCALAR_FIELDS:
        values = [getattr(r, name) for r in reports]
        if any(v is None for v in values):
            if not all(v is None for v in values):
                raise ValueError(f"Field {name} is missing from some reports")
            continue
        mean, std = _mean_std(values)
        setattr(out, name, mean)
        out.std[name] = std
    keys = [(iv.lower, iv.upper) for iv in first.intervals]
    for r in reports:
        if [(iv.lower, iv.upper) for iv in r.intervals] != keys:
            raise ValueError("Reports disagree on their interval list")
    for k, (lo, hi) in enumerate(keys):
        icp, icp_std = _mean_std([r.intervals[k].icp for r in reports])
        mil, mil_std = _mean_std([r.intervals[k].mil for r in reports])
        out.intervals.append(IntervalMetrics(lo, hi, icp, mil, icp_std, mil_std))
    return out


# ---------- emission ----------

def write_report_json(path, reports):
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"reports": [r.to_dict() for r in reports]}, f, indent=2)


def read_report_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return [MetricsReport.from_dict(d) for d in json.load(f)["reports"]]


def table_columns(reports):
    """Column headers shared by a set of reports, in table order."""
    columns = [COLUMN_NAMES[name] for name in SCALAR_FIELDS
               if any(getattr(r, name) is not None for r in reports)]
    labels = []
    for r in reports:
        for iv in r.intervals:
            if iv.label not in labels:
                labels.append(iv.label)
    for label in labels:
        columns += [f"ICP {label}", f"MIL {label}"]
    return columns


def _row_values(report):
    """{column: (value, std)} for one report."""
    std = report.std or {}
    row = {}
    for name in SCALAR_FIELDS:
        value = getattr(report, name)
        if value is not None:
            row[COLUMN_NAMES[name]] = (value, std.get(name))
    for iv in report.intervals:
        row[f"ICP {iv.label}"] = (iv.icp, iv.icp_std)
        row[f"MIL {iv.label}"] = (iv.mil, iv.mil_std)
    return row


def write_report_csv(path, reports):
    """Flat table: one row per model, a value and a std column per metric."""
    columns = table_columns(reports)
    header = ["Model", "Repeats"]
    for c in columns:
        header += [c, f"{c} std"]
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for r in reports:
            values = _row_values(r)
            row = [r.model, r.n_repeats]
            for c in columns:
                value, std = values.get(c, (None, None))
                row += ["" if value is None else repr(float(value)),
                        "" if std is None else repr(float(std))]
            writer.writerow(row)


def format_table(reports, digits=3):
    """Plain-text table with ``mean (+- std)`` cells."""
    columns = table_columns(reports)
    lines = [" | ".join(["Model"] + columns)]
    for r in reports:
        values = _row_values(r)
        cells = [r.model]
        for c in columns:
            value, std = values.get(c, (None, None))
            if value is None or (isinstance(value, float) and math.isnan(value)):
                cells.append("-")
            elif std is None or r.n_repeats == 1:
                cells.append(f"{value:.{digits}f}")
            else:
                cells.append(f"{value:.{digits}f} (± {std:.{digits}f})")
        lines.append(" | ".join(cells))
    return "\n".join(lines)
