"""
Adam optimizer and the mini-batch training loop.

Per-batch loss = objective summed over cells and heads, averaged over the
batch.  The run rng (seeded from ``TrainConfig.seed``) drives shuffling and
dropout masks, so (seed, config, data) fully determine the trained weights.
"""
import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

import autograd as ag
from constants import (
    ADAM_BETA1, ADAM_BETA2, ADAM_EPS, ADAM_LR, DEFAULT_BATCH_SIZE, DEFAULT_EPOCHS,
    DEFAULT_HORIZON, DEFAULT_KEEP, DEFAULT_LEVELS, DEFAULT_PATIENCE, DEFAULT_WINDOW,
)
from losses import head_objective
from tensor import NumericalError, ShapeError, as_tensor

EVAL_CHUNK = 256


class TrainingAborted(NumericalError):
    """Training hit a non-finite loss; the model holds the last good weights."""

    def __init__(self, message, epoch, history, snapshot):
        super().__init__(message)
        self.epoch = epoch
        self.history = history
        self.snapshot = snapshot


@dataclass
class AdamState:
    lr: float = ADAM_LR
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state, params, grads):
    """One bias-corrected Adam update.

    ``params`` maps names to leaf nodes, ``grads`` maps the same names to
    gradient arrays.  Parameter values are replaced, never mutated in place.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"Gradient for unknown parameter {name!r}")
        if np.shape(g) != params[name].value.shape:
            raise ShapeError(f"Gradient for {name} has shape {np.shape(g)}, "
                             f"parameter has {params[name].value.shape}",
                             axis=name, expected=params[name].value.shape, actual=np.shape(g))
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"Non-finite gradient for {name} at Adam step {state.t + 1}; "
                                 f"step aborted")

    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, g in grads.items():
        node = params[name]
        m = state.m.get(name, np.zeros_like(node.value))
        v = state.v.get(name, np.zeros_like(node.value))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        node.value = as_tensor(node.value - update, name)
    return params


@dataclass
class TrainConfig:
    epochs: int = DEFAULT_EPOCHS
    batch_size: int = DEFAULT_BATCH_SIZE
    lr: float = ADAM_LR
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    patience: int = DEFAULT_PATIENCE
    early_stopping: bool = True
    restore_best: bool = True
    seed: int = 0
    keep: float = DEFAULT_KEEP
    window: int = DEFAULT_WINDOW
    horizon: int = DEFAULT_HORIZON
    levels: tuple = DEFAULT_LEVELS
    l2_weight: float = 1.0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        for name in ("batch_size", "lr", "patience", "window", "horizon", "l2_weight"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 < self.keep <= 1.0:
            raise ValueError(f"keep must be in (0, 1], got {self.keep}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")
        self.levels = tuple(self.levels)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float = None
    monitor_loss: float = None


@dataclass
class TrainResult:
    model: object
    history: list
    best_epoch: int = None
    stopped_early: bool = False


def split_loss(model, split, objective, chunk=EVAL_CHUNK):
    """Mean per-sample objective over a split, dropout off."""
    n = len(split)
    if n == 0:
        return None
    total = 0.0
    for lo in range(0, n, chunk):
        x = split.inputs[lo:lo + chunk]
        y = split.targets[lo:lo + chunk]
        total += objective(y, model.forward(x, mode="eval")).item()
    return total / n


def _split_or_none(data, name):
    if name is None:
        return None
    split = data.splits.get(name)
    return split if split is not None and len(split) > 0 else None


def train(model, data, cfg, objective=None, monitor=None):
    """Fit ``model`` on ``data.splits["train"]`` with Adam.

    ``objective(y, outputs)`` defaults to the model's head objective
    (joint, l2 or single pinball depending on its heads).  ``monitor`` names
    an extra split whose loss is only recorded.  With a validation split the
    best-validation snapshot is restored when ``cfg.restore_best`` is set.
    """
    if objective is None:
        def objective(y, outputs):
            return head_objective(y, outputs, model.heads, cfg.l2_weight)

    train_split = data.splits.get("train")
    if train_split is None or len(train_split) == 0:
        raise ValueError("Training split is empty")
    val_split = _split_or_none(data, "val")
    monitor_split = _split_or_none(data, monitor)

    rng = np.random.default_rng(cfg.seed)
    params = model.named_parameters()
    adam = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    history = []
    last_good = model.state_dict()
    best_state, best_val, best_epoch = last_good, math.inf, None
    bad_epochs, stopped_early = 0, False
    n = len(train_split)
    logging.info(f"Training {type(model).__name__} heads={model.heads} on {n} samples "
                 f"for up to {cfg.epochs} epochs (seed {cfg.seed})")

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        running = 0.0
        try:
            for lo in range(0, n, cfg.batch_size):
                idx = order[lo:lo + cfg.batch_size]
                outputs = model.forward(train_split.inputs[idx], mode="train", rng=rng)
                loss = objective(train_split.targets[idx], outputs) * (1.0 / len(idx))
                if not np.isfinite(loss.value).all():
                    raise NumericalError(f"loss became {loss.item()}")
                grads = ag.backward(loss)
                adam_step(adam, params, {name: grads[node] for name, node in params.items()
                                         if node in grads})
                running += loss.item() * len(idx)
        except NumericalError as e:
            model.load_state_dict(last_good)
            good_epoch = epoch - 1
            logging.error(f"Training aborted at epoch {epoch}: {e}; "
                          f"restored weights from epoch {good_epoch}")
            raise TrainingAborted(f"Non-finite training loss at epoch {epoch} ({e}); "
                                  f"model restored to epoch {good_epoch}",
                                  epoch, history, last_good) from e

        record = EpochRecord(epoch, running / n,
                             split_loss(model, val_split, objective) if val_split else None,
                             split_loss(model, monitor_split, objective) if monitor_split else None)
        history.append(record)
        last_good = model.state_dict()
        logging.debug(f"epoch {epoch}: train={record.train_loss:.6f} val={record.val_loss} "
                      f"monitor={record.monitor_loss}")

        if record.val_loss is not None:
            if record.val_loss < best_val:
                best_val, best_state, best_epoch = record.val_loss, last_good, epoch
                bad_epochs = 0
            else:
                bad_epochs += 1
            if cfg.early_stopping and bad_epochs >= cfg.patience:
                logging.info(f"Early stopping at epoch {epoch}; best epoch {best_epoch} "
                             f"(val {best_val:.6f})")
                stopped_early = True
                break

    if val_split is not None and cfg.restore_best and best_epoch is not None:
        model.load_state_dict(best_state)
    return TrainResult(model, history, best_epoch, stopped_early)


def write_history_csv(path, history):
    """Write ``epoch, train_loss, val_loss[, monitor_loss]`` rows."""
    with_monitor = any(r.monitor_loss is not None for r in history)
    header = ["epoch", "train_loss", "val_loss"] + (["monitor_loss"] if with_monitor else [])

    def _fmt(x):
        return "" if x is None else repr(float(x))

    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for r in history:
            row = [r.epoch, _fmt(r.train_loss), _fmt(r.val_loss)]
            if with_monitor:
                row.append(_fmt(r.monitor_loss))
            writer.writerow(row)


def read_history_csv(path):
    history = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        for row in csv.DictReader(f):
            def _get(key):
                value = row.get(key, "")
                return float(value) if value else None
            history.append(EpochRecord(int(row["epoch"]), _get("train_loss"),
                                       _get("val_loss"), _get("monitor_loss")))
    return history
