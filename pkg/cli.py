"""
Command-line surface: generate, train, evaluate, predict, report.

  python main.py generate --preset taxi --seed 7
  python main.py train --preset motorcycle --model joint_mlp --repeats 30
  python main.py evaluate --run runs/motorcycle_joint_mlp_seed0
  python main.py predict --run runs/taxi_deepjmqr_seed0 --input window.csv
  python main.py report runs/a runs/b --out runs/tables

Exit codes: 0 success, 1 usage / config / data error, 2 numerical failure.
"""
import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from constants import APP_NAME, APP_VERSION, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, LOG_FILE
from run_config import ConfigError, RunConfig, apply_overrides, load_config, resolve
from run_manager import evaluate_run, generate_dataset, predict_run, report_runs, train_run
from tensor import NumericalError

_installed_handlers = []


def _setup_logging(log_dir, verbose=False):
    """Rotating ``debug.log`` in ``log_dir`` plus a stderr handler."""
    from logging.handlers import RotatingFileHandler
    root_logger = logging.getLogger()
    for h in _installed_handlers:
        root_logger.removeHandler(h)
        h.close()
    _installed_handlers.clear()

    log_dir = Path(log_dir)
    log_dir.mkdir(parents=True, exist_ok=True)
    handler = RotatingFileHandler(
        str(log_dir / LOG_FILE), maxBytes=2 * 1024 * 1024, backupCount=3, encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(message)s"))
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(logging.DEBUG if verbose else logging.INFO)
    console.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    root_logger.setLevel(logging.DEBUG)
    for h in (handler, console):
        root_logger.addHandler(h)
        _installed_handlers.append(h)
    logging.info(f"=== {APP_NAME} {APP_VERSION} ===")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _config_from_args(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "preset", None):
        cfg = replace(cfg, dataset=replace(cfg.dataset, preset=args.preset))
    if getattr(args, "model", None):
        cfg = replace(cfg, model=replace(cfg.model, family=args.model))
    cfg = apply_overrides(cfg, seed=args.seed, out=args.out,
                          repeats=getattr(args, "repeats", None),
                          levels=getattr(args, "levels", None),
                          intervals=getattr(args, "intervals", None))
    return resolve(cfg)


# ---------- commands ----------

def cmd_generate(args):
    cfg = _config_from_args(args)
    _setup_logging(cfg.out, args.verbose)
    directory = generate_dataset(cfg)
    print(f"Dataset written to {directory}")
    return EXIT_OK


def cmd_train(args):
    cfg = _config_from_args(args)
    _setup_logging(cfg.out, args.verbose)
    train_run(cfg)
    print(f"Run written to {cfg.run_dir}")
    return EXIT_OK


def _run_dir(args):
    if args.run:
        return Path(args.run)
    return _config_from_args(args).run_dir


def cmd_evaluate(args):
    run_dir = _run_dir(args)
    _setup_logging(run_dir.parent, args.verbose)
    reports = evaluate_run(run_dir, levels=args.levels, intervals=args.intervals)
    for r in reports:
        print(f"{r.model}: MAE {r.mae:.4f} RMSE {r.rmse:.4f}"
              + ("" if r.tilted_total is None else f" tilted {r.tilted_total:.4f}"))
    return EXIT_OK


def cmd_predict(args):
    run_dir = _run_dir(args)
    _setup_logging(run_dir.parent, args.verbose)
    written = predict_run(run_dir, args.input, args.repeat, args.dest)
    for path in written:
        print(f"Wrote {path}")
    return EXIT_OK


def cmd_report(args):
    out = Path(args.out) if args.out else Path("report")
    _setup_logging(out, args.verbose)
    print(report_runs(args.runs, out))
    return EXIT_OK


def _add_common(p, run_flags=True):
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--seed", type=int, help="Base seed (overrides the config)")
    p.add_argument("--out", help="Output directory (overrides the config)")
    p.add_argument("--verbose", action="store_true", help="Log DEBUG to the console")
    if run_flags:
        p.add_argument("--preset", help="Dataset preset: taxi, copenhagen, gaussian, motorcycle")
        p.add_argument("--model", help="Model family, e.g. deepjmqr, joint_mlp, independent")


def build_parser():
    parser = _Parser(prog="jqf", description=f"{APP_NAME} {APP_VERSION}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("generate", help="Generate or import a dataset")
    _add_common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="Train a model family (optionally repeated)")
    _add_common(p)
    p.add_argument("--repeats", type=int, help="Number of seeded sub-runs")
    p.add_argument("--levels", help="Quantile levels, e.g. 0.05,0.2,0.8,0.95")
    p.add_argument("--intervals", help="Interval pairs, e.g. 0.05:0.95,0.2:0.8")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="Write report.json / report.csv for a run")
    _add_common(p)
    p.add_argument("--run", help="Run directory (default: derived from the config)")
    p.add_argument("--levels", help="Quantile levels to evaluate")
    p.add_argument("--intervals", help="Interval pairs to evaluate")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="Forecast the test split or an input window")
    _add_common(p)
    p.add_argument("--run", help="Run directory (default: derived from the config)")
    p.add_argument("--input", help="CSV input window (default: the test split)")
    p.add_argument("--repeat", type=int, default=0, help="Sub-run index")
    p.add_argument("--dest", help="Directory for prediction files (default: the sub-run)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", help="Assemble the reports of several runs")
    p.add_argument("runs", nargs="+", help="Run directories")
    p.add_argument("--out", help="Directory for the combined report")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except NumericalError as e:
        logging.error(f"Numerical failure: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, KeyError, OSError) as e:
        logging.error(f"{type(e).__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
