import os
import logging

# App info
APP_NAME = "Joint Quantile Forecaster"
APP_VERSION = "1.0.0"

# Output location
_default_out = os.environ.get("JQF_OUTPUT_DIR", "")
if _default_out:
    logging.debug(f"Using output directory from JQF_OUTPUT_DIR: {_default_out}")
DEFAULT_OUTPUT_DIR = _default_out or "runs"

# Quantile levels / prediction intervals
# 1-D (motorcycle): 60% and 90% intervals; grids: 80% and 90% intervals
DEFAULT_LEVELS = (0.05, 0.20, 0.80, 0.95)
DEFAULT_INTERVALS = ((0.05, 0.95), (0.20, 0.80))
GRID_LEVELS = (0.05, 0.10, 0.90, 0.95)
GRID_INTERVALS = ((0.05, 0.95), (0.10, 0.90))

# Adam
ADAM_LR = 1e-3
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Training
DEFAULT_EPOCHS = 200
DEFAULT_BATCH_SIZE = 32
DEFAULT_PATIENCE = 20
DEFAULT_KEEP = 0.8

# ConvLSTM filters per layer when a preset does not pin them
DEFAULT_FILTERS = (16,)

# Windowing
DEFAULT_WINDOW = 10
DEFAULT_HORIZON = 1

# MC dropout
DEFAULT_MC_SAMPLES = 100
GAL_GRID_SIZE = 30
GAL_GRID_SPAN = (1e-4, 1e2)

# Motorcycle
MOTORCYCLE_RECORDS = 133
MOTORCYCLE_HIDDEN = (50, 10)

# Run directory layout
CONFIG_FILE = "config.json"
WEIGHTS_FILE = "weights.bin"
DESCRIPTOR_FILE = "descriptor.json"
HISTORY_FILE = "history.csv"
REPORT_JSON = "report.json"
REPORT_CSV = "report.csv"
DATASET_FILE = "dataset.bin"
DATASET_SIDECAR = "dataset.json"
LOG_FILE = "debug.log"
ABORT_FILE = "abort.json"
PREDICTIONS_CSV = "predictions.csv"
PREDICTIONS_JSON = "predictions.json"
PLOT_DATA_FILE = "plot_data.csv"
PARTIAL_SUFFIX = ".partial"

# Exit codes
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2
