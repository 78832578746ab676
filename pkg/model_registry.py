"""Registry of model families and dataset presets.

A model family says which network backs it and how its heads are trained
(one joint model, 1 + J independent models, or a mean-only base for MC
dropout).  A dataset preset pins a generator or loader together with the
windowing, split and quantile defaults its experiments use.
"""
from dataclasses import dataclass, field

from constants import DEFAULT_FILTERS, DEFAULT_INTERVALS, DEFAULT_LEVELS, GRID_INTERVALS, GRID_LEVELS
from losses import MEAN_HEAD
from models import DeepJMQRNet, IndependentEnsemble, JointMLP, LinearModel, MCDropoutPredictor


@dataclass
class ModelFamily:
    id: str                     # name used in configs, e.g. "deepjmqr"
    display_name: str           # row label in report tables
    training: str               # "joint", "independent", "mean" or "mc_dropout"
    network: str                # "auto" (by dataset kind), "mlp", "convlstm" or "linear"
    description: str = ""
    sort_order: int = 0


MODEL_FAMILIES = [
    ModelFamily(
        id="joint_mlp",
        display_name="Joint MLP",
        training="joint",
        network="mlp",
        description="Dense network with a mean head and one head per quantile level",
        sort_order=10,
    ),
    ModelFamily(
        id="deepjmqr",
        display_name="DeepJMQR",
        training="joint",
        network="convlstm",
        description="Stacked ConvLSTM with a shared 1x1 mean + quantile output",
        sort_order=20,
    ),
    ModelFamily(
        id="independent",
        display_name="Independent",
        training="independent",
        network="auto",
        description="One single-output network per head, trained separately",
        sort_order=30,
    ),
    ModelFamily(
        id="linear",
        display_name="Linear",
        training="mean",
        network="linear",
        description="Ordinary linear regression on lag features",
        sort_order=40,
    ),
    ModelFamily(
        id="linear_qr",
        display_name="Linear QR",
        training="independent",
        network="linear",
        description="Linear mean regression plus one linear quantile regression per level",
        sort_order=50,
    ),
    ModelFamily(
        id="mc_dropout",
        display_name="MC dropout",
        training="mc_dropout",
        network="auto",
        description="Mean-only network, Gaussian intervals from MC dropout passes",
        sort_order=60,
    ),
]

FAMILY_MAP = {fam.id: fam for fam in MODEL_FAMILIES}


@dataclass
class DatasetPreset:
    id: str
    kind: str                   # "grid" (synthetic series) or "pairs" (x, y records)
    height: int = 1
    width: int = 1
    steps: int = 0
    params: dict = field(default_factory=dict)   # SynthParams overrides
    window: int = 10
    horizon: int = 1
    fractions: tuple = (0.6, 0.2, 0.2)
    levels: tuple = GRID_LEVELS
    intervals: tuple = GRID_INTERVALS
    filters: tuple = DEFAULT_FILTERS    # ConvLSTM layers for grid families
    report_scale: str = "original"    # metrics on "original" or "standardized" targets
    description: str = ""


DATASET_PRESETS = [
    DatasetPreset(
        id="taxi",
        kind="grid",
        height=8, width=8, steps=2000,
        horizon=2,
        fractions=(0.5, 0.17, 0.33),
        filters=(100,),
        description="Taxi-like 8x8 grid, half-hour steps, 1-hour-ahead forecasts",
    ),
    DatasetPreset(
        id="copenhagen",
        kind="grid",
        height=9, width=1, steps=5000,
        params={"period": 288, "heteroscedasticity": 2.0},
        fractions=(0.5, 0.17, 0.33),
        filters=(20,),
        description="Nine road segments, 5-minute steps, next-step speeds",
    ),
    DatasetPreset(
        id="gaussian",
        kind="grid",
        height=4, width=4, steps=1500,
        params={"heteroscedasticity": 0.0},
        description="Homoscedastic Gaussian noise for MC dropout calibration",
    ),
    DatasetPreset(
        id="motorcycle",
        kind="pairs",
        window=1, horizon=0,
        fractions=(2.0 / 3.0, 0.0, 1.0 / 3.0),
        levels=DEFAULT_LEVELS,
        intervals=DEFAULT_INTERVALS,
        report_scale="standardized",
        description="Crash-test accelerations; CSV path or the offline surrogate",
    ),
]

PRESET_MAP = {p.id: p for p in DATASET_PRESETS}


def get_family(family_id):
    if family_id not in FAMILY_MAP:
        raise ValueError(f"Unknown model family {family_id!r}; valid: {sorted(FAMILY_MAP)}")
    return FAMILY_MAP[family_id]


def get_preset(preset_id):
    if preset_id not in PRESET_MAP:
        raise ValueError(f"Unknown dataset preset {preset_id!r}; valid: {sorted(PRESET_MAP)}")
    return PRESET_MAP[preset_id]


def network_for(family, dataset_kind):
    if family.network != "auto":
        return family.network
    return "convlstm" if dataset_kind == "grid" else "mlp"


def build_network(network, heads, spec, n_features, seed):
    """One untrained network of type ``network`` with the given heads.

    ``spec`` is the run's model block; ``n_features`` is the input channel
    count for ConvLSTMs, the input width for MLPs and the lag-feature count
    for linear models.
    """
    if network == "mlp":
        return JointMLP(heads, n_features, spec.hidden, spec.activations, spec.keep, seed)
    if network == "convlstm":
        return DeepJMQRNet(heads, n_features, spec.filters, spec.kernel_size, spec.keep,
                           spec.output_gate_source, seed)
    if network == "linear":
        return LinearModel(heads, n_features, seed=seed)
    raise ValueError(f"Unknown network type {network!r}")


def build_model(family_id, heads, spec, dataset_kind, n_features, seed):
    """Untrained model for a family; independent families return an ensemble."""
    family = get_family(family_id)
    network = network_for(family, dataset_kind)
    if network == "convlstm" and dataset_kind != "grid":
        raise ValueError(f"Family {family_id!r} needs a grid dataset, got {dataset_kind!r}")
    if network == "mlp" and dataset_kind != "pairs":
        raise ValueError(f"Family {family_id!r} needs a pairs dataset, got {dataset_kind!r}")
    if family.training in ("mean", "mc_dropout"):
        heads = [MEAN_HEAD]
    if family.training == "independent":
        return IndependentEnsemble([build_network(network, [h], spec, n_features, seed)
                                    for h in heads])
    return build_network(network, heads, spec, n_features, seed)


def model_from_descriptor(desc):
    """Rebuild an (untrained) model with the architecture in ``desc``."""
    family = desc.get("family")
    if family == JointMLP.family:
        return JointMLP(desc["heads"], desc["n_inputs"], tuple(desc["hidden"]),
                        tuple(desc["activations"]), desc["keep"], desc["seed"])
    if family == DeepJMQRNet.family:
        return DeepJMQRNet(desc["heads"], desc["in_channels"], tuple(desc["filters"]),
                           tuple(desc["kernel_size"]), desc["keep"],
                           desc["output_gate_source"], desc["seed"])
    if family == LinearModel.family:
        return LinearModel(desc["heads"], desc["n_features"], desc["kept"],
                           desc["feature_mean"], desc["feature_std"], desc["seed"])
    if family == IndependentEnsemble.family:
        return IndependentEnsemble([model_from_descriptor(m) for m in desc["members"]])
    if family == "mc_dropout":
        return MCDropoutPredictor(model_from_descriptor(desc["network"]), desc["n_samples"],
                                  desc["sigma2"], desc["calibration"])
    raise ValueError(f"Unknown model family in descriptor: {family!r}")
