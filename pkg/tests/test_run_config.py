"""
Tests for run configuration: strict loading, overrides, preset resolution
and the model registry behind it.
"""
import json

import pytest

from model_registry import FAMILY_MAP, build_model, get_family, get_preset, network_for
from models import DeepJMQRNet, IndependentEnsemble, JointMLP
from run_config import (
    ConfigError, ModelSpec, RunConfig, apply_overrides, config_from_dict, config_to_dict,
    load_config, parse_intervals, resolve, write_config,
)


def _resolved(**data):
    return resolve(config_from_dict(data))


# ==========================================================================
# loading
# ==========================================================================

class TestLoading:
    def test_defaults(self):
        cfg = config_from_dict({})
        assert cfg.dataset.preset == "taxi"
        assert cfg.model.family == "deepjmqr"

    def test_unknown_key_names_path(self):
        with pytest.raises(ConfigError) as exc:
            config_from_dict({"dataset": {"bogus": 1}})
        assert exc.value.key == "dataset.bogus"

    def test_wrong_type(self):
        with pytest.raises(ConfigError) as exc:
            config_from_dict({"train": {"epochs": "ten"}})
        assert exc.value.key == "train.epochs"

    def test_boolean_is_not_a_number(self):
        with pytest.raises(ConfigError):
            config_from_dict({"seed": True})

    def test_int_accepted_for_float(self):
        assert config_from_dict({"train": {"lr": 1}}).train.lr == 1.0

    def test_block_must_be_object(self):
        with pytest.raises(ConfigError):
            config_from_dict({"model": []})

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_config(tmp_path / "none.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(ConfigError, match="not valid JSON"):
            load_config(path)

    def test_write_and_reload_resolved(self, tmp_path):
        cfg = _resolved(seed=4, dataset={"preset": "motorcycle"}, model={"family": "joint_mlp"})
        path = tmp_path / "config.json"
        write_config(path, cfg)
        again = resolve(load_config(path))
        assert config_to_dict(again) == config_to_dict(cfg)
        assert json.loads(path.read_text(encoding="utf-8"))["seed"] == 4


# ==========================================================================
# overrides
# ==========================================================================

class TestOverrides:
    def test_flags_win(self):
        cfg = apply_overrides(RunConfig(seed=1), seed=9, repeats=3, levels="0.1,0.9",
                              intervals="0.1:0.9")
        assert (cfg.seed, cfg.repeats) == (9, 3)
        assert cfg.levels == [0.1, 0.9]
        assert cfg.intervals == [[0.1, 0.9]]

    @pytest.mark.parametrize("text", ["0.1-0.9", "a:b", ""])
    def test_bad_intervals(self, text):
        with pytest.raises(ConfigError):
            parse_intervals(text)


# ==========================================================================
# resolution
# ==========================================================================

class TestResolve:
    def test_taxi_defaults(self):
        cfg = _resolved()
        assert (cfg.dataset.height, cfg.dataset.width, cfg.dataset.steps) == (8, 8, 2000)
        assert (cfg.dataset.window, cfg.dataset.horizon) == (10, 2)
        assert cfg.levels == [0.05, 0.1, 0.9, 0.95]
        assert cfg.intervals == [[0.05, 0.95], [0.1, 0.9]]
        assert cfg.model.keep == 0.8
        assert cfg.run_name == "taxi_deepjmqr_seed0"

    @pytest.mark.parametrize("preset,filters", [("taxi", [100]), ("copenhagen", [20]), ("gaussian", [16])])
    def test_filters_follow_preset(self, preset, filters):
        assert _resolved(dataset={"preset": preset}).model.filters == filters

    def test_explicit_filters_win(self):
        assert _resolved(model={"filters": [4, 3]}).model.filters == [4, 3]

    @pytest.mark.parametrize("filters", [[], [0], [2.5]])
    def test_bad_filters(self, filters):
        with pytest.raises(ConfigError) as exc:
            _resolved(model={"filters": filters})
        assert exc.value.key == "model.filters"

    def test_motorcycle_defaults(self):
        cfg = _resolved(dataset={"preset": "motorcycle"}, model={"family": "joint_mlp"})
        assert cfg.levels == [0.05, 0.2, 0.8, 0.95]
        assert cfg.model.keep == 1.0
        assert cfg.dataset.report_scale == "standardized"
        assert cfg.label == "Joint MLP"

    def test_explicit_values_survive(self):
        cfg = _resolved(dataset={"preset": "taxi", "height": 3, "params": {"noise": 2.0}})
        assert cfg.dataset.height == 3
        assert cfg.dataset.params == {"noise": 2.0}

    def test_preset_params_merge(self):
        cfg = _resolved(dataset={"preset": "copenhagen", "params": {"noise": 2.0}})
        assert cfg.dataset.params == {"period": 288, "heteroscedasticity": 2.0, "noise": 2.0}

    def test_unknown_preset_lists_valid(self):
        with pytest.raises(ConfigError, match="taxi"):
            _resolved(dataset={"preset": "nyc"})

    def test_unknown_family(self):
        with pytest.raises(ConfigError) as exc:
            _resolved(model={"family": "transformer"})
        assert exc.value.key == "model.family"

    def test_unknown_synthetic_parameter(self):
        with pytest.raises(ConfigError):
            _resolved(dataset={"params": {"trend": 1.0}})

    def test_interval_must_use_known_levels(self):
        with pytest.raises(ConfigError, match="not among"):
            _resolved(levels=[0.1, 0.9], intervals=[[0.05, 0.95]])

    def test_interval_order(self):
        with pytest.raises(ConfigError):
            _resolved(levels=[0.1, 0.9], intervals=[[0.9, 0.1]])

    def test_mean_only_family_has_no_intervals(self):
        assert _resolved(model={"family": "linear"}).intervals == []

    def test_mc_dropout_needs_dropout(self):
        with pytest.raises(ConfigError):
            _resolved(model={"family": "mc_dropout", "keep": 1.0})

    def test_bad_gate_source(self):
        with pytest.raises(ConfigError):
            _resolved(model={"output_gate_source": "input"})

    def test_bad_training_settings(self):
        with pytest.raises(ConfigError) as exc:
            _resolved(train={"batch_size": 0})
        assert exc.value.key == "train"

    def test_repeat_seeds(self):
        assert _resolved(seed=5, repeats=3).repeat_seeds() == [5, 6, 7]


# ==========================================================================
# registry
# ==========================================================================

class TestRegistry:
    def test_families(self):
        assert set(FAMILY_MAP) == {"joint_mlp", "deepjmqr", "independent", "linear",
                                   "linear_qr", "mc_dropout"}

    def test_auto_network(self):
        fam = get_family("independent")
        assert network_for(fam, "grid") == "convlstm"
        assert network_for(fam, "pairs") == "mlp"

    def test_unknown_names(self):
        with pytest.raises(ValueError):
            get_family("nope")
        with pytest.raises(ValueError):
            get_preset("nope")

    def test_build_joint_and_independent(self):
        spec = ModelSpec(hidden=[4], activations=["tanh"], keep=1.0)
        heads = ["mean", 0.1, 0.9]
        joint = build_model("joint_mlp", heads, spec, "pairs", 1, seed=0)
        assert isinstance(joint, JointMLP) and joint.heads == heads
        ens = build_model("independent", heads, spec, "pairs", 1, seed=0)
        assert isinstance(ens, IndependentEnsemble) and len(ens.members) == 3
        mc = build_model("mc_dropout", heads, spec, "pairs", 1, seed=0)
        assert mc.heads == ["mean"]

    def test_convlstm_needs_grid(self):
        spec = ModelSpec(filters=[2], keep=0.8)
        assert isinstance(build_model("deepjmqr", ["mean"], spec, "grid", 1, 0), DeepJMQRNet)
        with pytest.raises(ValueError):
            build_model("deepjmqr", ["mean"], spec, "pairs", 1, 0)
