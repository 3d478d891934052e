"""
Tests for dotted-key run configuration.
=========================================
Settings defaults, config files, flag overrides, resolved snapshots and
sweep grids.
"""

import sys
from pathlib import Path

import pytest

_PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(_PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(_PROJECT_ROOT))

from config.settings import CheSettings
from src.errors import ConfigError
from src.models import Method, ModelKind, SigmaPolicy, SplitProtocol
from src.run_config import (
    RESOLVED_NAME,
    RunConfig,
    format_value,
    grid_points,
    parse_assignments,
    parse_grid,
    read_config_file,
    resolve,
)


# ═══════════════════════════════════════════════════════════════════════════
# Construction
# ═══════════════════════════════════════════════════════════════════════════


class TestFromSettings:
    """Defaults flow from CheSettings into the nested blocks."""

    def test_defaults(self):
        config = RunConfig.from_settings(CheSettings())
        assert config.train.epsilon == 0.3
        assert config.hsic.sigma_policy is SigmaPolicy.MEDIAN_HEURISTIC
        assert config.run.seeds == [0, 1, 2, 3, 4]
        assert config.run.ks == [10, 20]

    def test_custom_settings(self):
        config = RunConfig.from_settings(CheSettings(TRAIN_EPSILON=1.0, SWEEP_SEEDS="3,4", GEN_PATIENTS=40))
        assert config.train.epsilon == 1.0
        assert config.run.seeds == [3, 4]
        assert config.generator.patients == 40

    def test_known_keys_are_dotted(self):
        keys = RunConfig.known_keys()
        assert "train.epsilon" in keys
        assert "generator.rho_train" in keys
        assert "pw.dump_negatives" in keys
        assert all(k.count(".") == 1 for k in keys)


# ═══════════════════════════════════════════════════════════════════════════
# Overrides
# ═══════════════════════════════════════════════════════════════════════════


class TestOverrides:
    """Dotted-key overrides with validation."""

    def test_string_values_are_coerced(self):
        config = RunConfig().with_overrides({
            "train.epsilon": "1.5", "train.batch_size": "8", "run.method": "pw",
            "run.model_kind": "bi_attention", "run.protocol": "random", "pw.dump_negatives": "true",
        })
        assert config.train.epsilon == 1.5
        assert config.train.batch_size == 8
        assert config.run.method is Method.PW
        assert config.run.model_kind is ModelKind.BI_ATTENTION
        assert config.run.protocol is SplitProtocol.RANDOM
        assert config.pw.dump_negatives is True

    def test_comma_separated_lists(self):
        config = RunConfig().with_overrides({"run.seeds": "7, 8", "run.ks": "5"})
        assert config.run.seeds == [7, 8]
        assert config.run.ks == [5]

    def test_original_is_unchanged(self):
        config = RunConfig()
        config.with_overrides({"train.epsilon": 2.0})
        assert config.train.epsilon == 0.3

    def test_unknown_keys_reported_together(self):
        with pytest.raises(ConfigError) as exc:
            RunConfig().with_overrides({"train.nope": 1, "bogus.key": 2, "train.epsilon": 1.0})
        assert exc.value.keys == ["bogus.key", "train.nope"]

    def test_invalid_values_name_their_keys(self):
        with pytest.raises(ConfigError) as exc:
            RunConfig().with_overrides({"train.epsilon": "-1", "train.batch_size": "0"})
        assert set(exc.value.keys) == {"train.epsilon", "train.batch_size"}

    def test_cross_field_validation(self):
        with pytest.raises(ConfigError):
            RunConfig().with_overrides({"train.weight_min": "2.0"})

    def test_non_positive_ks_rejected(self):
        with pytest.raises(ConfigError):
            RunConfig().with_overrides({"run.ks": "0,10"})


# ═══════════════════════════════════════════════════════════════════════════
# Resolved snapshot and config files
# ═══════════════════════════════════════════════════════════════════════════


class TestResolved:
    """config.resolved format and reproducibility."""

    def test_format_value(self):
        assert format_value(None) == ""
        assert format_value(True) == "true"
        assert format_value(0.1) == "0.1"
        assert format_value([10, 20]) == "10,20"
        assert format_value(ModelKind.LSTM) == "lstm"

    def test_resolved_text_is_sorted_key_value_lines(self):
        lines = RunConfig().resolved_text().splitlines()
        keys = [line.split(" = ", 1)[0] for line in lines]
        assert keys == sorted(keys)
        assert "train.epsilon = 0.3" in lines
        assert "run.ks = 10,20" in lines

    def test_resolved_file_reproduces_config(self, tmp_path):
        config = RunConfig().with_overrides({
            "train.epsilon": "3.0", "run.model_kind": "reverse_attention",
            "hsic.sigma_policy": "fixed", "hsic.sigma": "0.5", "run.seeds": "1,2",
        })
        path = config.write_resolved(tmp_path)
        assert path.name == RESOLVED_NAME
        again = resolve(path)
        assert again.flatten() == config.flatten()

    def test_flags_override_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("train.epsilon = 1.0\ntrain.hidden = 8\n", encoding="utf-8")
        config = resolve(path, {"train.epsilon": "10.0"})
        assert config.train.epsilon == 10.0
        assert config.train.hidden == 8

    def test_unknown_key_in_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("train.epsilonn = 1.0\n", encoding="utf-8")
        with pytest.raises(ConfigError) as exc:
            resolve(path)
        assert exc.value.keys == ["train.epsilonn"]

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            read_config_file(tmp_path / "absent.cfg")


# ═══════════════════════════════════════════════════════════════════════════
# Assignments and grids
# ═══════════════════════════════════════════════════════════════════════════


class TestAssignments:

    def test_parse(self):
        assert parse_assignments(["train.epsilon=0.1", " run.jobs = 2 "]) == {
            "train.epsilon": "0.1", "run.jobs": "2",
        }

    def test_none(self):
        assert parse_assignments(None) == {}

    def test_malformed_rejected_together(self):
        with pytest.raises(ConfigError) as exc:
            parse_assignments(["novalue", "=1", "ok=1"])
        assert exc.value.keys == ["=1", "novalue"]


class TestGrid:

    def test_parse_grid(self):
        grid = parse_grid(["train.epsilon=0.1,0.3", "train.hidden=8"])
        assert grid == {"train.epsilon": ["0.1", "0.3"], "train.hidden": ["8"]}

    def test_bare_key_uses_default_axis(self):
        grid = parse_grid(["train.epsilon", "train.hidden=8"])
        assert grid["train.epsilon"] == ["0.1", "0.3", "1.0", "3.0", "10.0"]
        assert grid["train.hidden"] == ["8"]

    def test_bare_key_without_default(self):
        with pytest.raises(ConfigError):
            parse_grid(["train.seed"])

    def test_empty_axis_rejected(self):
        with pytest.raises(ConfigError):
            parse_grid(["train.epsilon="])

    def test_grid_points_product(self):
        points = grid_points({"train.hidden": ["8", "16"], "train.epsilon": ["0.1", "0.3", "1.0"]})
        assert len(points) == 6
        assert points[0] == (("train.epsilon", "0.1"), ("train.hidden", "8"))

    def test_empty_grid_is_single_point(self):
        assert grid_points({}) == [()]
