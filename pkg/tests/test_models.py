"""
Tests for the CHE Pydantic models.
====================================
Validates enums, patient records and visits, vocabulary checks,
configuration blocks and report containers defined in src/models.py.
"""

import sys
from pathlib import Path

import pytest
from pydantic import ValidationError

_PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(_PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(_PROJECT_ROOT))

from src.models import (
    METRIC_NAMES,
    CausalSpec,
    CodeVocab,
    Cohort,
    DataSplits,
    GeneratorConfig,
    HsicConfig,
    Method,
    ModelKind,
    PatientRecord,
    SigmaPolicy,
    SplitProtocol,
    Stream,
    TrainConfig,
    TrainState,
    Visit,
    prediction_points,
)


# ═══════════════════════════════════════════════════════════════════════════
# Enum Tests
# ═══════════════════════════════════════════════════════════════════════════


class TestEnums:
    """Verify enum values used on the command line and in files."""

    def test_model_kinds(self):
        assert [k.value for k in ModelKind] == ["lstm", "reverse_attention", "bi_attention"]

    def test_methods(self):
        assert {m.value for m in Method} == {"base", "pw", "che"}

    def test_protocols(self):
        assert SplitProtocol("env") is SplitProtocol.ENV

    def test_sigma_policy(self):
        assert SigmaPolicy("median_heuristic") is SigmaPolicy.MEDIAN_HEURISTIC

    def test_metric_names(self):
        assert METRIC_NAMES == ("ndcg@10", "ndcg@20", "acc@10", "acc@20")


# ═══════════════════════════════════════════════════════════════════════════
# Patient Data
# ═══════════════════════════════════════════════════════════════════════════


class TestVisit:
    """Visit code sets."""

    def test_codes_are_sorted_and_deduplicated(self):
        assert Visit(dx=[3, 1, 3], px=[2]).dx == [1, 3]

    def test_empty_set_rejected(self):
        with pytest.raises(ValidationError):
            Visit(dx=[], px=[1])

    def test_negative_code_rejected(self):
        with pytest.raises(ValidationError):
            Visit(dx=[0], px=[-1])


class TestPatientRecord:
    """Record accessors and the three-visit minimum."""

    def test_prefixes_and_target(self, tiny_records):
        record = tiny_records[0]
        assert record.t == 4
        assert list(record.prefix_lengths) == [1, 2, 3]
        assert record.target(1) == [2]
        assert record.codes(Stream.PX, 2) == [[0], [1, 2]]

    def test_max_codes(self, tiny_records):
        assert tiny_records[0].max_codes() == (5, 4)

    def test_needs_three_visits(self, record_factory):
        with pytest.raises(ValidationError):
            record_factory("short", [([0], [0]), ([1], [1])])

    def test_prediction_points(self, tiny_records):
        points = prediction_points(tiny_records)
        assert points[:3] == [(0, 1), (0, 2), (0, 3)]
        assert len(points) == 7


class TestVocabulary:
    """Vocabulary bounds on cohorts."""

    def test_check_passes(self, tiny_records):
        CodeVocab(M=6, N=5).check(tiny_records[0])

    def test_check_fails_on_overflow(self, tiny_records):
        with pytest.raises(ValueError, match="outside vocabulary"):
            CodeVocab(M=5, N=5).check(tiny_records[0])

    def test_cohort_validates_records(self, tiny_records):
        with pytest.raises(ValidationError):
            Cohort(env="medicare", vocab=CodeVocab(M=6, N=4), records=tiny_records)

    def test_split_sizes(self, tiny_records):
        splits = DataSplits(train=tiny_records[:2], val=tiny_records[2:], test=[])
        assert splits.sizes() == (2, 1, 0)


# ═══════════════════════════════════════════════════════════════════════════
# Configuration
# ═══════════════════════════════════════════════════════════════════════════


class TestConfigs:
    """Configuration defaults and validators."""

    def test_train_defaults(self):
        config = TrainConfig()
        assert (config.weight_min, config.weight_max) == (0.05, 20.0)
        assert config.epsilon == 0.3

    def test_weight_bounds_must_bracket_one(self):
        with pytest.raises(ValidationError):
            TrainConfig(weight_min=1.5)

    def test_negative_epsilon_rejected(self):
        with pytest.raises(ValidationError):
            TrainConfig(epsilon=-0.1)

    def test_hsic_dimension_floor(self):
        with pytest.raises(ValidationError):
            HsicConfig(r=1)

    def test_generator_needs_vocab_per_state(self):
        with pytest.raises(ValidationError):
            GeneratorConfig(M=5, S=6)

    def test_rho_lookup(self, small_config):
        assert small_config.rho_for("private") == small_config.rho_test

    def test_train_state_excludes_best_params(self):
        state = TrainState(best_params={"w": [1.0]})
        assert "best_params" not in state.model_dump()


class TestCausalSpecModel:
    """Ground-truth container validation."""

    BASE = dict(
        states=1, transition=[[1.0]], emission=[[0.5, 0.5]],
        policy=[0, 0], treatment_effects=[[0.0, 0.0]], rho={"medicare": 0.9},
    )

    def test_inert_procedures(self):
        assert CausalSpec(**self.BASE).procedures_inert

    def test_active_procedures(self):
        spec = CausalSpec(**{**self.BASE, "treatment_effects": [[0.0, 1.0]]})
        assert not spec.procedures_inert

    def test_rows_must_be_stochastic(self):
        with pytest.raises(ValidationError):
            CausalSpec(**{**self.BASE, "emission": [[0.5, 0.6]]})

    def test_rho_range(self):
        with pytest.raises(ValidationError):
            CausalSpec(**{**self.BASE, "rho": {"medicare": 1.2}})
