"""
Tests for the permutation-weighting baseline.
===============================================
Negative generation (equal-length permutation, collisions, fallback),
the propensity discriminator, odds weights and the PW training run.
"""

import json
import math
import sys
from pathlib import Path

import numpy as np
import pytest

_PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(_PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(_PROJECT_ROOT))

from src.che_trainer import fit
from src.encoders import Model
from src.errors import InvalidArgumentError
from src.models import Method, ModelKind, PwConfig, Stream, TrainConfig, prediction_points
from src.pw_baseline import (
    NegativeSample,
    NegativeSet,
    PropensityClassifier,
    fit_propensity,
    fit_pw,
    generate_negatives,
    propensity_weights,
    pw_weights,
)

FAST = TrainConfig(max_epochs=2, batch_size=4, dropout=0.0, seed=0)
FAST_PW = PwConfig(negative_multiplier=2, max_epochs=2, patience=1, batch_size=16)


def _px_key(record, j):
    return tuple(tuple(c) for c in record.codes(Stream.PX, j))


def _identical_negatives(records, multiplier):
    """Every point's negatives repeat its own observed procedure prefix."""
    samples = [
        NegativeSample((i, j), _px_key(records[i], j), collision=True)
        for i, j in prediction_points(records)
        for _ in range(multiplier)
    ]
    return NegativeSet(samples=samples)


# ═══════════════════════════════════════════════════════════════════════════
# Negatives
# ═══════════════════════════════════════════════════════════════════════════


class TestGenerateNegatives:
    """Across-sample procedure permutation."""

    def test_count(self, tiny_records):
        negatives = generate_negatives(tiny_records, multiplier=10, seed=0)
        assert len(negatives) == 10 * len(prediction_points(tiny_records))

    def test_zero_multiplier(self, tiny_records):
        assert len(generate_negatives(tiny_records, multiplier=0)) == 0

    def test_reproducible(self, tiny_records):
        a = generate_negatives(tiny_records, multiplier=5, seed=3)
        b = generate_negatives(tiny_records, multiplier=5, seed=3)
        assert a.samples == b.samples

    def test_partners_share_prefix_length(self, tiny_records):
        negatives = generate_negatives(tiny_records, multiplier=5, seed=1)
        for sample in negatives.samples:
            assert len(sample.px_codes) == sample.dx_point[1]

    def test_non_fallback_negatives_come_from_other_points(self, tiny_records):
        negatives = generate_negatives(tiny_records, multiplier=5, seed=1)
        for sample in negatives.samples:
            if sample.fallback:
                continue
            i, j = sample.dx_point
            donors = {_px_key(tiny_records[k], j) for k in range(len(tiny_records)) if k != i}
            assert sample.px_codes in donors

    def test_observed_pairs_only_on_collision_path(self, tiny_records):
        observed = {
            (tuple(tuple(c) for c in tiny_records[i].codes(Stream.DX, j)), _px_key(tiny_records[i], j))
            for i, j in prediction_points(tiny_records)
        }
        negatives = generate_negatives(tiny_records, multiplier=10, seed=2)
        for sample in negatives.samples:
            i, j = sample.dx_point
            dx = tuple(tuple(c) for c in tiny_records[i].codes(Stream.DX, j))
            if (dx, sample.px_codes) in observed:
                assert sample.collision

    def test_unique_length_uses_fallback(self, tiny_records):
        # only patient p0 has a prefix of length 3
        negatives = generate_negatives(tiny_records, multiplier=4, seed=0)
        assert negatives.fallback_points == 1
        fallback = [s for s in negatives.samples if s.fallback]
        assert len(fallback) == 4
        for sample in fallback:
            assert sample.dx_point == (0, 3)
            assert sorted(sample.px_codes) == sorted(_px_key(tiny_records[0], 3))

    def test_empty_dataset(self):
        with pytest.raises(InvalidArgumentError):
            generate_negatives([], multiplier=1)

    def test_negative_multiplier(self, tiny_records):
        with pytest.raises(InvalidArgumentError):
            generate_negatives(tiny_records, multiplier=-1)

    def test_write_jsonl(self, tmp_path, tiny_records):
        negatives = generate_negatives(tiny_records, multiplier=2, seed=0)
        path = negatives.write_jsonl(tmp_path / "negatives.jsonl")
        lines = path.read_text(encoding="utf-8").splitlines()
        assert len(lines) == len(negatives)
        first = json.loads(lines[0])
        assert set(first) == {"dx_point", "px", "collision", "fallback"}


# ═══════════════════════════════════════════════════════════════════════════
# Discriminator and weights
# ═══════════════════════════════════════════════════════════════════════════


class TestPropensity:
    """Classifier head, probabilities and odds weights."""

    def test_parameters(self):
        clf = PropensityClassifier(ModelKind.LSTM, 6, 5, 4, seed=0)
        assert clf.params["head.W"].shape == (12,)
        assert clf.params["head.b"].shape == (1,)
        assert not any(name.startswith("predictor.") for name in clf.params)

    def test_probability_is_open_interval(self, tiny_records):
        clf = PropensityClassifier(ModelKind.BI_ATTENTION, 6, 5, 4, seed=0)
        record = tiny_records[0]
        p = clf.probability(record.codes(Stream.DX, 2), record.codes(Stream.PX, 2))
        assert 0.0 < p < 1.0

    def test_state_round_trip(self):
        clf = PropensityClassifier(ModelKind.LSTM, 6, 5, 4, seed=0)
        state = clf.state_dict()
        clf.params["head.b"].data[:] = 3.0
        clf.load_state_dict(state)
        assert clf.params["head.b"].data[0] == 0.0

    def test_even_odds_give_unit_weights(self):
        np.testing.assert_allclose(pw_weights([0.5, 0.5, 0.5]), [1.0, 1.0, 1.0])

    def test_odds_are_normalized(self):
        # odds 0.25, 1, 4 -> mean 1.75
        np.testing.assert_allclose(pw_weights([0.2, 0.5, 0.8]), np.array([0.25, 1.0, 4.0]) / 1.75)

    def test_extreme_probabilities_are_bounded(self):
        weights = pw_weights([1e-12, 0.5, 1.0 - 1e-12, 0.5])
        assert weights.min() >= 0.05 - 1e-12
        assert weights.max() <= 20.0 + 1e-12
        assert weights.mean() == pytest.approx(1.0)

    def test_fit_propensity(self, tiny_records):
        negatives = generate_negatives(tiny_records, multiplier=2, seed=0)
        result = fit_propensity(tiny_records, negatives, FAST_PW, ModelKind.LSTM, 6, 5, 4, seed=0)
        assert 1 <= result.epochs <= FAST_PW.max_epochs
        if math.isnan(result.holdout_auc):
            assert result.warnings
        else:
            assert 0.0 <= result.holdout_auc <= 1.0


    def test_holdout_keeps_points_whole(self, tiny_records):
        negatives = _identical_negatives(tiny_records, 10)
        result = fit_propensity(tiny_records, negatives, FAST_PW, ModelKind.LSTM, 6, 5, 4, seed=0)
        # one held-out point: its positive and negatives share one input
        assert result.holdout_auc == pytest.approx(0.5, abs=1e-12)
        assert not result.informative
    def test_fit_propensity_needs_negatives(self, tiny_records):
        with pytest.raises(InvalidArgumentError):
            fit_propensity(tiny_records, generate_negatives(tiny_records, multiplier=0))

    def test_propensity_weights_cover_training_points(self, tiny_records):
        clf = PropensityClassifier(ModelKind.LSTM, 6, 5, 4, seed=0)
        table = propensity_weights(clf, tiny_records)
        assert table.covers(prediction_points(tiny_records))
        assert table.values.mean() == pytest.approx(1.0)


# ═══════════════════════════════════════════════════════════════════════════
# PW training run
# ═══════════════════════════════════════════════════════════════════════════


class TestFitPw:

    def test_run_completes(self, tiny_records):
        model = Model(ModelKind.LSTM, 6, 5, 4, seed=0)
        result = fit_pw(model, tiny_records, tiny_records, FAST, FAST_PW)
        assert result.weights.values.mean() == pytest.approx(1.0)
        assert np.all(np.isfinite(result.weights.values))
        np.testing.assert_array_equal(result.fit.weights.values, result.weights.values)
        assert result.fit.state.n >= 1
        assert len(result.negatives) == 2 * len(prediction_points(tiny_records))

    def test_without_negatives_matches_base(self, tiny_records):
        pw_config = FAST_PW.model_copy(update={"negative_multiplier": 0})
        pw = fit_pw(Model(ModelKind.LSTM, 6, 5, 4, seed=5), tiny_records, tiny_records, FAST, pw_config)
        base = fit(Model(ModelKind.LSTM, 6, 5, 4, seed=5), tiny_records, tiny_records, FAST, Method.BASE)
        assert math.isnan(pw.holdout_auc)
        assert pw.warnings
        for name, value in base.model.state_dict().items():
            np.testing.assert_array_equal(pw.fit.model.params[name].data, value)

    def test_indistinguishable_negatives_give_uniform_weights(self, tiny_records):
        pw_config = FAST_PW.model_copy(update={"negative_multiplier": 10, "max_epochs": 3})
        negatives = _identical_negatives(tiny_records, 10)
        result = fit_pw(
            Model(ModelKind.LSTM, 6, 5, 4, seed=0), tiny_records, tiny_records, FAST, pw_config, negatives=negatives,
        )
        np.testing.assert_array_equal(result.weights.values, np.ones(len(prediction_points(tiny_records))))
        assert any("chance" in message for message in result.warnings)
        assert result.negatives is negatives
