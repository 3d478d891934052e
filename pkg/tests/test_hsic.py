"""
Tests for the dimension-wise HSIC.
====================================
Closed-form values at r = 2, independence of constant vectors, weight
scaling under a frozen bandwidth, weight gradients and split averages.
"""

import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

_PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(_PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(_PROJECT_ROOT))

from src.encoders import Model
from src.errors import InvalidArgumentError, ShapeError
from src.hsic import (
    bandwidths,
    centering_matrix,
    hsic_aggregate,
    hsic_local,
    median_sigma,
    rbf_kernel_matrix,
    split_hsic,
)
from src.models import HsicConfig, ModelKind, SigmaPolicy, prediction_points
from src.tensor import Tensor, grad_check
from src.weights import SampleWeightTable

FIXED = HsicConfig(sigma_policy=SigmaPolicy.FIXED, sigma=1.0)


# ═══════════════════════════════════════════════════════════════════════════
# Building blocks
# ═══════════════════════════════════════════════════════════════════════════


class TestKernels:
    """RBF kernel, centering matrix and bandwidth selection."""

    def test_kernel_diagonal_is_one(self):
        k = rbf_kernel_matrix(Tensor([0.1, -2.0, 3.0]), 1.5).data
        np.testing.assert_allclose(np.diag(k), [1.0, 1.0, 1.0])

    def test_kernel_value(self):
        k = rbf_kernel_matrix(Tensor([0.0, 2.0]), 2.0).data
        assert k[0, 1] == pytest.approx(math.exp(-1.0))

    def test_kernel_rejects_zero_bandwidth(self):
        with pytest.raises(InvalidArgumentError):
            rbf_kernel_matrix(Tensor([0.0, 1.0]), 0.0)

    def test_centering_matrix_annihilates_ones(self):
        J = centering_matrix(5)
        np.testing.assert_allclose(J @ np.ones(5), np.zeros(5), atol=1e-15)

    def test_centering_needs_two(self):
        with pytest.raises(InvalidArgumentError):
            centering_matrix(1)

    def test_median_sigma(self):
        # squared distances 1, 4, 1 -> median 1
        assert median_sigma(np.array([0.0, 1.0, 2.0])) == pytest.approx(1.0)

    def test_median_sigma_of_constant_vector(self):
        assert median_sigma(np.array([3.0, 3.0, 3.0])) == 1.0

    def test_fixed_policy_ignores_data(self):
        assert bandwidths(np.array([0.0, 9.0]), np.array([1.0, 5.0]), HsicConfig(
            sigma_policy=SigmaPolicy.FIXED, sigma=0.7)) == (0.7, 0.7)


# ═══════════════════════════════════════════════════════════════════════════
# Local HSIC
# ═══════════════════════════════════════════════════════════════════════════


class TestHsicLocal:
    """Values of hsic_local against hand-derived results."""

    def test_two_dimensional_closed_form(self):
        # at r = 2, HSIC = (1 - k_d)(1 - k_p) with k the off-diagonal kernel entry
        value = hsic_local(np.array([0.0, 1.0]), np.array([0.0, 2.0]), FIXED).item()
        expected = (1.0 - math.exp(-1.0)) * (1.0 - math.exp(-4.0))
        assert value == pytest.approx(expected, rel=1e-12)

    def test_median_heuristic_at_r2(self):
        value = hsic_local(np.array([0.3, -1.2]), np.array([5.0, 4.0])).item()
        assert value == pytest.approx((1.0 - math.exp(-1.0)) ** 2, rel=1e-12)

    def test_weight_scales_inside_frozen_bandwidth(self):
        value = hsic_local(np.array([0.3, -1.2]), np.array([5.0, 4.0]), weight=2.0).item()
        assert value == pytest.approx((1.0 - math.exp(-4.0)) ** 2, rel=1e-12)

    def test_constant_vector_is_independent(self):
        value = hsic_local(np.array([0.5, 0.5, 0.5, 0.5]), np.array([1.0, -1.0, 2.0, 0.0])).item()
        assert value == pytest.approx(0.0, abs=1e-15)

    def test_symmetric_and_non_negative(self):
        gen = np.random.default_rng(3)
        for _ in range(5):
            a, b = gen.normal(size=6), gen.normal(size=6)
            ab = hsic_local(a, b).item()
            ba = hsic_local(b, a).item()
            assert ab == pytest.approx(ba, rel=1e-10)
            assert ab >= -1e-12

    def test_explicit_sigmas_override_policy(self):
        e_d, e_p = np.array([0.0, 1.0]), np.array([0.0, 2.0])
        assert hsic_local(e_d, e_p, sigmas=(1.0, 1.0)).item() == pytest.approx(
            hsic_local(e_d, e_p, FIXED).item()
        )

    def test_weight_gradient_matches_finite_difference(self):
        e_d = np.array([0.2, -0.4, 0.9, 0.1])
        e_p = np.array([0.5, 0.3, -0.8, 0.0])
        cfg = HsicConfig()
        sigmas = bandwidths(e_d, e_p, cfg)
        err = grad_check(lambda w: hsic_local(e_d, e_p, cfg, weight=w, sigmas=sigmas), np.array(1.3))
        assert err < 1e-6

    def test_embedding_gradient_matches_finite_difference(self):
        e_p = np.array([0.5, 0.3, -0.8, 0.0])
        err = grad_check(lambda x: hsic_local(x, e_p, FIXED), np.array([0.2, -0.4, 0.9, 0.1]))
        assert err < 1e-6

    def test_joint_permutation_leaves_value_unchanged(self):
        gen = np.random.default_rng(11)
        a, b = gen.normal(size=8), gen.normal(size=8)
        perm = gen.permutation(8)
        assert hsic_local(a[perm], b[perm]).item() == pytest.approx(hsic_local(a, b).item(), rel=1e-10)

    def test_permuting_one_side_changes_value(self):
        a = np.linspace(0.0, 1.0, 8)
        perm = np.array([3, 7, 0, 5, 1, 6, 2, 4])
        aligned = hsic_local(a, a.copy()).item()
        shuffled = hsic_local(a, a[perm]).item()
        assert shuffled < aligned
        assert abs(shuffled - aligned) > 1e-6 * aligned

    def test_dependent_pairs_score_above_independent_ones(self):
        gen = np.random.default_rng(5)
        independent, dependent = [], []
        for _ in range(200):
            e_d = gen.normal(size=32)
            independent.append(hsic_local(e_d, gen.normal(size=32)).item())
            dependent.append(hsic_local(e_d, e_d + 0.1 * gen.normal(size=32)).item())
        assert np.mean(dependent) > np.mean(independent)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            hsic_local(np.zeros(3), np.zeros(4))

    def test_needs_two_dimensions(self):
        with pytest.raises(InvalidArgumentError):
            hsic_local(np.zeros(1), np.zeros(1))

    def test_config_dimension_is_enforced(self):
        with pytest.raises(ShapeError):
            hsic_local(np.zeros(3), np.zeros(3), HsicConfig(r=4))

    def test_cost_does_not_grow_with_vocabulary(self, tiny_records):
        def best_time(M):
            model = Model(ModelKind.LSTM, M, M // 2, 8, seed=0)
            e_d, e_p = model.embed_point(tiny_records[0], 2)
            best = float("inf")
            for _ in range(5):
                started = time.perf_counter()
                for _ in range(50):
                    hsic_local(e_d, e_p)
                best = min(best, time.perf_counter() - started)
            return best

        assert best_time(400) <= 3.0 * best_time(12)


# ═══════════════════════════════════════════════════════════════════════════
# Aggregates
# ═══════════════════════════════════════════════════════════════════════════


class TestAggregate:
    """Mean over prediction points."""

    def test_mean_of_local_values(self):
        p1 = (np.array([0.0, 1.0]), np.array([0.0, 2.0]), 1.0)
        p2 = (np.array([1.0, 1.0]), np.array([0.0, 2.0]), 1.0)
        value = hsic_aggregate([p1, p2], FIXED).item()
        expected = 0.5 * (1.0 - math.exp(-1.0)) * (1.0 - math.exp(-4.0))
        assert value == pytest.approx(expected, rel=1e-12)

    def test_empty_pairs(self):
        with pytest.raises(InvalidArgumentError):
            hsic_aggregate([])

    def test_non_positive_weight(self):
        with pytest.raises(InvalidArgumentError):
            hsic_aggregate([(np.zeros(2), np.zeros(2), 0.0)])

    def test_split_hsic_uniform_weights_match_unweighted(self, tiny_model, tiny_records):
        table = SampleWeightTable.uniform(prediction_points(tiny_records))
        plain = split_hsic(tiny_model, tiny_records)
        weighted = split_hsic(tiny_model, tiny_records, weights=table)
        assert plain == weighted
        assert plain >= 0.0

    def test_split_hsic_does_not_record_graph(self, tiny_model, tiny_records):
        split_hsic(tiny_model, tiny_records)
        assert all(p.grad is None for p in tiny_model.params.values())

    def test_split_without_points(self, tiny_model):
        with pytest.raises(InvalidArgumentError):
            split_hsic(tiny_model, [])
