"""
Shared pytest fixtures for the CHE toolkit test suite.
========================================================
Provides tiny hand-built cohorts, small generated cohorts, toy models and
seeded random generators reused across modules.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# ---------------------------------------------------------------------------
# Ensure src is importable
# ---------------------------------------------------------------------------
_PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(_PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(_PROJECT_ROOT))

from src.encoders import Model
from src.models import GeneratorConfig, ModelKind, PatientRecord, Visit
from src.synth_ehr import generate_cohort


# ═══════════════════════════════════════════════════════════════════════════
# Builders
# ═══════════════════════════════════════════════════════════════════════════


def make_record(pid: str, visits, env: str = "medicare") -> PatientRecord:
    """Build a record from [(dx codes, px codes), ...]."""
    return PatientRecord(id=pid, env=env, visits=[Visit(dx=dx, px=px) for dx, px in visits])


# ═══════════════════════════════════════════════════════════════════════════
# Fixtures
# ═══════════════════════════════════════════════════════════════════════════


@pytest.fixture
def rng():
    """Seeded numpy generator."""
    return np.random.default_rng(0)


@pytest.fixture
def tiny_records():
    """Three hand-built patients over M=6, N=5 (3 + 2 + 2 prediction points)."""
    return [
        make_record("p0", [([0, 1], [0]), ([2], [1, 2]), ([3, 4], [3]), ([5], [4])]),
        make_record("p1", [([1], [1]), ([0, 5], [2]), ([2, 3], [0, 4])]),
        make_record("p2", [([4], [3]), ([4, 5], [3, 4]), ([0], [0])]),
    ]


@pytest.fixture
def tiny_model():
    """LSTM over the tiny vocabulary (M=6, N=5, r=4)."""
    return Model(ModelKind.LSTM, 6, 5, 4, seed=0)


@pytest.fixture
def small_config():
    """Generator config for fast synthetic cohorts."""
    return GeneratorConfig(patients=30, M=20, N=10, S=4, mean_visits=3.5, mean_codes=2.0, seed=7)


@pytest.fixture
def small_cohorts(small_config):
    """(train-env cohort, test-env cohort, spec) sharing one world."""
    train, spec = generate_cohort(small_config, small_config.env_train)
    test, _ = generate_cohort(small_config, small_config.env_test, spec)
    return train, test, spec


@pytest.fixture
def record_factory():
    """The make_record builder, for tests that assemble their own patients."""
    return make_record
