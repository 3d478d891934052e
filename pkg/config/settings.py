"""
Causal Healthcare Embedding - Configuration Settings
======================================================
Pydantic BaseSettings for the CHE training toolkit.
All values can be overridden via environment variables with the CHE_ prefix
(for example ``CHE_LOG=debug`` or ``CHE_METRICS_ENABLED=false``).
"""

from pathlib import Path

from pydantic_settings import BaseSettings, SettingsConfigDict


class CheSettings(BaseSettings):
    """Central configuration for the CHE toolkit."""

    model_config = SettingsConfigDict(
        env_prefix="CHE_",
        case_sensitive=False,
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    # ── Paths ────────────────────────────────────────────────────────────
    PROJECT_ROOT: Path = Path(__file__).resolve().parents[1]
    DATA_DIR: Path = PROJECT_ROOT / "data"
    RUNS_DIR: Path = PROJECT_ROOT / "runs"

    # ── Logging ──────────────────────────────────────────────────────────
    LOG: str = "info"

    # ── Metrics ──────────────────────────────────────────────────────────
    METRICS_ENABLED: bool = True

    # ── Synthetic Cohorts ────────────────────────────────────────────────
    GEN_PATIENTS: int = 500
    GEN_M: int = 100
    GEN_N: int = 40
    GEN_STATES: int = 12
    GEN_MEAN_VISITS: float = 4.0
    GEN_MEAN_CODES: float = 5.0
    GEN_RHO_TRAIN: float = 0.95
    GEN_RHO_TEST: float = 0.2
    GEN_ENV_TRAIN: str = "medicare"
    GEN_ENV_TEST: str = "private"

    # ── Training ─────────────────────────────────────────────────────────
    TRAIN_EPSILON: float = 0.3
    TRAIN_MODEL_LR: float = 1e-2
    TRAIN_WEIGHT_LR: float = 1.0
    TRAIN_WEIGHT_STEPS: int = 5
    TRAIN_BATCH_SIZE: int = 32
    TRAIN_MAX_EPOCHS: int = 30
    TRAIN_PATIENCE: int = 20
    TRAIN_HIDDEN: int = 16
    TRAIN_DROPOUT: float = 0.1

    # ── HSIC ─────────────────────────────────────────────────────────────
    HSIC_SIGMA_POLICY: str = "median_heuristic"
    HSIC_SIGMA: float = 1.0

    # ── Sample Weight Bounds ─────────────────────────────────────────────
    WEIGHT_MIN: float = 0.05
    WEIGHT_MAX: float = 20.0

    # ── Permutation Weighting ────────────────────────────────────────────
    PW_NEGATIVE_MULTIPLIER: int = 10
    PW_MAX_EPOCHS: int = 20
    PW_PATIENCE: int = 3
    PW_HOLDOUT_FRACTION: float = 0.1

    # ── Sweeps ───────────────────────────────────────────────────────────
    SWEEP_SEEDS: str = "0,1,2,3,4"
    SWEEP_JOBS: int = 1

    # ── Evaluation ───────────────────────────────────────────────────────
    EVAL_KS: str = "10,20"


# ── Singleton ────────────────────────────────────────────────────────────
settings = CheSettings()
