"""
Causal Healthcare Embedding - Pydantic Models
================================================
Domain models, configuration blocks, and report containers
for the CHE training toolkit.
"""

from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


# ═══════════════════════════════════════════════════════════════════════════
#  Enums
# ═══════════════════════════════════════════════════════════════════════════


class ModelKind(str, Enum):
    """Encoder families for the two visit streams."""
    LSTM = "lstm"
    REVERSE_ATTENTION = "reverse_attention"   # RETAIN-style
    BI_ATTENTION = "bi_attention"             # Dipole-style


class Stream(str, Enum):
    """Input streams of a prediction point."""
    DX = "dx"
    PX = "px"


class Method(str, Enum):
    """Training approaches compared in reports."""
    BASE = "base"
    PW = "pw"
    CHE = "che"


class SplitProtocol(str, Enum):
    """Dataset division protocols."""
    RANDOM = "random"   # 0.75 / 0.1 / 0.15 over one environment
    ENV = "env"         # 0.7 / 0.3 train-env, whole test-env as test


class SigmaPolicy(str, Enum):
    """RBF bandwidth selection."""
    FIXED = "fixed"
    MEDIAN_HEURISTIC = "median_heuristic"


class Benchmark(str, Enum):
    """Synthetic benchmark flavour."""
    SPURIOUS = "spurious"   # procedures carry no causal effect
    MIXED = "mixed"         # procedures shift next-visit diagnoses


METRIC_NAMES: Tuple[str, ...] = ("ndcg@10", "ndcg@20", "acc@10", "acc@20")


# ═══════════════════════════════════════════════════════════════════════════
#  Patient Data
# ═══════════════════════════════════════════════════════════════════════════


class Visit(BaseModel):
    """One admission: a set of diagnosis codes and a set of procedure codes."""
    dx: List[int]
    px: List[int]

    @field_validator("dx", "px")
    @classmethod
    def _non_empty_code_set(cls, codes: List[int]) -> List[int]:
        if not codes:
            raise ValueError("visit code sets must be non-empty")
        if min(codes) < 0:
            raise ValueError(f"negative code index in {codes}")
        return sorted(set(codes))


class PatientRecord(BaseModel):
    """A patient's ordered visits."""
    id: str
    env: str
    visits: List[Visit]

    @field_validator("visits")
    @classmethod
    def _enough_visits(cls, visits: List[Visit]) -> List[Visit]:
        if len(visits) < 3:
            raise ValueError(f"patients need at least 3 visits, got {len(visits)}")
        return visits

    @property
    def t(self) -> int:
        return len(self.visits)

    @property
    def prefix_lengths(self) -> range:
        """Valid prediction prefixes j = 1 .. t-1."""
        return range(1, self.t)

    def codes(self, stream: "Stream", j: int) -> List[List[int]]:
        """Code sets of visits 1..j for one stream."""
        key = Stream(stream).value
        return [getattr(v, key) for v in self.visits[:j]]

    def target(self, j: int) -> List[int]:
        """Diagnosis codes of visit j+1."""
        return self.visits[j].dx

    def max_codes(self) -> Tuple[int, int]:
        return (
            max(max(v.dx) for v in self.visits),
            max(max(v.px) for v in self.visits),
        )


PredictionPoint = Tuple[int, int]


def prediction_points(records: List[PatientRecord]) -> List[PredictionPoint]:
    """All (patient index, prefix length) pairs of a split, in order."""
    return [(i, j) for i, rec in enumerate(records) for j in rec.prefix_lengths]


class CodeVocab(BaseModel):
    """Diagnosis and procedure vocabulary sizes."""
    M: int = Field(..., ge=1)
    N: int = Field(..., ge=1)
    dx_labels: Optional[List[str]] = None
    px_labels: Optional[List[str]] = None

    def check(self, record: PatientRecord) -> None:
        """Raise ValueError when a record uses codes outside the vocabulary."""
        max_dx, max_px = record.max_codes()
        if max_dx >= self.M or max_px >= self.N:
            raise ValueError(
                f"patient {record.id}: code outside vocabulary "
                f"(max dx {max_dx} vs M={self.M}, max px {max_px} vs N={self.N})"
            )


class Cohort(BaseModel):
    """Patients of one environment over a shared vocabulary."""
    env: str
    vocab: CodeVocab
    records: List[PatientRecord] = Field(default_factory=list)

    @model_validator(mode="after")
    def _codes_in_vocab(self) -> "Cohort":
        for record in self.records:
            self.vocab.check(record)
        return self


class DataSplits(BaseModel):
    """Patient-level train / validation / test partition."""
    train: List[PatientRecord]
    val: List[PatientRecord]
    test: List[PatientRecord]
    protocol: str = ""

    def sizes(self) -> Tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)


# ═══════════════════════════════════════════════════════════════════════════
#  Generator
# ═══════════════════════════════════════════════════════════════════════════


class GeneratorConfig(BaseModel):
    """Shape and confounding knobs for synthetic cohorts."""
    patients: int = Field(500, ge=1)
    M: int = Field(100, ge=1)
    N: int = Field(40, ge=1)
    S: int = Field(12, ge=1)
    mean_visits: float = Field(4.0, ge=3.0)
    max_visits: int = Field(12, ge=3)
    mean_codes: float = Field(5.0, ge=1.0)
    rho_train: float = Field(0.95, ge=0.0, le=1.0)
    rho_test: float = Field(0.2, ge=0.0, le=1.0)
    env_train: str = "medicare"
    env_test: str = "private"
    benchmark: Benchmark = Benchmark.SPURIOUS
    effect_scale: float = Field(1.5, ge=0.0)
    persistence: float = Field(0.6, ge=0.0, le=1.0)
    seed: int = 0

    @model_validator(mode="after")
    def _vocab_covers_states(self) -> "GeneratorConfig":
        if self.M < self.S:
            raise ValueError(f"M ({self.M}) must be >= S ({self.S})")
        if self.env_train == self.env_test:
            raise ValueError("train and test environments need distinct labels")
        return self

    def rho_for(self, environment: str) -> float:
        if environment == self.env_train:
            return self.rho_train
        if environment == self.env_test:
            return self.rho_test
        raise ValueError(f"unknown environment {environment!r}")


class CausalSpec(BaseModel):
    """Ground-truth structure behind a synthetic cohort."""
    states: int
    transition: List[List[float]]
    emission: List[List[float]]
    policy: List[int]
    treatment_effects: List[List[float]]
    rho: Dict[str, float]
    benchmark: Benchmark = Benchmark.SPURIOUS

    @field_validator("transition", "emission")
    @classmethod
    def _stochastic_rows(cls, rows: List[List[float]]) -> List[List[float]]:
        for row in rows:
            if abs(sum(row) - 1.0) > 1e-9:
                raise ValueError(f"stochastic row sums to {sum(row)}")
        return rows

    @field_validator("rho")
    @classmethod
    def _rho_range(cls, rho: Dict[str, float]) -> Dict[str, float]:
        for env, value in rho.items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"rho for {env!r} outside [0, 1]: {value}")
        return rho

    @property
    def procedures_inert(self) -> bool:
        return not np.any(np.asarray(self.treatment_effects))


# ═══════════════════════════════════════════════════════════════════════════
#  Training Configuration and State
# ═══════════════════════════════════════════════════════════════════════════


class HsicConfig(BaseModel):
    """Kernel bandwidth policy for the dimension-wise HSIC."""
    sigma_policy: SigmaPolicy = SigmaPolicy.MEDIAN_HEURISTIC
    sigma: float = Field(1.0, gt=0.0)
    r: Optional[int] = Field(None, ge=2)


class TrainConfig(BaseModel):
    """Optimization hyperparameters shared by base, PW and CHE training."""
    epsilon: float = Field(0.3, ge=0.0)
    model_lr: float = Field(1e-2, gt=0.0)
    weight_lr: float = Field(1.0, ge=0.0)
    weight_steps: int = Field(5, ge=1)
    batch_size: int = Field(32, ge=1)
    max_epochs: int = Field(30, ge=1)
    patience: int = Field(20, ge=1)
    hidden: int = Field(16, ge=2)
    dropout: float = Field(0.1, ge=0.0, lt=1.0)
    weight_min: float = Field(0.05, gt=0.0)
    weight_max: float = Field(20.0, gt=0.0)
    seed: int = 0

    @model_validator(mode="after")
    def _bounds_bracket_one(self) -> "TrainConfig":
        if not self.weight_min <= 1.0 <= self.weight_max:
            raise ValueError("weight bounds must bracket 1 for mean-1 normalization")
        return self


class PwConfig(BaseModel):
    """Permutation-weighting discriminator settings."""
    negative_multiplier: int = Field(10, ge=0)
    max_epochs: int = Field(20, ge=1)
    patience: int = Field(3, ge=1)
    holdout_fraction: float = Field(0.1, gt=0.0, lt=1.0)
    model_lr: float = Field(1e-2, gt=0.0)
    batch_size: int = Field(64, ge=1)
    max_resample: int = Field(20, ge=0)
    dump_negatives: bool = False   # write negatives.jsonl next to the run artifacts


class EpochRecord(BaseModel):
    """One row of the per-epoch curves file."""
    epoch: int
    mean_weighted_loss: float
    mean_hsic: float
    val_ndcg10: float
    val_hsic: float


class TrainState(BaseModel):
    """Progress of one fit: epoch counters, best checkpoint, curves."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    n: int = 0
    n_best: int = 0
    best_validation_metric: float = float("-inf")
    initial_hsic: float = 0.0
    curves: List[EpochRecord] = Field(default_factory=list)
    stopped_early: bool = False
    best_params: Dict[str, Any] = Field(default_factory=dict, exclude=True)


# ═══════════════════════════════════════════════════════════════════════════
#  Reports
# ═══════════════════════════════════════════════════════════════════════════


class ApproachMetrics(BaseModel):
    """Per-seed metric values and their summary for one approach."""
    per_seed: Dict[str, List[float]] = Field(default_factory=dict)
    mean: Dict[str, float] = Field(default_factory=dict)
    std: Dict[str, Optional[float]] = Field(default_factory=dict)
    average: float = 0.0
    seeds: List[int] = Field(default_factory=list)


class MetricsReport(BaseModel):
    """Table-style comparison of approaches across seeds."""
    label: str = ""
    approaches: Dict[str, ApproachMetrics] = Field(default_factory=dict)
    p_values: Dict[str, Dict[str, float]] = Field(default_factory=dict)
    improvements: Dict[str, Dict[str, float]] = Field(default_factory=dict)
    warnings: List[str] = Field(default_factory=list)
    metadata: Dict[str, Any] = Field(default_factory=dict)


class VisitContribution(BaseModel):
    """Contribution scores of one historical visit."""
    visit: int
    dx: float
    px: float


class AttributionReport(BaseModel):
    """Per-visit stream contributions toward one predicted code."""
    patient_id: str
    prefix: int
    target: int
    visits: List[VisitContribution] = Field(default_factory=list)


class AttributionSummary(BaseModel):
    """Share of absolute contribution mass on the diagnosis stream."""
    dx_share: float
    points: int
    procedures_inert: Optional[bool] = None
