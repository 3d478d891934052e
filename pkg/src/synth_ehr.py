"""
CHE Toolkit - Synthetic EHR Cohorts
=====================================
Confounded visit sequences with a known causal structure.

A latent health state walks a Markov chain. Each visit's diagnoses are
emitted from the current state; each diagnosis code triggers its canonical
procedure with probability rho (else a uniformly random procedure), which
is the tunable diagnosis -> procedure edge. Procedures then shift the
next visit's diagnosis log-odds by their true treatment effects (zero in
the spurious-only benchmark), and state persistence carries diagnosis
history forward.

Environments differ only in rho, so a model that leans on procedures as a
proxy for diagnoses is exactly what fails under the environment split.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import ValidationError
from scipy.special import softmax
from tqdm import tqdm

from src.errors import DataFormatError, InvalidArgumentError
from src.models import (
    Benchmark,
    CausalSpec,
    CodeVocab,
    Cohort,
    DataSplits,
    GeneratorConfig,
    PatientRecord,
    Visit,
    prediction_points,
)

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
EMISSION_FLOOR = 0.02
EFFECT_DENSITY = 0.1


# ═══════════════════════════════════════════════════════════════════════════
#  Ground truth
# ═══════════════════════════════════════════════════════════════════════════


def build_causal_spec(config: GeneratorConfig) -> CausalSpec:
    """Draw the transition, emission, policy and treatment-effect tables."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
    S, M, N = config.S, config.M, config.N

    transition = np.zeros((S, S))
    for s in range(S):
        row = (1.0 - config.persistence) * rng.dirichlet(np.ones(S))
        row[s] += config.persistence
        transition[s] = row / row.sum()

    block = M // S
    emission = np.zeros((S, M))
    for s in range(S):
        stop = M if s == S - 1 else (s + 1) * block
        alpha = np.full(M, 0.05)
        alpha[s * block:stop] = 2.0
        row = (1.0 - EMISSION_FLOOR) * rng.dirichlet(alpha) + EMISSION_FLOOR / M
        emission[s] = row / row.sum()

    policy = rng.integers(N, size=M)

    effects = np.zeros((N, M))
    if config.benchmark is Benchmark.MIXED:
        mask = rng.random((N, M)) < EFFECT_DENSITY
        effects = np.where(mask, rng.normal(0.0, config.effect_scale, size=(N, M)), 0.0)

    return CausalSpec(
        states=S,
        transition=transition.tolist(),
        emission=emission.tolist(),
        policy=policy.tolist(),
        treatment_effects=effects.tolist(),
        rho={config.env_train: config.rho_train, config.env_test: config.rho_test},
        benchmark=config.benchmark,
    )


class _SpecArrays:
    """numpy views of a CausalSpec for the sampling loop."""

    def __init__(self, spec: CausalSpec) -> None:
        self.transition = np.asarray(spec.transition)
        self.emission = np.asarray(spec.emission)
        self.log_emission = np.log(self.emission)
        self.policy = np.asarray(spec.policy)
        self.effects = np.asarray(spec.treatment_effects)
        self.S, self.M = self.emission.shape
        self.N = self.effects.shape[0]


def next_dx_distribution(spec: CausalSpec, state: int, px_codes: Optional[List[int]] = None) -> np.ndarray:
    """Diagnosis emission of ``state`` after the previous visit's procedures."""
    arrays = _SpecArrays(spec)
    return _dx_distribution(arrays, state, px_codes)


def _dx_distribution(arrays: _SpecArrays, state: int, px_codes) -> np.ndarray:
    if not px_codes:
        return arrays.emission[state]
    logits = arrays.log_emission[state] + arrays.effects[list(px_codes)].sum(axis=0)
    return softmax(logits)


# ═══════════════════════════════════════════════════════════════════════════
#  Generation
# ═══════════════════════════════════════════════════════════════════════════


def _generate_patient(
    arrays: _SpecArrays,
    config: GeneratorConfig,
    rho: float,
    environment: str,
    patient_id: str,
    rng: np.random.Generator,
) -> PatientRecord:
    t = int(min(config.max_visits, 3 + rng.poisson(config.mean_visits - 3.0)))
    state = int(rng.integers(arrays.S))
    previous_px: Optional[List[int]] = None
    visits: List[Visit] = []
    for _ in range(t):
        probs = _dx_distribution(arrays, state, previous_px)
        k = int(min(1 + rng.poisson(config.mean_codes - 1.0), np.count_nonzero(probs)))
        dx = rng.choice(arrays.M, size=k, replace=False, p=probs)
        # both draws are taken for every code so streams stay aligned across rho
        follow = rng.random(k) < rho
        alternative = rng.integers(arrays.N, size=k)
        px = np.where(follow, arrays.policy[dx], alternative)
        visits.append(Visit(dx=dx.tolist(), px=px.tolist()))
        previous_px = sorted(set(px.tolist()))
        state = int(rng.choice(arrays.S, p=arrays.transition[state]))
    return PatientRecord(id=patient_id, env=environment, visits=visits)


def generate_cohort(
    config: GeneratorConfig,
    environment: str,
    spec: Optional[CausalSpec] = None,
) -> Tuple[Cohort, CausalSpec]:
    """Generate ``config.patients`` records for one environment.

    Pass the same ``spec`` for every environment of a benchmark so they
    share a world and differ only in rho.
    """
    rho = config.rho_for(environment)
    spec = spec or build_causal_spec(config)
    arrays = _SpecArrays(spec)
    env_index = 1 if environment == config.env_train else 2
    children = np.random.SeedSequence([config.seed, env_index]).spawn(config.patients)

    records = [
        _generate_patient(
            arrays, config, rho, environment, f"{environment}-{k:05d}", np.random.default_rng(child)
        )
        for k, child in enumerate(
            tqdm(children, desc=f"gen {environment}", disable=not logger.isEnabledFor(logging.INFO))
        )
    ]
    cohort = Cohort(env=environment, vocab=CodeVocab(M=config.M, N=config.N), records=records)
    logger.info(
        "[SYNTH] Generated %d patients for env=%s (rho=%.2f, benchmark=%s)",
        len(records), environment, rho, spec.benchmark.value,
    )
    return cohort, spec


def cohort_stats(records: List[PatientRecord]) -> Dict[str, float]:
    """Shape statistics: patients, mean visits, mean codes per visit, points."""
    if not records:
        return {"patients": 0, "mean_visits": 0.0, "mean_dx_per_visit": 0.0,
                "mean_px_per_visit": 0.0, "prediction_points": 0}
    visits = [v for rec in records for v in rec.visits]
    return {
        "patients": len(records),
        "mean_visits": float(np.mean([rec.t for rec in records])),
        "mean_dx_per_visit": float(np.mean([len(v.dx) for v in visits])),
        "mean_px_per_visit": float(np.mean([len(v.px) for v in visits])),
        "prediction_points": len(prediction_points(records)),
    }


# ═══════════════════════════════════════════════════════════════════════════
#  Split protocols
# ═══════════════════════════════════════════════════════════════════════════


def split_random(records: List[PatientRecord], seed: int) -> DataSplits:
    """0.75 / 0.1 / 0.15 patient-level split; floor sizes, remainder to train."""
    n = len(records)
    if n < 20:
        raise InvalidArgumentError(f"random split needs at least 20 patients, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_val = n * 10 // 100
    n_test = n * 15 // 100
    val = [records[k] for k in order[:n_val]]
    test = [records[k] for k in order[n_val:n_val + n_test]]
    train = [records[k] for k in order[n_val + n_test:]]
    return DataSplits(train=train, val=val, test=test, protocol="random")


def split_by_environment(
    train_env: List[PatientRecord],
    test_env: List[PatientRecord],
    seed: int,
) -> DataSplits:
    """Train-env patients 0.7 / 0.3 into train / val; the test env is the test set."""
    if not train_env or not test_env:
        raise InvalidArgumentError("environment split needs two non-empty cohorts")
    n = len(train_env)
    order = np.random.default_rng(seed).permutation(n)
    n_train = n * 7 // 10
    train = [train_env[k] for k in order[:n_train]]
    val = [train_env[k] for k in order[n_train:]]
    return DataSplits(train=train, val=val, test=list(test_env), protocol="env")


# ═══════════════════════════════════════════════════════════════════════════
#  Persistence
# ═══════════════════════════════════════════════════════════════════════════


def meta_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def save_cohort(
    cohort: Cohort,
    path: Union[str, Path],
    spec: Optional[CausalSpec] = None,
    config: Optional[GeneratorConfig] = None,
) -> Path:
    """Write JSON Lines (one patient per line) plus the ``.meta.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for record in cohort.records:
            fh.write(record.model_dump_json() + "\n")
    meta = {
        "format_version": FORMAT_VERSION,
        "env": cohort.env,
        "M": cohort.vocab.M,
        "N": cohort.vocab.N,
        "generator_config": config.model_dump(mode="json") if config else None,
        "causal_spec": spec.model_dump(mode="json") if spec else None,
        "stats": cohort_stats(cohort.records),
    }
    meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info("[SYNTH] Saved %d patients to %s", len(cohort.records), path)
    return path


def load_meta(path: Union[str, Path]) -> Dict[str, Any]:
    sidecar = meta_path(path)
    try:
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(str(sidecar), exc.lineno, f"invalid JSON: {exc.msg}") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise DataFormatError(str(sidecar), None, f"unsupported format_version {meta.get('format_version')}")
    return meta


def load_cohort(path: Union[str, Path]) -> Tuple[Cohort, Dict[str, Any]]:
    """Read a cohort back; malformed lines and vocabulary overflow name the line."""
    path = Path(path)
    meta = load_meta(path)
    vocab = CodeVocab(M=meta["M"], N=meta["N"])
    records: List[PatientRecord] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = PatientRecord.model_validate_json(line)
            except ValidationError as exc:
                raise DataFormatError(str(path), line_no, f"malformed record: {exc.errors()[0]['msg']}") from exc
            try:
                vocab.check(record)
            except ValueError as exc:
                raise DataFormatError(str(path), line_no, f"vocabulary overflow: {exc}") from exc
            records.append(record)
    cohort = Cohort.model_construct(env=meta["env"], vocab=vocab, records=records)
    return cohort, meta


def load_causal_spec(meta: Dict[str, Any]) -> Optional[CausalSpec]:
    raw = meta.get("causal_spec")
    return CausalSpec.model_validate(raw) if raw else None
