"""
CHE Toolkit - Run Pipeline
============================
Glue shared by the command line, sweeps and the acceptance script:
dataset loading and splitting, method dispatch (base / PW / CHE), test
evaluation and per-run artifact writing.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from config.settings import settings
from src import metrics as run_metrics
from src.attribution import attribution_summary
from src.che_trainer import fit
from src.checkpoint import save_checkpoint
from src.encoders import Model
from src.evaluation import cross_predictability, evaluate
from src.export import write_curves_csv
from src.models import CausalSpec, CodeVocab, DataSplits, Method, SplitProtocol, TrainState, prediction_points
from src.pw_baseline import NegativeSet, fit_pw
from src.run_config import RunConfig
from src.synth_ehr import load_causal_spec, load_cohort, split_by_environment, split_random
from src.weights import SampleWeightTable

logger = logging.getLogger(__name__)


@dataclass
class Dataset:
    """Split records plus the vocabulary and (synthetic) ground truth."""
    splits: DataSplits
    vocab: CodeVocab
    spec: Optional[CausalSpec] = None


@dataclass
class TrainOutcome:
    model: Model
    state: TrainState
    weights: SampleWeightTable
    extras: Dict[str, Any] = field(default_factory=dict)
    negatives: Optional[NegativeSet] = None
    metrics_text: str = ""


def cohort_path(data_dir: Union[str, Path], environment: str) -> Path:
    return Path(data_dir) / f"{environment}.jsonl"


def load_dataset(data_dir: Union[str, Path], config: RunConfig, seed: Optional[int] = None) -> Dataset:
    """Load the cohorts named by the generator block and apply the split protocol."""
    seed = config.train.seed if seed is None else seed
    gen = config.generator
    train_cohort, meta = load_cohort(cohort_path(data_dir, gen.env_train))
    spec = load_causal_spec(meta)
    if config.run.protocol is SplitProtocol.RANDOM:
        splits = split_random(train_cohort.records, seed)
    else:
        test_cohort, test_meta = load_cohort(cohort_path(data_dir, gen.env_test))
        if (test_meta["M"], test_meta["N"]) != (meta["M"], meta["N"]):
            logger.warning("[DATA] Environment cohorts disagree on vocabulary; using the training one")
        splits = split_by_environment(train_cohort.records, test_cohort.records, seed)
    logger.info("[DATA] %s split sizes (train, val, test) = %s", splits.protocol, splits.sizes())
    return Dataset(splits=splits, vocab=train_cohort.vocab, spec=spec)


def build_model(config: RunConfig, vocab: CodeVocab) -> Model:
    return Model(config.run.model_kind, vocab.M, vocab.N, config.train.hidden, config.train.seed)


def train_method(config: RunConfig, dataset: Dataset, method: Optional[Method] = None) -> TrainOutcome:
    """Train one model with the configured (or given) method.

    The outcome carries a metrics snapshot of this run alone.
    """
    method = Method(method or config.run.method)
    model = build_model(config, dataset.vocab)
    train, val = dataset.splits.train, dataset.splits.val
    with run_metrics.run_scope() as scope:
        if method is Method.PW:
            result = fit_pw(model, train, val, config.train, config.pw, config.hsic)
            outcome = TrainOutcome(
                result.fit.model, result.fit.state, result.weights,
                {"holdout_auc": result.holdout_auc, "pw_warnings": result.warnings},
                result.negatives,
            )
        else:
            best, state, weights = fit(model, train, val, config.train, method, config.hsic)
            outcome = TrainOutcome(best, state, weights)
    outcome.metrics_text = scope.text()
    return outcome


def hsic_reduction(state: TrainState) -> float:
    """Mean weighted HSIC at the best epoch relative to its epoch-0 value."""
    if state.n_best < 1 or state.initial_hsic <= 0:
        return float("nan")
    return state.curves[state.n_best - 1].mean_hsic / state.initial_hsic


def decorrelation_evidence(model: Model, dataset: Dataset, weights: SampleWeightTable) -> Dict[str, float]:
    """Cross-predictability of E_D from E_P on the training split, weighted and uniform."""
    records = dataset.splits.train
    points = prediction_points(records)
    pairs = [model.embed_point(records[i], j) for i, j in points]
    e_d = [p[0] for p in pairs]
    e_p = [p[1] for p in pairs]
    weighted = cross_predictability(e_d, e_p, [weights.get(i, j) for i, j in points])
    uniform = cross_predictability(e_d, e_p)
    return {"r2_weighted": weighted.r2, "r2_uniform": uniform.r2}


def write_run_artifacts(out_dir: Union[str, Path], config: RunConfig, outcome: TrainOutcome) -> Path:
    """checkpoint.json, curves.csv, weights.json, state.json, config.resolved (and negatives.jsonl on request)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(outcome.model, out_dir / "checkpoint.json")
    write_curves_csv(outcome.state.curves, out_dir / "curves.csv")
    outcome.weights.save(out_dir / "weights.json")
    state = outcome.state.model_dump(mode="json")
    state.update(outcome.extras)
    (out_dir / "state.json").write_text(json.dumps(state, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    config.write_resolved(out_dir)
    if config.pw.dump_negatives and outcome.negatives is not None:
        outcome.negatives.write_jsonl(out_dir / "negatives.jsonl")
    write_metrics_snapshot(out_dir, outcome.metrics_text)
    return out_dir


def write_metrics_snapshot(out_dir: Union[str, Path], text: Optional[str] = None) -> None:
    """metrics.prom from ``text`` or the process-wide registry.

    Holds wall-clock timings, so it is the one artifact that differs between
    reruns of the same resolved config.
    """
    if not settings.METRICS_ENABLED:
        return
    if text is None:
        text = run_metrics.get_metrics_text()
    if text:
        (Path(out_dir) / "metrics.prom").write_text(text, encoding="utf-8")


# ═══════════════════════════════════════════════════════════════════════════
#  Sweep jobs
# ═══════════════════════════════════════════════════════════════════════════


@dataclass
class SweepJob:
    """One (method, grid point, seed) run; picklable for process pools."""
    label: str
    baseline_label: str
    method: Method
    seed: int
    overrides: Dict[str, Any]
    data_dir: str
    out_dir: str
    base_config: Dict[str, Any]


@dataclass
class JobOutcome:
    label: str
    seed: int
    metrics: Dict[str, float] = field(default_factory=dict)
    diagnostics: Dict[str, float] = field(default_factory=dict)
    error: Optional[str] = None


def run_job(job: SweepJob) -> JobOutcome:
    """Train and evaluate one sweep job; failures are returned, not raised."""
    try:
        config = RunConfig.model_validate(job.base_config).with_overrides(
            {**job.overrides, "train.seed": job.seed, "run.method": job.method.value}
        )
        dataset = load_dataset(job.data_dir, config)
        outcome = train_method(config, dataset, job.method)
        scores = evaluate(outcome.model, dataset.splits.test, config.run.ks)
        diagnostics = {"hsic_reduction": hsic_reduction(outcome.state), "n_best": float(outcome.state.n_best)}
        if "holdout_auc" in outcome.extras:
            diagnostics["holdout_auc"] = outcome.extras["holdout_auc"]
        write_run_artifacts(job.out_dir, config, outcome)
        (Path(job.out_dir) / "test_metrics.json").write_text(
            json.dumps(scores, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        run_metrics.record_run(job.method.value, "ok")
        return JobOutcome(job.label, job.seed, scores, diagnostics)
    except Exception as exc:  # noqa: BLE001 - a failed run must not stop the sweep
        logger.error("[SWEEP] %s seed %d failed: %s", job.label, job.seed, exc)
        run_metrics.record_run(job.method.value, "failed")
        return JobOutcome(job.label, job.seed, error=f"{type(exc).__name__}: {exc}")


def attribution_share(model: Model, dataset: Dataset, max_points: int = 200) -> float:
    return attribution_summary(model, dataset.splits.test, dataset.spec, max_points).dx_share
