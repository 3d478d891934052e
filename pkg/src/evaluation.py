"""
CHE Toolkit - Evaluation and Diagnostics
==========================================
Top-k ranking metrics for next-visit diagnosis prediction, cross-seed
significance testing, report aggregation, and the ridge-regression
cross-predictability check used as evidence of stream decorrelation.

Metric values are kept at full precision; rounding to four significant
figures happens only when reports are written (see src.export).
"""

import logging
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel
from scipy import stats
from sklearn.linear_model import Ridge
from sklearn.metrics import r2_score

from src.errors import InvalidArgumentError
from src.models import ApproachMetrics, MetricsReport, PatientRecord, prediction_points

logger = logging.getLogger(__name__)

DEFAULT_KS: Tuple[int, ...] = (10, 20)
RIDGE_ALPHA = 1e-3
MIN_PREDICTABILITY_PAIRS = 10

Scorer = Callable[[PatientRecord, int], np.ndarray]


# ═══════════════════════════════════════════════════════════════════════════
#  Ranking metrics
# ═══════════════════════════════════════════════════════════════════════════


def rank_codes(scores: np.ndarray) -> np.ndarray:
    """Code indices by descending score; ties go to the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(scores.shape[0]), -scores))


def _check_query(truth: Iterable[int], k: int) -> set:
    truth = set(int(c) for c in truth)
    if not truth:
        raise InvalidArgumentError("truth code set must be non-empty")
    if k < 1:
        raise InvalidArgumentError(f"k must be >= 1, got {k}")
    return truth


def acc_at_k(scores: np.ndarray, truth: Iterable[int], k: int) -> float:
    """|top-k ∩ truth| / min(k, |truth|)."""
    truth = _check_query(truth, k)
    top = rank_codes(scores)[:k]
    hits = sum(1 for code in top if int(code) in truth)
    return hits / min(k, len(truth))


def ndcg_at_k(scores: np.ndarray, truth: Iterable[int], k: int) -> float:
    """Binary-relevance NDCG with 1/log2(p+1) discount at 1-based position p."""
    truth = _check_query(truth, k)
    top = rank_codes(scores)[:k]
    dcg = sum(1.0 / np.log2(p + 2) for p, code in enumerate(top) if int(code) in truth)
    idcg = sum(1.0 / np.log2(p + 2) for p in range(min(k, len(truth))))
    return float(dcg / idcg)


def metric_names(ks: Sequence[int] = DEFAULT_KS) -> List[str]:
    return [f"ndcg@{k}" for k in ks] + [f"acc@{k}" for k in ks]


def _as_scorer(model_or_scorer: Union[Scorer, object]) -> Scorer:
    if hasattr(model_or_scorer, "score_point"):
        return model_or_scorer.score_point
    if callable(model_or_scorer):
        return model_or_scorer
    raise InvalidArgumentError(f"cannot score with {type(model_or_scorer).__name__}")


def evaluate(
    model_or_scorer,
    records: List[PatientRecord],
    ks: Sequence[int] = DEFAULT_KS,
) -> Dict[str, float]:
    """Unweighted mean of every metric over all prediction points of a split."""
    points = prediction_points(records)
    if not points:
        raise InvalidArgumentError("cannot evaluate a split without prediction points")
    score = _as_scorer(model_or_scorer)
    totals = {name: 0.0 for name in metric_names(ks)}
    for i, j in points:
        record = records[i]
        scores = score(record, j)
        truth = record.target(j)
        for k in ks:
            totals[f"ndcg@{k}"] += ndcg_at_k(scores, truth, k)
            totals[f"acc@{k}"] += acc_at_k(scores, truth, k)
    return {name: total / len(points) for name, total in totals.items()}


# ═══════════════════════════════════════════════════════════════════════════
#  Significance
# ═══════════════════════════════════════════════════════════════════════════


def welch_t_test(values_a: Sequence[float], values_b: Sequence[float]) -> float:
    """Two-sided Welch (unequal variance) t-test p-value.

    Two zero-variance samples give 1.0 for equal means and 0.0 otherwise,
    the limit of the test as the variance vanishes; the latter is logged.
    """
    a = np.asarray(values_a, dtype=np.float64)
    b = np.asarray(values_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise InvalidArgumentError(f"t-test needs >= 2 values per sample, got {a.size} and {b.size}")
    if np.var(a) == 0.0 and np.var(b) == 0.0:
        if a.mean() == b.mean():
            return 1.0
        logger.warning("[EVAL] Welch t-test on two constant samples (%g vs %g); p taken as 0", a.mean(), b.mean())
        return 0.0
    return float(stats.ttest_ind(a, b, equal_var=False).pvalue)


# ═══════════════════════════════════════════════════════════════════════════
#  Cross-predictability
# ═══════════════════════════════════════════════════════════════════════════


class PredictabilityResult(BaseModel):
    """R^2 of predicting E_D from E_P; ``degenerate`` when the fit is undefined."""
    r2: float
    degenerate: bool = False
    pairs: int = 0


def cross_predictability(
    e_d: Sequence[np.ndarray],
    e_p: Sequence[np.ndarray],
    weights: Optional[Sequence[float]] = None,
) -> PredictabilityResult:
    """Weighted ridge regression from procedure to diagnosis embeddings."""
    X = np.asarray(e_p, dtype=np.float64)
    Y = np.asarray(e_d, dtype=np.float64)
    if X.ndim != 2 or Y.shape != X.shape:
        raise InvalidArgumentError(f"expected matching (n, r) embeddings, got {X.shape} and {Y.shape}")
    n = X.shape[0]
    if n < MIN_PREDICTABILITY_PAIRS:
        raise InvalidArgumentError(f"cross-predictability needs >= {MIN_PREDICTABILITY_PAIRS} pairs, got {n}")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (n,) or np.any(w <= 0):
        raise InvalidArgumentError("weights must be positive, one per pair")

    if np.all(X == X[0]) or np.all(Y == Y[0]):
        logger.warning("[EVAL] Degenerate embeddings over %d pairs; reporting R^2 = 0", n)
        return PredictabilityResult(r2=0.0, degenerate=True, pairs=n)

    ridge = Ridge(alpha=RIDGE_ALPHA).fit(X, Y, sample_weight=w)
    r2 = r2_score(Y, ridge.predict(X), sample_weight=w, multioutput="variance_weighted")
    return PredictabilityResult(r2=float(np.clip(r2, -1.0, 1.0)), pairs=n)


# ═══════════════════════════════════════════════════════════════════════════
#  Report aggregation
# ═══════════════════════════════════════════════════════════════════════════


def improvement(value: float, baseline: float) -> float:
    """Relative increase over the baseline, in percent."""
    if baseline == 0:
        return float("nan")
    return (value - baseline) / baseline * 100.0


def summarize_approach(per_seed: Mapping[int, Mapping[str, float]], metrics: Sequence[str]) -> ApproachMetrics:
    seeds = sorted(per_seed)
    values = {m: [float(per_seed[s][m]) for s in seeds] for m in metrics}
    mean = {m: float(np.mean(v)) for m, v in values.items()}
    std = {m: (float(np.std(v, ddof=1)) if len(v) >= 2 else None) for m, v in values.items()}
    return ApproachMetrics(
        per_seed=values,
        mean=mean,
        std=std,
        average=float(np.mean(list(mean.values()))),
        seeds=seeds,
    )


def build_report(
    results: Mapping[str, Mapping[int, Mapping[str, float]]],
    baseline: str = "base",
    ks: Sequence[int] = DEFAULT_KS,
    label: str = "",
    warnings: Optional[List[str]] = None,
    baseline_for: Optional[Mapping[str, str]] = None,
) -> MetricsReport:
    """Aggregate per-seed metrics of several approaches into one report.

    Parameters
    ----------
    results:
        approach label -> seed -> metric name -> value.
    baseline:
        Approach the Improv rows and t-tests compare against.
    baseline_for:
        Per-approach baseline labels (grid sweeps compare within a grid point).
    """
    metrics = metric_names(ks)
    report = MetricsReport(label=label, warnings=list(warnings or []))
    for approach, per_seed in results.items():
        if not per_seed:
            report.warnings.append(f"{approach}: no completed runs")
            continue
        report.approaches[approach] = summarize_approach(per_seed, metrics)

    baselines = set((baseline_for or {}).values()) | {baseline}
    for approach, summary in report.approaches.items():
        if approach in baselines:
            continue
        reference = (baseline_for or {}).get(approach, baseline)
        base = report.approaches.get(reference)
        if base is None:
            report.warnings.append(f"{approach}: baseline {reference!r} missing; Improv and t-test skipped")
            continue
        improv = {m: improvement(summary.mean[m], base.mean[m]) for m in metrics}
        improv["average"] = improvement(summary.average, base.average)
        report.improvements[approach] = improv
        if len(summary.seeds) < 2 or len(base.seeds) < 2:
            report.warnings.append(f"{approach}: fewer than 2 seeds, t-test omitted")
            continue
        report.p_values[approach] = {
            m: welch_t_test(summary.per_seed[m], base.per_seed[m]) for m in metrics
        }
    return report
