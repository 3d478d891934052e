"""
CHE Toolkit - Alternating Trainer
===================================
Causal healthcare embedding training loop.

Each epoch alternates two passes:

  1. Weighted loss pass: shuffled minibatches over every training
     prediction point, each sample's cross-entropy multiplied by its fixed
     weight, Adam update of the encoders and predictor.
  2. Weight pass: with the encoders frozen, a few exponentiated gradient
     steps on epsilon * HSIC(w * E_D, w * E_P), each point's weight moved by
     its own HSIC derivative scaled to unit RMS over the table, with
     clipping to [0.05, 20] and renormalization to mean 1 after each step.
     Steps that raise the mean weighted HSIC are halved instead.

HSIC gradients never reach the encoders; the weights are the only channel.
Validation NDCG@10 (unweighted) selects the returned checkpoint.

The base model and permutation weighting share this loop: they skip the
weight pass and train on an all-ones or fixed weight table.
"""

import logging
import time
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from src import metrics as run_metrics
from src import tensor as T
from src.encoders import Model, multi_hot, prediction_loss
from src.errors import InvalidArgumentError, NumericOverflowError, TrainingAbortedError
from src.evaluation import evaluate
from src.hsic import bandwidths, hsic_local, split_hsic
from src.models import (
    EpochRecord,
    HsicConfig,
    Method,
    PatientRecord,
    PredictionPoint,
    TrainConfig,
    TrainState,
    prediction_points,
)
from src.optim import AdamState, adam_step
from src.tensor import Tensor, no_grad
from src.weights import WEIGHT_MAX, WEIGHT_MIN, SampleWeightTable, clip_and_normalize

logger = logging.getLogger(__name__)

VALIDATION_METRIC = "ndcg@10"


@dataclass
class WeightUpdateResult:
    """Outcome of one weight pass."""
    weights: SampleWeightTable
    mean_hsic: float
    mean_hsic_before: float
    skipped: int = 0


class FitResult(NamedTuple):
    model: Model
    state: TrainState
    weights: SampleWeightTable


# ═══════════════════════════════════════════════════════════════════════════
#  Weighted loss pass
# ═══════════════════════════════════════════════════════════════════════════


def _logits_range(model: Model, record: PatientRecord, j: int) -> Tuple[float, float]:
    try:
        with no_grad():
            logits, _, _ = model.forward_point(record, j)
        return float(logits.data.min()), float(logits.data.max())
    except NumericOverflowError:
        return float("nan"), float("nan")


def _batch_loss(
    model: Model,
    records: List[PatientRecord],
    batch: Sequence[PredictionPoint],
    weights: SampleWeightTable,
    rng: Optional[np.random.Generator] = None,
    dropout: float = 0.0,
) -> Tensor:
    """sum(w * L) / len(batch) over one minibatch."""
    terms: List[Tensor] = []
    for i, j in batch:
        record = records[i]
        try:
            logits, _, _ = model.forward_point(record, j, rng, dropout)
            loss = prediction_loss(T.sigmoid(logits), multi_hot(record.target(j), model.M))
        except NumericOverflowError as exc:
            raise TrainingAbortedError(record.id, _logits_range(model, record, j), str(exc)) from exc
        if not np.isfinite(loss.item()):
            raise TrainingAbortedError(record.id, _logits_range(model, record, j))
        terms.append(T.scale(loss, weights.get(i, j)))
    return T.scale(T.sum_(T.stack(terms)), 1.0 / len(batch))


def weighted_loss_epoch(
    model: Model,
    records: List[PatientRecord],
    weights: SampleWeightTable,
    config: TrainConfig,
    adam_state: AdamState,
    rng: np.random.Generator,
) -> float:
    """One shuffled pass of weighted minibatch updates; returns mean weighted loss.

    Weights are read, never written.
    """
    if not weights.covers(prediction_points(records)):
        raise InvalidArgumentError("weight table does not cover the training prediction points")
    points = weights.points
    order = rng.permutation(len(points))
    names = list(model.params)
    leaves = [model.params[name] for name in names]

    total = 0.0
    for start in range(0, len(order), config.batch_size):
        batch = [points[k] for k in order[start:start + config.batch_size]]
        loss = _batch_loss(model, records, batch, weights, rng, config.dropout)
        table = T.backward(loss, leaves)
        adam_step(model.params, {n: table[p] for n, p in zip(names, leaves)}, adam_state, config.model_lr)
        total += loss.item() * len(batch)
    return total / len(points)


# ═══════════════════════════════════════════════════════════════════════════
#  Weight pass
# ═══════════════════════════════════════════════════════════════════════════


def mean_weighted_hsic(
    model: Model,
    records: List[PatientRecord],
    weights: SampleWeightTable,
    hsic_config: Optional[HsicConfig] = None,
) -> float:
    """Mean HSIC(w * E_D, w * E_P) over the table's points with a frozen model."""
    return split_hsic(model, records, hsic_config, weights)


FrozenPair = Tuple[np.ndarray, np.ndarray, Tuple[float, float]]


def _hsic_and_gradients(
    frozen: List[FrozenPair],
    omega: np.ndarray,
    hsic_config: HsicConfig,
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-point HSIC and its derivative in that point's weight; nan on overflow."""
    values = np.full(len(frozen), np.nan)
    grads = np.full(len(frozen), np.nan)
    for k, (e_d, e_p, sigmas) in enumerate(frozen):
        w = Tensor(np.array(omega[k]), requires_grad=True, name="omega")
        try:
            value = hsic_local(e_d, e_p, hsic_config, weight=w, sigmas=sigmas)
            grads[k] = float(T.backward(value, [w])[w])
            values[k] = value.item()
        except NumericOverflowError as exc:
            logger.debug("[CHE] HSIC overflow at point %d: %s", k, exc)
    return values, grads


def _exponentiated_step(
    omega: np.ndarray,
    grads: np.ndarray,
    step_size: float,
    low: float,
    high: float,
) -> Optional[np.ndarray]:
    """omega * exp(-step * g / rms(g)), clipped and renormalized; None when g == 0."""
    scale = float(np.sqrt(np.mean(grads ** 2)))
    if scale == 0.0:
        return None
    exponent = np.clip(-step_size * grads / scale, -50.0, 50.0)
    return clip_and_normalize(np.clip(omega * np.exp(exponent), low, high), low, high)


def weight_update_epoch(
    model: Model,
    records: List[PatientRecord],
    weights: SampleWeightTable,
    epsilon: float,
    weight_lr: float,
    hsic_config: Optional[HsicConfig] = None,
    low: float = WEIGHT_MIN,
    high: float = WEIGHT_MAX,
    steps: int = 1,
) -> WeightUpdateResult:
    """Descend epsilon * HSIC in the weights, then clip and renormalize.

    Each of ``steps`` iterations moves every weight by
    ``exp(-epsilon * weight_lr * g / rms(g))`` where g is the derivative of
    that point's HSIC in its own weight, followed by clipping and mean-1
    renormalization. A step that raises the mean weighted HSIC is rejected
    and the step size halved. Entries whose gradient is non-finite keep
    their previous value before renormalization.
    """
    if not weights.covers(prediction_points(records)):
        raise InvalidArgumentError("weight table does not cover the training prediction points")
    hsic_config = hsic_config or HsicConfig()
    points = weights.points
    frozen: List[FrozenPair] = []
    for i, j in points:
        e_d, e_p = model.embed_point(records[i], j)
        frozen.append((e_d, e_p, bandwidths(e_d, e_p, hsic_config)))

    omega = weights.values.copy()
    values, grads = _hsic_and_gradients(frozen, omega, hsic_config)
    stuck = ~(np.isfinite(values) & np.isfinite(grads))
    for k in np.flatnonzero(stuck):
        i, j = points[k]
        logger.warning("[CHE] Skipping weight of %s (i=%d, j=%d): non-finite gradient", records[i].id, i, j)
    skipped = int(stuck.sum())
    run_metrics.record_weight_skip(skipped)
    live = ~stuck
    before = float(values[live].mean()) if live.any() else 0.0

    max_step = epsilon * weight_lr
    step_size = max_step
    current = before
    for _ in range(steps if live.any() else 0):
        if step_size <= 0.0:
            break
        usable = np.where(live & np.isfinite(grads), grads, 0.0)
        candidate = _exponentiated_step(omega, usable, step_size, low, high)
        if candidate is None:
            break
        cand_values, cand_grads = _hsic_and_gradients(frozen, candidate, hsic_config)
        mean = float(cand_values[live].mean())
        if np.isfinite(mean) and mean <= current:
            omega, grads, current = candidate, cand_grads, mean
            step_size = min(2.0 * step_size, max_step)
        else:
            step_size *= 0.5

    updated = SampleWeightTable(points, omega).normalize(low, high)

    after = 0.0
    with no_grad():
        for (i, j), (e_d, e_p, sigmas) in zip(points, frozen):
            after += hsic_local(e_d, e_p, hsic_config, weight=updated.get(i, j), sigmas=sigmas).item()
    return WeightUpdateResult(
        weights=updated,
        mean_hsic=after / len(points),
        mean_hsic_before=before,
        skipped=skipped,
    )


# ═══════════════════════════════════════════════════════════════════════════
#  Fit
# ═══════════════════════════════════════════════════════════════════════════


def fit(
    model: Model,
    train: List[PatientRecord],
    val: List[PatientRecord],
    config: Optional[TrainConfig] = None,
    method: Method = Method.CHE,
    hsic_config: Optional[HsicConfig] = None,
    fixed_weights: Optional[SampleWeightTable] = None,
) -> FitResult:
    """Train ``model`` in place and return the checkpoint with the best validation NDCG@10.

    ``method`` selects the weighting: CHE alternates the weight pass, while
    BASE and PW keep ``fixed_weights`` (all ones when omitted) for the
    whole run.
    """
    config = config or TrainConfig()
    method = Method(method)
    hsic_config = hsic_config or HsicConfig()
    points = prediction_points(train)
    if not points:
        raise InvalidArgumentError("training split has no prediction points")
    if not prediction_points(val):
        raise InvalidArgumentError("validation split has no prediction points")

    weights = fixed_weights.copy() if fixed_weights is not None else SampleWeightTable.uniform(points)
    if not weights.covers(points):
        raise InvalidArgumentError("weight table does not cover the training prediction points")

    rng = np.random.default_rng(config.seed)
    adam = AdamState()
    state = TrainState()
    state.initial_hsic = mean_weighted_hsic(model, train, weights, hsic_config)
    state.best_params = model.state_dict()
    since_best = 0

    logger.info(
        "[%s] Training %r on %d points (val %d), epsilon=%g",
        method.value.upper(), model, len(points), len(prediction_points(val)), config.epsilon,
    )
    epochs = tqdm(
        range(1, config.max_epochs + 1),
        desc=f"{method.value} fit",
        disable=not logger.isEnabledFor(logging.INFO),
    )
    for epoch in epochs:
        started = time.perf_counter()
        loss = weighted_loss_epoch(model, train, weights, config, adam, rng)
        loss_done = time.perf_counter()

        if method is Method.CHE:
            update = weight_update_epoch(
                model, train, weights, config.epsilon, config.weight_lr,
                hsic_config, config.weight_min, config.weight_max, config.weight_steps,
            )
            weights = update.weights
            mean_hsic = update.mean_hsic
        else:
            mean_hsic = mean_weighted_hsic(model, train, weights, hsic_config)
        weights_done = time.perf_counter()

        val_ndcg = evaluate(model, val, ks=(10,))[VALIDATION_METRIC]
        val_hsic = split_hsic(model, val, hsic_config)
        val_done = time.perf_counter()

        state.n = epoch
        state.curves.append(EpochRecord(
            epoch=epoch,
            mean_weighted_loss=loss,
            mean_hsic=mean_hsic,
            val_ndcg10=val_ndcg,
            val_hsic=val_hsic,
        ))
        run_metrics.record_epoch(
            method.value,
            {"loss": loss_done - started, "weights": weights_done - loss_done, "validation": val_done - weights_done},
            mean_hsic,
            val_ndcg,
        )
        logger.debug(
            "[%s] epoch %d loss=%.5f hsic=%.4e val_ndcg10=%.4f val_hsic=%.4e",
            method.value.upper(), epoch, loss, mean_hsic, val_ndcg, val_hsic,
        )

        if val_ndcg > state.best_validation_metric:
            state.best_validation_metric = val_ndcg
            state.n_best = epoch
            state.best_params = model.state_dict()
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                state.stopped_early = True
                logger.info("[%s] Early stop at epoch %d (best %d)", method.value.upper(), epoch, state.n_best)
                break

    best = model.clone()
    best.load_state_dict(state.best_params)
    logger.info(
        "[%s] Best epoch %d of %d: val NDCG@10 %.4f",
        method.value.upper(), state.n_best, state.n, state.best_validation_metric,
    )
    return FitResult(best, state, weights)
