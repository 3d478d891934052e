"""
CHE Toolkit - Permutation Weighting Baseline
==============================================
Propensity-style sample weights from a discriminator between observed
prediction points and permuted negatives.

Negatives pair the diagnosis prefix of one prediction point with the
procedure prefix of another point of the same prefix length. That keeps
both streams' marginals and breaks their joint, so the discriminator's
odds p / (1 - p) weight the data toward the decorrelated distribution.
Weights are then clipped and renormalized exactly like CHE's.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.metrics import roc_auc_score
from tqdm import tqdm

from src import tensor as T
from src.che_trainer import FitResult, fit
from src.encoders import Model, encode_prefix, prediction_loss
from src.errors import InvalidArgumentError
from src.models import (
    HsicConfig,
    Method,
    ModelKind,
    PatientRecord,
    PredictionPoint,
    PwConfig,
    Stream,
    TrainConfig,
    prediction_points,
)
from src.optim import AdamState, adam_step
from src.tensor import Tensor, no_grad
from src.weights import WEIGHT_MAX, WEIGHT_MIN, SampleWeightTable, clip_and_normalize

logger = logging.getLogger(__name__)

CodeSets = Tuple[Tuple[int, ...], ...]
PROB_EPS = 1e-6
AUC_CHANCE_TOL = 1e-9


def _key(code_sets: Sequence[Sequence[int]]) -> CodeSets:
    return tuple(tuple(codes) for codes in code_sets)


# ═══════════════════════════════════════════════════════════════════════════
#  Negatives
# ═══════════════════════════════════════════════════════════════════════════


class NegativeSample(NamedTuple):
    """Diagnosis prefix of ``dx_point`` paired with foreign procedure code sets."""
    dx_point: PredictionPoint
    px_codes: CodeSets
    collision: bool = False
    fallback: bool = False


@dataclass
class NegativeSet:
    samples: List[NegativeSample] = field(default_factory=list)
    fallback_points: int = 0

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def collisions(self) -> int:
        return sum(1 for s in self.samples if s.collision)

    def write_jsonl(self, path: Union[str, Path]) -> Path:
        """One negative per line, for auditing a PW run."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            for sample in self.samples:
                fh.write(json.dumps({
                    "dx_point": list(sample.dx_point),
                    "px": [list(codes) for codes in sample.px_codes],
                    "collision": sample.collision,
                    "fallback": sample.fallback,
                }) + "\n")
        return path


def generate_negatives(
    records: List[PatientRecord],
    multiplier: int = 10,
    seed: int = 0,
    max_resample: int = 20,
) -> NegativeSet:
    """``multiplier`` negatives per prediction point.

    Points without an equal-length partner permute their own procedure
    visit order instead and are counted in ``fallback_points``.
    """
    points = prediction_points(records)
    if not points:
        raise InvalidArgumentError("cannot generate negatives for an empty dataset")
    if multiplier < 0:
        raise InvalidArgumentError(f"multiplier must be >= 0, got {multiplier}")
    result = NegativeSet()
    if multiplier == 0:
        return result

    rng = np.random.default_rng(seed)
    dx_keys = {p: _key(records[p[0]].codes(Stream.DX, p[1])) for p in points}
    px_keys = {p: _key(records[p[0]].codes(Stream.PX, p[1])) for p in points}
    observed = {(dx_keys[p], px_keys[p]) for p in points}
    by_length: Dict[int, List[PredictionPoint]] = {}
    for p in points:
        by_length.setdefault(p[1], []).append(p)

    for point in points:
        partners = [q for q in by_length[point[1]] if q != point]
        fallback = not partners
        if fallback:
            result.fallback_points += 1
        for _ in range(multiplier):
            for attempt in range(max_resample + 1):
                if fallback:
                    order = rng.permutation(point[1])
                    px = tuple(px_keys[point][k] for k in order)
                else:
                    px = px_keys[partners[int(rng.integers(len(partners)))]]
                collision = (dx_keys[point], px) in observed
                if not collision:
                    break
            result.samples.append(NegativeSample(point, px, collision, fallback))

    if result.fallback_points:
        logger.warning(
            "[PW] %d prediction points had no equal-length partner; used in-sample visit permutation",
            result.fallback_points,
        )
    logger.info("[PW] Generated %d negatives (%d collisions)", len(result), result.collisions)
    return result


# ═══════════════════════════════════════════════════════════════════════════
#  Discriminator
# ═══════════════════════════════════════════════════════════════════════════


class PropensityClassifier:
    """Base encoder pair plus a logistic head over [E_D, E_P, E_D * E_P].

    The product term lets the head see the joint of the two streams;
    negatives share each stream's marginal with the positives.
    """

    def __init__(self, kind: ModelKind, M: int, N: int, r: int, seed: int = 0) -> None:
        self.encoder = Model(kind, M, N, r, seed)
        rng = np.random.default_rng([seed, 1])
        bound = 1.0 / np.sqrt(r)
        self.params: Dict[str, Tensor] = {
            name: p for name, p in self.encoder.params.items() if not name.startswith("predictor.")
        }
        self.params["head.W"] = Tensor(rng.uniform(-bound, bound, size=3 * r), requires_grad=True, name="head.W")
        self.params["head.b"] = Tensor(np.zeros(1), requires_grad=True, name="head.b")

    def logit(self, dx_codes: Sequence[Sequence[int]], px_codes: Sequence[Sequence[int]]) -> Tensor:
        e_d = encode_prefix(self.encoder, Stream.DX, dx_codes)
        e_p = encode_prefix(self.encoder, Stream.PX, px_codes)
        features = T.concat([e_d, e_p, e_d * e_p])
        return T.sum_(features * self.params["head.W"]) + self.params["head.b"]

    def probability(self, dx_codes: Sequence[Sequence[int]], px_codes: Sequence[Sequence[int]]) -> float:
        """p(observed | D, P), strictly inside (0, 1)."""
        with no_grad():
            p = float(T.sigmoid(self.logit(dx_codes, px_codes)).data[0])
        return float(np.clip(p, PROB_EPS, 1.0 - PROB_EPS))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for name, value in state.items():
            self.params[name].data = value.copy()


class PropensityFit(NamedTuple):
    classifier: PropensityClassifier
    holdout_auc: float
    epochs: int
    warnings: List[str]

    @property
    def informative(self) -> bool:
        """Holdout AUC above chance; nan counts as chance."""
        return bool(self.holdout_auc > 0.5 + AUC_CHANCE_TOL)


Example = Tuple[CodeSets, CodeSets, float]


def _pool(records: List[PatientRecord], negatives: NegativeSet) -> Dict[PredictionPoint, List[Example]]:
    """Each prediction point's observed example followed by its negatives."""
    pool: Dict[PredictionPoint, List[Example]] = {}
    for i, j in prediction_points(records):
        pool[(i, j)] = [(_key(records[i].codes(Stream.DX, j)), _key(records[i].codes(Stream.PX, j)), 1.0)]
    for sample in negatives.samples:
        i, j = sample.dx_point
        pool.setdefault((i, j), []).append((_key(records[i].codes(Stream.DX, j)), sample.px_codes, 0.0))
    return pool


def _pool_loss(classifier: PropensityClassifier, examples: Sequence[Example]) -> Tensor:
    terms = [
        prediction_loss(T.sigmoid(classifier.logit(dx, px)), np.array([label]))
        for dx, px, label in examples
    ]
    return T.mean(T.stack(terms))


def fit_propensity(
    records: List[PatientRecord],
    negatives: NegativeSet,
    config: Optional[PwConfig] = None,
    kind: ModelKind = ModelKind.LSTM,
    M: Optional[int] = None,
    N: Optional[int] = None,
    r: int = 16,
    seed: int = 0,
) -> PropensityFit:
    """BCE training on observed vs permuted points with early stopping on a holdout."""
    config = config or PwConfig()
    if not prediction_points(records) or not len(negatives):
        raise InvalidArgumentError("propensity fitting needs positives and negatives")
    if M is None or N is None:
        max_dx = max(rec.max_codes()[0] for rec in records)
        max_px = max(rec.max_codes()[1] for rec in records)
        M, N = M or max_dx + 1, N or max_px + 1

    rng = np.random.default_rng(seed)
    # a point and its negatives land on the same side of the split
    pool = _pool(records, negatives)
    groups = list(pool.values())
    order = rng.permutation(len(groups))
    n_holdout = max(1, int(round(config.holdout_fraction * len(groups))))
    holdout = [example for k in order[:n_holdout] for example in groups[k]]
    train = [example for k in order[n_holdout:] for example in groups[k]]
    if not train:
        raise InvalidArgumentError("pool too small for a holdout split")

    classifier = PropensityClassifier(kind, M, N, r, seed)
    names = list(classifier.params)
    leaves = [classifier.params[n] for n in names]
    adam = AdamState()
    best_loss = float("inf")
    best_state = classifier.state_dict()
    since_best = 0
    epochs_run = 0

    for epoch in tqdm(range(1, config.max_epochs + 1), desc="pw propensity",
                      disable=not logger.isEnabledFor(logging.INFO)):
        epochs_run = epoch
        shuffle = rng.permutation(len(train))
        for start in range(0, len(shuffle), config.batch_size):
            batch = [train[k] for k in shuffle[start:start + config.batch_size]]
            table = T.backward(_pool_loss(classifier, batch), leaves)
            adam_step(classifier.params, {n: table[p] for n, p in zip(names, leaves)}, adam, config.model_lr)
        with no_grad():
            holdout_loss = _pool_loss(classifier, holdout).item()
        logger.debug("[PW] propensity epoch %d holdout BCE %.5f", epoch, holdout_loss)
        if holdout_loss < best_loss:
            best_loss = holdout_loss
            best_state = classifier.state_dict()
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break

    classifier.load_state_dict(best_state)
    warnings: List[str] = []
    labels = np.array([label for _, _, label in holdout])
    if len(set(labels.tolist())) < 2:
        auc = float("nan")
        warnings.append("holdout contains a single class; AUC undefined")
    else:
        scores = np.array([classifier.probability(dx, px) for dx, px, _ in holdout])
        auc = float(roc_auc_score(labels, scores))
        if auc < 0.5:
            warnings.append(f"propensity holdout AUC {auc:.3f} < 0.5; weights will be near-uniform")
    for message in warnings:
        logger.warning("[PW] %s", message)
    logger.info("[PW] Propensity classifier: holdout AUC %.4f after %d epochs", auc, epochs_run)
    return PropensityFit(classifier, auc, epochs_run, warnings)


# ═══════════════════════════════════════════════════════════════════════════
#  Weights and training
# ═══════════════════════════════════════════════════════════════════════════


def pw_weights(
    probabilities: Sequence[float],
    low: float = WEIGHT_MIN,
    high: float = WEIGHT_MAX,
) -> np.ndarray:
    """Odds p / (1 - p), clipped to [low, high] and renormalized to mean 1."""
    p = np.clip(np.asarray(probabilities, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    return clip_and_normalize(p / (1.0 - p), low, high)


def propensity_weights(
    classifier: PropensityClassifier,
    records: List[PatientRecord],
    low: float = WEIGHT_MIN,
    high: float = WEIGHT_MAX,
) -> SampleWeightTable:
    points = prediction_points(records)
    probs = [
        classifier.probability(records[i].codes(Stream.DX, j), records[i].codes(Stream.PX, j))
        for i, j in points
    ]
    return SampleWeightTable(points, pw_weights(probs, low, high))


class PwResult(NamedTuple):
    fit: FitResult
    weights: SampleWeightTable
    holdout_auc: float
    warnings: List[str]
    negatives: NegativeSet


def fit_pw(
    model: Model,
    train: List[PatientRecord],
    val: List[PatientRecord],
    config: Optional[TrainConfig] = None,
    pw_config: Optional[PwConfig] = None,
    hsic_config: Optional[HsicConfig] = None,
    negatives: Optional[NegativeSet] = None,
) -> PwResult:
    """Fit the propensity model on ``train`` then train ``model`` with the fixed odds weights.

    ``negatives`` defaults to a fresh ``generate_negatives`` draw. With no
    negatives, or a discriminator no better than chance on its holdout, the
    run falls back to uniform weights and records a warning.
    """
    config = config or TrainConfig()
    pw_config = pw_config or PwConfig()
    if negatives is None:
        negatives = generate_negatives(train, pw_config.negative_multiplier, config.seed, pw_config.max_resample)
    if not len(negatives):
        warnings = ["no negatives generated; PW weights are uniform"]
        logger.warning("[PW] %s", warnings[0])
        weights = SampleWeightTable.uniform(prediction_points(train))
        auc = float("nan")
    else:
        propensity = fit_propensity(
            train, negatives, pw_config, model.kind, model.M, model.N, model.r, config.seed,
        )
        warnings, auc = list(propensity.warnings), propensity.holdout_auc
        if propensity.informative:
            weights = propensity_weights(propensity.classifier, train, config.weight_min, config.weight_max)
        else:
            warnings.append("discriminator is at chance on its holdout; PW weights are uniform")
            logger.warning("[PW] %s", warnings[-1])
            weights = SampleWeightTable.uniform(prediction_points(train))
    logger.info("[PW] Weight summary %s", weights.summary())
    result = fit(model, train, val, config, Method.PW, hsic_config, fixed_weights=weights)
    return PwResult(result, weights, auc, warnings, negatives)
