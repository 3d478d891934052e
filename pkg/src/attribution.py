"""
CHE Toolkit - Feature Attribution
===================================
Gradient x input contribution of each historical visit's diagnosis and
procedure embeddings toward one predicted code.

For visit j' of stream s the score is  d logit_target / d x_s[j']  .  x_s[j']
where x_s[j'] is the mean-pooled visit embedding fed to the encoder. The
pre-sigmoid logit is differentiated so saturated probabilities do not hide
the contributions.
"""

import logging
from typing import List, Optional

import numpy as np

from src import tensor as T
from src.encoders import Model, embed_visit, encode_inputs, predict_logits
from src.errors import InvalidArgumentError
from src.evaluation import rank_codes
from src.models import (
    AttributionReport,
    AttributionSummary,
    CausalSpec,
    PatientRecord,
    Stream,
    VisitContribution,
    prediction_points,
)
from src.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)


def _visit_leaves(model: Model, record: PatientRecord, stream: Stream, j: int) -> List[Tensor]:
    table = model.embedding(stream)
    with no_grad():
        embedded = [embed_visit(codes, table) for codes in record.codes(stream, j)]
    return [Tensor(x.data.copy(), requires_grad=True, name=f"{stream.value}.visit{k + 1}")
            for k, x in enumerate(embedded)]


def feature_contribution(model: Model, record: PatientRecord, j: int, target: int) -> AttributionReport:
    """Per-visit (dx, px) contributions to the target code's logit at prefix ``j``."""
    if not 1 <= j <= record.t - 1:
        raise InvalidArgumentError(f"prefix j={j} outside 1..{record.t - 1} for patient {record.id}")
    if not 0 <= target < model.M:
        raise InvalidArgumentError(f"target code {target} outside [0, {model.M})")

    dx_leaves = _visit_leaves(model, record, Stream.DX, j)
    px_leaves = _visit_leaves(model, record, Stream.PX, j)
    e_d, _ = encode_inputs(model, Stream.DX, dx_leaves)
    e_p, _ = encode_inputs(model, Stream.PX, px_leaves)
    logit = predict_logits(model, e_d, e_p)[target]
    grads = T.backward(logit, dx_leaves + px_leaves)

    visits = [
        VisitContribution(
            visit=k + 1,
            dx=float(np.dot(grads[dx_leaves[k]], dx_leaves[k].data)),
            px=float(np.dot(grads[px_leaves[k]], px_leaves[k].data)),
        )
        for k in range(j)
    ]
    return AttributionReport(patient_id=record.id, prefix=j, target=int(target), visits=visits)


def top_predicted_code(model: Model, record: PatientRecord, j: int) -> int:
    return int(rank_codes(model.score_point(record, j))[0])


def dx_share(report: AttributionReport) -> Optional[float]:
    """Share of absolute contribution mass on diagnoses; None when both are zero."""
    dx_mass = sum(abs(v.dx) for v in report.visits)
    px_mass = sum(abs(v.px) for v in report.visits)
    total = dx_mass + px_mass
    return None if total == 0 else dx_mass / total


def attribution_summary(
    model: Model,
    records: List[PatientRecord],
    spec: Optional[CausalSpec] = None,
    max_points: Optional[int] = None,
) -> AttributionSummary:
    """Mean diagnosis-stream share over prediction points, attributing the top-1 code."""
    points = prediction_points(records)
    if max_points is not None:
        points = points[:max_points]
    shares = []
    for i, j in points:
        share = dx_share(feature_contribution(model, records[i], j, top_predicted_code(model, records[i], j)))
        if share is not None:
            shares.append(share)
    if len(shares) < len(points):
        logger.debug("[ATTR] %d points had zero total contribution", len(points) - len(shares))
    return AttributionSummary(
        dx_share=float(np.mean(shares)) if shares else 0.0,
        points=len(shares),
        procedures_inert=spec.procedures_inert if spec is not None else None,
    )
