"""
CHE Toolkit - Dimension-wise HSIC
===================================
Hilbert-Schmidt independence between a diagnosis embedding and a procedure
embedding of the same prediction point.

The r coordinates of each vector are the kernel sample axis: K[q, q'] is an
RBF kernel between scalar coordinate values, so K_d, K_p are r x r and

    HSIC_local = Tr(K_d J K_p J) / (r - 1)^2,   J = I - (1/r) 11^T.

The weighted form scales both vectors by the sample weight before the
kernel. Under the median heuristic the bandwidth is taken from the
unscaled vectors; a bandwidth recomputed on w*e would scale with w and
make the kernel (and the weight gradient) independent of w.
"""

import logging
import time
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.distance import pdist

from src import metrics as run_metrics
from src import tensor as T
from src.errors import InvalidArgumentError, ShapeError
from src.models import HsicConfig, PatientRecord, SigmaPolicy, prediction_points
from src.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

Weight = Union[float, Tensor]


def rbf_kernel_matrix(v: Tensor, sigma: float) -> Tensor:
    """K[q, q'] = exp(-(v_q - v_q')^2 / sigma^2)."""
    if sigma <= 0:
        raise InvalidArgumentError(f"kernel bandwidth must be positive, got {sigma}")
    v = T.as_tensor(v)
    return T.exp(T.sqdist(v) * (-1.0 / (sigma * sigma)))


def centering_matrix(r: int) -> np.ndarray:
    if r < 2:
        raise InvalidArgumentError(f"centering needs r >= 2, got {r}")
    return np.eye(r) - np.full((r, r), 1.0 / r)


def median_sigma(v: np.ndarray) -> float:
    """sqrt(median pairwise squared distance of coordinates); 1.0 if that is 0."""
    v = np.asarray(v, dtype=np.float64).reshape(-1, 1)
    if v.shape[0] < 2:
        raise InvalidArgumentError("median heuristic needs at least 2 coordinates")
    med = float(np.median(pdist(v, "sqeuclidean")))
    return float(np.sqrt(med)) if med > 0 else 1.0


def bandwidths(e_d: np.ndarray, e_p: np.ndarray, config: HsicConfig) -> Tuple[float, float]:
    if config.sigma_policy is SigmaPolicy.FIXED:
        return config.sigma, config.sigma
    return median_sigma(e_d), median_sigma(e_p)


def _check_pair(e_d: Tensor, e_p: Tensor, config: HsicConfig) -> int:
    if e_d.data.ndim != 1 or e_d.shape != e_p.shape:
        raise ShapeError("hsic_local", [e_d.shape, e_p.shape], "expected two r-vectors")
    r = e_d.shape[0]
    if r < 2:
        raise InvalidArgumentError(f"HSIC needs r >= 2, got {r}")
    if config.r is not None and r != config.r:
        raise ShapeError("hsic_local", [e_d.shape, (config.r,)], "dimension differs from config.r")
    return r


def _hsic_from_kernels(k_d: Tensor, k_p: Tensor, r: int) -> Tensor:
    J = Tensor(centering_matrix(r))
    return T.trace(k_d @ J @ k_p @ J) * (1.0 / float((r - 1) ** 2))


def hsic_local(
    e_d: Union[Tensor, np.ndarray],
    e_p: Union[Tensor, np.ndarray],
    config: Optional[HsicConfig] = None,
    weight: Weight = 1.0,
    sigmas: Optional[Tuple[float, float]] = None,
) -> Tensor:
    """Tr(K_d J K_p J)/(r-1)^2 for the pair (weight*e_d, weight*e_p).

    ``sigmas`` overrides the bandwidth policy; otherwise it is applied to
    the unscaled vectors.
    """
    config = config or HsicConfig()
    e_d, e_p = T.as_tensor(e_d), T.as_tensor(e_p)
    r = _check_pair(e_d, e_p, config)
    sigma_d, sigma_p = sigmas or bandwidths(e_d.data, e_p.data, config)
    if isinstance(weight, Tensor) or weight != 1.0:
        e_d = e_d * weight
        e_p = e_p * weight
    started = time.perf_counter()
    value = _hsic_from_kernels(rbf_kernel_matrix(e_d, sigma_d), rbf_kernel_matrix(e_p, sigma_p), r)
    run_metrics.record_hsic_local(time.perf_counter() - started)
    return value


def hsic_aggregate(
    pairs: Sequence[Tuple[Union[Tensor, np.ndarray], Union[Tensor, np.ndarray], Weight]],
    config: Optional[HsicConfig] = None,
) -> Tensor:
    """Mean over prediction points of hsic_local(w*e_d, w*e_p)."""
    if not pairs:
        raise InvalidArgumentError("hsic_aggregate needs at least one pair")
    terms: List[Tensor] = []
    for e_d, e_p, w in pairs:
        w_value = w.data if isinstance(w, Tensor) else w
        if np.any(np.asarray(w_value) <= 0):
            raise InvalidArgumentError(f"sample weights must be positive, got {w_value}")
        terms.append(hsic_local(e_d, e_p, config, weight=w))
    return T.mean(T.concat([T.reshape(t, (1,)) for t in terms]))


def split_hsic(
    model,
    records: List[PatientRecord],
    config: Optional[HsicConfig] = None,
    weights=None,
) -> float:
    """Mean HSIC over a split's prediction points with a frozen model.

    ``weights`` is an optional SampleWeightTable; unweighted when omitted.
    """
    points = prediction_points(records)
    if not points:
        raise InvalidArgumentError("split has no prediction points")
    total = 0.0
    with no_grad():
        for i, j in points:
            e_d, e_p = model.embed_point(records[i], j)
            w = 1.0 if weights is None else weights.get(i, j)
            total += hsic_local(e_d, e_p, config, weight=w).item()
    return total / len(points)
