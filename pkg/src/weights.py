"""
CHE Toolkit - Sample Weight Tables
====================================
Per-prediction-point weights shared by CHE (learned by HSIC descent) and
permutation weighting (fixed propensity odds).

Both approaches normalize the same way: find the scale c for which
mean(clip(c * w, lo, hi)) == 1. The result is bounded, has mean one and
does not change when every raw weight is multiplied by a constant.
"""

import json
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Union

import numpy as np
from scipy.optimize import brentq

from src.errors import DataFormatError, InvalidArgumentError
from src.models import PredictionPoint

logger = logging.getLogger(__name__)

WEIGHT_MIN = 0.05
WEIGHT_MAX = 20.0


def clip_and_normalize(
    raw: np.ndarray,
    low: float = WEIGHT_MIN,
    high: float = WEIGHT_MAX,
) -> np.ndarray:
    """Bounded, mean-one rescaling of positive raw weights."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        return raw.copy()
    if not np.all(np.isfinite(raw)) or np.any(raw <= 0):
        raise InvalidArgumentError("raw weights must be positive and finite")
    if not low <= 1.0 <= high:
        raise InvalidArgumentError(f"bounds [{low}, {high}] must bracket 1")

    scaled = raw / raw.mean()
    if scaled.min() >= low and scaled.max() <= high:
        return scaled

    def excess(c: float) -> float:
        return float(np.clip(c * raw, low, high).mean()) - 1.0

    c_low = low / raw.max()
    c_high = high / raw.min()
    c = brentq(excess, c_low, c_high, xtol=1e-15, rtol=1e-15, maxiter=500)
    weights = np.clip(c * raw, low, high)
    interior = (weights > low) & (weights < high)
    if interior.any():
        # absorb the root-finding residual into the unclipped entries
        residual = weights.sum() - weights.size
        weights[interior] -= residual / interior.sum()
    return weights


class SampleWeightTable:
    """Positive weight per prediction point (i, j) of the training split."""

    def __init__(self, points: Sequence[PredictionPoint], values: Union[np.ndarray, None] = None) -> None:
        self.points: List[PredictionPoint] = [tuple(p) for p in points]
        self._index: Dict[PredictionPoint, int] = {p: k for k, p in enumerate(self.points)}
        if len(self._index) != len(self.points):
            raise InvalidArgumentError("duplicate prediction points in weight table")
        if values is None:
            values = np.ones(len(self.points))
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (len(self.points),):
            raise InvalidArgumentError(
                f"{values.shape[0] if values.ndim else 0} weights for {len(self.points)} points"
            )
        self.values = values.copy()

    @classmethod
    def uniform(cls, points: Sequence[PredictionPoint]) -> "SampleWeightTable":
        return cls(points)

    def __len__(self) -> int:
        return len(self.points)

    def __contains__(self, point) -> bool:
        return tuple(point) in self._index

    def get(self, i: int, j: int) -> float:
        return float(self.values[self._index[(i, j)]])

    def set(self, i: int, j: int, value: float) -> None:
        self.values[self._index[(i, j)]] = value

    def covers(self, points: Iterable[PredictionPoint]) -> bool:
        wanted = [tuple(p) for p in points]
        return len(wanted) == len(self.points) and all(p in self._index for p in wanted)

    def copy(self) -> "SampleWeightTable":
        return SampleWeightTable(self.points, self.values)

    def normalize(self, low: float = WEIGHT_MIN, high: float = WEIGHT_MAX) -> "SampleWeightTable":
        """Clip to [low, high] and renormalize to mean 1, in place."""
        self.values = clip_and_normalize(self.values, low, high)
        return self

    def summary(self) -> Dict[str, float]:
        return {
            "mean": float(self.values.mean()),
            "min": float(self.values.min()),
            "max": float(self.values.max()),
        }

    # -- persistence -----------------------------------------------------

    def to_json_dict(self) -> Dict[str, float]:
        return {f"({i},{j})": float(w) for (i, j), w in zip(self.points, self.values)}

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json_dict(), indent=1) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SampleWeightTable":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
            points = []
            for key in raw:
                i, j = key.strip("()").split(",")
                points.append((int(i), int(j)))
        except (json.JSONDecodeError, ValueError) as exc:
            raise DataFormatError(str(path), None, f"malformed weight table: {exc}") from exc
        return cls(points, np.array(list(raw.values()), dtype=np.float64))
