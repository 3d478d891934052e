"""
CHE Toolkit - Optimizers
==========================
Plain gradient descent and Adam over named parameter tables.

Both steps validate every gradient before touching any parameter, so a
non-finite gradient aborts the whole step and leaves the model unchanged.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from src.errors import NumericOverflowError, ShapeError
from src.tensor import Tensor

logger = logging.getLogger(__name__)


def _validate(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], op: str) -> None:
    for name, param in params.items():
        if name not in grads:
            continue
        g = grads[name]
        if g.shape != param.shape:
            raise ShapeError(op, [param.shape, g.shape], f"parameter {name!r}")
        if not np.all(np.isfinite(g)):
            raise NumericOverflowError(op, f"non-finite gradient for {name!r}; step aborted")


def sgd_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    learning_rate: float,
) -> Mapping[str, Tensor]:
    """p <- p - lr * g for every parameter with a gradient."""
    _validate(params, grads, "sgd_step")
    for name, param in params.items():
        if name in grads:
            param.data = param.data - learning_rate * grads[name]
    return params


@dataclass
class AdamState:
    """First/second moment estimates and step count for Adam."""
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    learning_rate: float = 1e-3,
) -> Mapping[str, Tensor]:
    """One bias-corrected Adam update; advances ``state`` in place."""
    _validate(params, grads, "adam_step")
    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t

    for name, param in params.items():
        if name not in grads:
            continue
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        m_hat = m / correction1
        v_hat = v / correction2
        param.data = param.data - learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return params
