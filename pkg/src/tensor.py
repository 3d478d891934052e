"""
CHE Toolkit - Reverse-Mode Automatic Differentiation
======================================================
A small dense-tensor autodiff engine on float64 numpy arrays.

Every ``Tensor`` is also its own graph node: it remembers the operation that
produced it (``op``), its parent tensors and a closure that pushes the
upstream gradient back to those parents. The graph is rebuilt on every
forward pass (a dynamic tape), which suits variable-length visit prefixes.

Recording is thread-local: a graph belongs to the thread that built it, and
``no_grad()`` suspends recording for evaluation passes.
"""

from __future__ import annotations

import logging
import threading
from contextlib import contextmanager
from enum import Enum
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, softmax as _softmax

from src.errors import InvalidArgumentError, NumericOverflowError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]


class OpKind(str, Enum):
    """Operations recorded on the tape."""
    LEAF = "leaf"
    MATMUL = "matmul"
    ADD = "add"
    SUB = "sub"
    MUL = "mul"
    DIV = "div"
    SCALE = "scale"
    EXP = "exp"
    LOG = "log"
    TANH = "tanh"
    SIGMOID = "sigmoid"
    SOFTMAX = "softmax"
    SUM = "sum"
    MEAN = "mean"
    TRACE = "trace"
    TRANSPOSE = "transpose"
    CONCAT = "concat"
    SLICE = "slice"
    SQDIST = "sqdist"
    RESHAPE = "reshape"
    CLIP = "clip"


# ---------------------------------------------------------------------------
# Recording switch
# ---------------------------------------------------------------------------

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend graph recording in the current thread."""
    previous = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------

class Tensor:
    """Dense float64 array participating in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward", "name")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: str = "",
    ) -> None:
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.op = OpKind.LEAF
        self.parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]] = None
        self.name = name

    # -- introspection ---------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op.value}{label})"

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return slice_(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(value: Union["Tensor", ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# ---------------------------------------------------------------------------
# Node construction
# ---------------------------------------------------------------------------

def _make(
    op: OpKind,
    out: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]],
    detail: str = "",
) -> Tensor:
    out = np.asarray(out, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise NumericOverflowError(op.value, detail)
    node = Tensor(out)
    node.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        node.requires_grad = True
        node.parents = tuple(parents)
        node._backward = backward
    return node


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(op: OpKind, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op.value, [a.shape, b.shape]) from None


# ---------------------------------------------------------------------------
# Elementwise binary ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(OpKind.ADD, a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(OpKind.ADD, a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(OpKind.SUB, a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(OpKind.SUB, a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(OpKind.MUL, a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(OpKind.MUL, a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(OpKind.DIV, a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(OpKind.DIV, out, (a, b), backward, "division by zero")


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)

    def backward(g):
        return (g * c,)

    return _make(OpKind.SCALE, x.data * c, (x,), backward)


# ---------------------------------------------------------------------------
# Elementwise unary ops
# ---------------------------------------------------------------------------

def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return _make(OpKind.EXP, out, (x,), backward, "exp overflow")


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)

    def backward(g):
        return (g / x.data,)

    return _make(OpKind.LOG, out, (x,), backward, "log of non-positive value")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _make(OpKind.TANH, out, (x,), backward)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = expit(x.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(OpKind.SIGMOID, out, (x,), backward)


def softmax(x) -> Tensor:
    """Softmax over the last axis (max-subtracted)."""
    x = as_tensor(x)
    out = _softmax(x.data, axis=-1)

    def backward(g):
        inner = np.sum(g * out, axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _make(OpKind.SOFTMAX, out, (x,), backward)


def clip(x, low: float, high: float) -> Tensor:
    """Clamp values; the gradient is zero wherever the clamp is active."""
    x = as_tensor(x)
    out = np.clip(x.data, low, high)
    passthrough = ((x.data >= low) & (x.data <= high)).astype(np.float64)

    def backward(g):
        return (g * passthrough,)

    return _make(OpKind.CLIP, out, (x,), backward)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def sum_(x, axis: Optional[int] = None) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _make(OpKind.SUM, out, (x,), backward)


def mean(x, axis: Optional[int] = None) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    out = np.mean(x.data, axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g / count, axis), x.shape).copy(),)

    return _make(OpKind.MEAN, out, (x,), backward)


def trace(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ShapeError(OpKind.TRACE.value, [x.shape], "expected a square matrix")
    n = x.shape[0]

    def backward(g):
        return (float(g) * np.eye(n),)

    return _make(OpKind.TRACE, np.trace(x.data), (x,), backward)


# ---------------------------------------------------------------------------
# Linear algebra and structure
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product for 1-D and 2-D operands (numpy ``@`` semantics)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise ShapeError(OpKind.MATMUL.value, [a.shape, b.shape], "operands must be 1-D or 2-D")
    a2 = a.data if a.data.ndim == 2 else a.data[None, :]
    b2 = b.data if b.data.ndim == 2 else b.data[:, None]
    if a2.shape[1] != b2.shape[0]:
        raise ShapeError(OpKind.MATMUL.value, [a.shape, b.shape])
    out2 = a2 @ b2
    out = a.data @ b.data

    def backward(g):
        g2 = np.reshape(g, out2.shape)
        ga = (g2 @ b2.T).reshape(a.shape)
        gb = (a2.T @ g2).reshape(b.shape)
        return ga, gb

    return _make(OpKind.MATMUL, out, (a, b), backward)


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(OpKind.TRANSPOSE.value, [x.shape], "expected a matrix")

    def backward(g):
        return (g.T,)

    return _make(OpKind.TRANSPOSE, x.data.T, (x,), backward)


def reshape(x, shape: Tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(OpKind.RESHAPE.value, [x.shape, tuple(shape)]) from None

    def backward(g):
        return (g.reshape(x.shape),)

    return _make(OpKind.RESHAPE, out, (x,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeError(OpKind.CONCAT.value, [], "nothing to concatenate")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError(OpKind.CONCAT.value, [p.shape for p in parts]) from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(OpKind.CONCAT, out, parts, backward)


def stack(tensors: Sequence) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeError(OpKind.CONCAT.value, [], "nothing to stack")
    return concat([reshape(p, (1,) + p.shape) for p in parts], axis=0)


def slice_(x, key) -> Tensor:
    """Basic (int/slice) indexing."""
    x = as_tensor(x)
    try:
        out = x.data[key]
    except (IndexError, TypeError):
        raise ShapeError(OpKind.SLICE.value, [x.shape], f"bad index {key!r}") from None

    def backward(g):
        full = np.zeros_like(x.data)
        full[key] += g
        return (full,)

    return _make(OpKind.SLICE, np.array(out, dtype=np.float64), (x,), backward)


def sqdist(x) -> Tensor:
    """Pairwise squared L2 distance between rows: D[i, j] = ||x_i - x_j||^2.

    A 1-D input is treated as a column of scalars, giving (x_i - x_j)^2.
    """
    x = as_tensor(x)
    if x.data.ndim not in (1, 2):
        raise ShapeError(OpKind.SQDIST.value, [x.shape], "expected a vector or matrix")
    rows = x.data[:, None] if x.data.ndim == 1 else x.data
    diff = rows[:, None, :] - rows[None, :, :]
    out = np.sum(diff * diff, axis=-1)

    def backward(g):
        s = g + g.T
        grad = 2.0 * (s.sum(axis=1)[:, None] * rows - s @ rows)
        return (grad.reshape(x.shape),)

    return _make(OpKind.SQDIST, out, (x,), backward)


# ---------------------------------------------------------------------------
# Dispatcher
# ---------------------------------------------------------------------------

_DISPATCH: Dict[OpKind, Callable[..., Tensor]] = {
    OpKind.MATMUL: matmul,
    OpKind.ADD: add,
    OpKind.SUB: sub,
    OpKind.MUL: mul,
    OpKind.DIV: div,
    OpKind.SCALE: scale,
    OpKind.EXP: exp,
    OpKind.LOG: log,
    OpKind.TANH: tanh,
    OpKind.SIGMOID: sigmoid,
    OpKind.SOFTMAX: softmax,
    OpKind.SUM: sum_,
    OpKind.MEAN: mean,
    OpKind.TRACE: trace,
    OpKind.TRANSPOSE: transpose,
    OpKind.SLICE: slice_,
    OpKind.SQDIST: sqdist,
    OpKind.RESHAPE: reshape,
    OpKind.CLIP: clip,
}


def apply(op_kind: Union[OpKind, str], inputs: Sequence, **kwargs) -> Tensor:
    """Apply ``op_kind`` to ``inputs`` and record the node.

    ``concat`` takes all inputs as its parts; every other op takes its
    operands positionally followed by keyword arguments (``c`` for scale,
    ``key`` for slice, ``axis`` for reductions, ``shape`` for reshape,
    ``low``/``high`` for clip).
    """
    op = OpKind(op_kind)
    if op is OpKind.CONCAT:
        return concat(inputs, **kwargs)
    if op is OpKind.LEAF:
        raise InvalidArgumentError("leaf tensors are created directly, not applied")
    return _DISPATCH[op](*inputs, **kwargs)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack_: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack_.append((node, True))
        for parent in reversed(node.parents):
            if id(parent) not in visited:
                stack_.append((parent, False))
    return order


def backward(root: Tensor, params: Optional[Sequence[Tensor]] = None) -> Dict[Tensor, np.ndarray]:
    """Propagate d(root)/d(node) to every ``requires_grad`` leaf.

    Returns a gradient table keyed by leaf tensor. Leaves listed in
    ``params`` that are not on a path to ``root`` receive zeros. Each leaf's
    ``.grad`` is overwritten with its gradient from this pass.
    """
    if root.size != 1:
        raise ShapeError("backward", [root.shape], "root must be scalar")

    grads: Dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    table: Dict[Tensor, np.ndarray] = {}

    for node in reversed(_topological_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.op is OpKind.LEAF:
            if node.requires_grad:
                table[node] = g
            continue
        if node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg

    for p in params or ():
        if p not in table:
            table[p] = np.zeros_like(p.data)
    for leaf, g in table.items():
        leaf.grad = g
    return table


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def grad_check(
    f: Callable[[Tensor], Tensor],
    x: ArrayLike,
    h: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Error per coordinate is |a - c| / max(|a|, |c|, 1e-8).
    """
    if h <= 0:
        raise InvalidArgumentError(f"step h must be positive, got {h}")
    point = np.array(x, dtype=np.float64)
    leaf = Tensor(point.copy(), requires_grad=True)
    out = f(leaf)
    analytic = backward(out, [leaf])[leaf]

    numeric = np.zeros_like(point)
    flat = numeric.reshape(-1)
    for idx in range(point.size):
        plus = point.copy().reshape(-1)
        minus = point.copy().reshape(-1)
        plus[idx] += h
        minus[idx] -= h
        with no_grad():
            f_plus = f(Tensor(plus.reshape(point.shape))).item()
            f_minus = f(Tensor(minus.reshape(point.shape))).item()
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericOverflowError("grad_check", f"f non-finite near coordinate {idx}")
        flat[idx] = (f_plus - f_minus) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    err = float(np.max(np.abs(analytic - numeric) / denom)) if point.size else 0.0
    logger.debug("grad_check over %d coordinates: max relative error %.3e", point.size, err)
    return err
