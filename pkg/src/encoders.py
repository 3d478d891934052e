"""
CHE Toolkit - Visit Sequence Encoders
=======================================
Two-stream sequence models for next-visit diagnosis prediction.

Each stream (diagnoses, procedures) has its own embedding matrix and its
own encoder parameters. Visits are embedded by mean-pooling code rows, the
prefix of visits 1..j is encoded into an r-vector, and the predictor maps
the concatenated stream embeddings to M independent code probabilities.

Encoder families:
  * ``lstm``               final hidden state of a single-layer LSTM
  * ``reverse_attention``  RETAIN-style: attention scores from a recurrent
                           pass run backwards over the prefix
  * ``bi_attention``       Dipole-style: bidirectional recurrent states with
                           location-based attention, within the prefix only
"""

import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src import tensor as T
from src.errors import InvalidArgumentError, InvalidRecordError, ShapeError
from src.models import ModelKind, PatientRecord, Stream
from src.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


# ═══════════════════════════════════════════════════════════════════════════
#  Model container
# ═══════════════════════════════════════════════════════════════════════════


def _parameter_shapes(kind: ModelKind, M: int, N: int, r: int) -> List[Tuple[str, Tuple[int, ...], bool]]:
    """(name, shape, is_bias) for every parameter, in initialization order."""
    shapes: List[Tuple[str, Tuple[int, ...], bool]] = [
        ("dx.embedding", (M, r), False),
        ("px.embedding", (N, r), False),
    ]
    for s in ("dx", "px"):
        if kind is ModelKind.LSTM:
            shapes += [
                (f"{s}.lstm.W", (r, 4 * r), False),
                (f"{s}.lstm.U", (r, 4 * r), False),
                (f"{s}.lstm.b", (4 * r,), True),
            ]
        elif kind is ModelKind.REVERSE_ATTENTION:
            shapes += [
                (f"{s}.rev.W", (r, r), False),
                (f"{s}.rev.U", (r, r), False),
                (f"{s}.rev.b", (r,), True),
                (f"{s}.rev.w_att", (r,), False),
            ]
        else:
            shapes += [
                (f"{s}.fwd.W", (r, r), False),
                (f"{s}.fwd.U", (r, r), False),
                (f"{s}.fwd.b", (r,), True),
                (f"{s}.bwd.W", (r, r), False),
                (f"{s}.bwd.U", (r, r), False),
                (f"{s}.bwd.b", (r,), True),
                (f"{s}.att.w", (2 * r,), False),
                (f"{s}.out.W", (4 * r, r), False),
                (f"{s}.out.b", (r,), True),
            ]
    shapes += [
        ("predictor.W", (2 * r, M), False),
        ("predictor.b", (M,), True),
    ]
    return shapes


class Model:
    """Two-stream encoder plus the Prd layer.

    Parameters
    ----------
    kind : ModelKind
        Encoder family shared by both streams.
    M, N : int
        Diagnosis and procedure vocabulary sizes.
    r : int
        Embedding dimensionality.
    seed : int
        Seed for uniform(-1/sqrt(r), 1/sqrt(r)) initialization; biases start at 0.
    """

    def __init__(self, kind: ModelKind, M: int, N: int, r: int, seed: int = 0) -> None:
        if M < 1 or N < 1:
            raise InvalidArgumentError(f"vocabulary sizes must be positive (M={M}, N={N})")
        if r < 2:
            raise InvalidArgumentError(f"embedding size r must be >= 2, got {r}")
        self.kind = ModelKind(kind)
        self.M = M
        self.N = N
        self.r = r
        self.seed = seed
        self.params: Dict[str, Tensor] = {}

        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(r)
        for name, shape, is_bias in _parameter_shapes(self.kind, M, N, r):
            data = np.zeros(shape) if is_bias else rng.uniform(-bound, bound, size=shape)
            self.params[name] = Tensor(data, requires_grad=True, name=name)

    def __repr__(self) -> str:
        return f"Model(kind={self.kind.value}, M={self.M}, N={self.N}, r={self.r})"

    # -- parameter table -------------------------------------------------

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise InvalidArgumentError(
                f"parameter names differ (missing={sorted(missing)}, unexpected={sorted(extra)})"
            )
        for name, value in state.items():
            value = np.asarray(value, dtype=np.float64)
            if value.shape != self.params[name].shape:
                raise ShapeError("load_state_dict", [self.params[name].shape, value.shape], name)
            self.params[name].data = value.copy()

    def clone(self) -> "Model":
        twin = Model(self.kind, self.M, self.N, self.r, self.seed)
        twin.load_state_dict(self.state_dict())
        return twin

    def embedding(self, stream: Stream) -> Tensor:
        return self.params[f"{Stream(stream).value}.embedding"]

    # -- prediction points -------------------------------------------------

    def forward_point(
        self,
        record: PatientRecord,
        j: int,
        rng: Optional[np.random.Generator] = None,
        dropout: float = 0.0,
    ) -> Tuple[Tensor, Tensor, Tensor]:
        """Logits, E_D and E_P for prediction point (record, j)."""
        e_d = encode_prefix(self, Stream.DX, record.codes(Stream.DX, j), rng, dropout)
        e_p = encode_prefix(self, Stream.PX, record.codes(Stream.PX, j), rng, dropout)
        return predict_logits(self, e_d, e_p), e_d, e_p

    def embed_point(self, record: PatientRecord, j: int) -> Tuple[np.ndarray, np.ndarray]:
        """Frozen-encoder stream embeddings (no graph recorded)."""
        with no_grad():
            e_d = encode_prefix(self, Stream.DX, record.codes(Stream.DX, j))
            e_p = encode_prefix(self, Stream.PX, record.codes(Stream.PX, j))
        return e_d.data, e_p.data

    def score_point(self, record: PatientRecord, j: int) -> np.ndarray:
        """Next-visit code probabilities for evaluation."""
        with no_grad():
            logits, _, _ = self.forward_point(record, j)
            return T.sigmoid(logits).data


# ═══════════════════════════════════════════════════════════════════════════
#  Visit embedding
# ═══════════════════════════════════════════════════════════════════════════


def multi_hot(codes: Sequence[int], size: int) -> np.ndarray:
    vec = np.zeros(size)
    vec[list(codes)] = 1.0
    return vec


def embed_visit(codes: Sequence[int], embedding: Tensor) -> Tensor:
    """Mean of the embedding rows indexed by ``codes``."""
    codes = list(codes)
    if not codes:
        raise InvalidRecordError("cannot embed an empty visit")
    vocab = embedding.shape[0]
    if min(codes) < 0 or max(codes) >= vocab:
        raise InvalidRecordError(f"code index outside [0, {vocab}): {codes}")
    selector = np.zeros(vocab)
    np.add.at(selector, codes, 1.0)
    selector /= len(codes)
    return T.matmul(Tensor(selector), embedding)


def _dropout(x: Tensor, rng: Optional[np.random.Generator], rate: float) -> Tensor:
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(np.float64) / (1.0 - rate)
    return x * Tensor(keep)


# ═══════════════════════════════════════════════════════════════════════════
#  Prefix encoders
# ═══════════════════════════════════════════════════════════════════════════


def _lstm(model: Model, s: str, xs: List[Tensor]) -> Tensor:
    W, U, b = (model.params[f"{s}.lstm.{p}"] for p in ("W", "U", "b"))
    r = model.r
    h = Tensor(np.zeros(r))
    c = Tensor(np.zeros(r))
    for x in xs:
        z = x @ W + h @ U + b
        i = T.sigmoid(z[0:r])
        f = T.sigmoid(z[r:2 * r])
        g = T.tanh(z[2 * r:3 * r])
        o = T.sigmoid(z[3 * r:4 * r])
        c = f * c + i * g
        h = o * T.tanh(c)
    return h


def _recurrent(model: Model, prefix: str, xs: List[Tensor], reverse: bool) -> List[Tensor]:
    """Elman tanh recurrence; returns one state per visit in visit order."""
    W, U, b = (model.params[f"{prefix}.{p}"] for p in ("W", "U", "b"))
    state = Tensor(np.zeros(model.r))
    states: List[Optional[Tensor]] = [None] * len(xs)
    order = range(len(xs) - 1, -1, -1) if reverse else range(len(xs))
    for k in order:
        state = T.tanh(xs[k] @ W + state @ U + b)
        states[k] = state
    return states


def _attend(values: List[Tensor], scores: List[Tensor]) -> Tuple[Tensor, Tensor]:
    alpha = T.softmax(T.concat([T.reshape(sc, (1,)) for sc in scores]))
    return alpha @ T.stack(values), alpha


def _reverse_attention(model: Model, s: str, xs: List[Tensor]) -> Tuple[Tensor, Tensor]:
    states = _recurrent(model, f"{s}.rev", xs, reverse=True)
    w_att = model.params[f"{s}.rev.w_att"]
    return _attend(xs, [g @ w_att for g in states])


def _bi_attention(model: Model, s: str, xs: List[Tensor]) -> Tuple[Tensor, Tensor]:
    forward = _recurrent(model, f"{s}.fwd", xs, reverse=False)
    backward = _recurrent(model, f"{s}.bwd", xs, reverse=True)
    hidden = [T.concat([fw, bw]) for fw, bw in zip(forward, backward)]
    w_att = model.params[f"{s}.att.w"]
    context, alpha = _attend(hidden, [h @ w_att for h in hidden])
    W_out, b_out = model.params[f"{s}.out.W"], model.params[f"{s}.out.b"]
    return T.tanh(T.concat([context, hidden[-1]]) @ W_out + b_out), alpha


def encode_inputs(model: Model, stream: Stream, xs: List[Tensor]) -> Tuple[Tensor, Optional[Tensor]]:
    """Encode already-embedded visits; returns (E, attention weights or None)."""
    if not xs:
        raise InvalidArgumentError("prefix length j must be >= 1")
    s = Stream(stream).value
    if model.kind is ModelKind.LSTM:
        return _lstm(model, s, xs), None
    if model.kind is ModelKind.REVERSE_ATTENTION:
        return _reverse_attention(model, s, xs)
    return _bi_attention(model, s, xs)


def encode_prefix(
    model: Model,
    stream: Stream,
    code_sets: Sequence[Sequence[int]],
    rng: Optional[np.random.Generator] = None,
    dropout: float = 0.0,
) -> Tensor:
    """E^{i,j} for one stream from the code sets of visits 1..j."""
    if len(code_sets) == 0:
        raise InvalidArgumentError("prefix length j must be >= 1")
    table = model.embedding(stream)
    xs = [_dropout(embed_visit(codes, table), rng, dropout) for codes in code_sets]
    return encode_inputs(model, stream, xs)[0]


def attention_weights(model: Model, stream: Stream, code_sets: Sequence[Sequence[int]]) -> Optional[np.ndarray]:
    """Visit-level attention of the attention encoders (None for lstm)."""
    with no_grad():
        table = model.embedding(stream)
        xs = [embed_visit(codes, table) for codes in code_sets]
        _, alpha = encode_inputs(model, stream, xs)
    return None if alpha is None else alpha.data


# ═══════════════════════════════════════════════════════════════════════════
#  Prediction head and loss
# ═══════════════════════════════════════════════════════════════════════════


def predict_logits(model: Model, e_d: Tensor, e_p: Tensor) -> Tensor:
    if e_d.shape != (model.r,) or e_p.shape != (model.r,):
        raise ShapeError("predict_next", [e_d.shape, e_p.shape], f"expected ({model.r},) each")
    return T.concat([e_d, e_p]) @ model.params["predictor.W"] + model.params["predictor.b"]


def predict_next(model: Model, e_d: Tensor, e_p: Tensor) -> Tensor:
    """Independent per-code probabilities of the next visit's diagnoses."""
    return T.sigmoid(predict_logits(model, e_d, e_p))


def prediction_loss(probabilities: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over the M codes with clamped probabilities."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != probabilities.shape:
        raise ShapeError("prediction_loss", [probabilities.shape, target.shape])
    if not np.all(np.isin(target, (0.0, 1.0))):
        raise InvalidArgumentError("target must be a {0,1} multi-hot vector")
    p = T.clip(probabilities, PROB_FLOOR, 1.0 - PROB_FLOOR)
    y = Tensor(target)
    log_likelihood = y * T.log(p) + (1.0 - y) * T.log(1.0 - p)
    return -T.mean(log_likelihood)
