"""
CHE Toolkit - Model Checkpoints
=================================
Canonical JSON checkpoints:

    {"dims": {"M": .., "N": .., "r": ..}, "format_version": 1,
     "model_kind": "lstm", "params": {name: {"data": [...], "shape": [...]}},
     "seed": 0}

Keys are sorted and floats are written with 17 significant digits, so
save -> load -> save reproduces the file byte for byte.
"""

import json
import logging
import math
from pathlib import Path
from typing import Any, Union

import numpy as np

from src.encoders import Model
from src.errors import DataFormatError, NumericOverflowError, VocabMismatchError
from src.models import ModelKind

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


def _format_float(value: float) -> str:
    if not math.isfinite(value):
        raise NumericOverflowError("checkpoint", f"cannot serialize {value}")
    text = format(value, ".17g")
    if not any(ch in text for ch in ".eE"):
        text += ".0"
    return text


def canonical_json(obj: Any) -> str:
    """Compact JSON with sorted keys and fixed 17-significant-digit floats."""
    if isinstance(obj, dict):
        items = ",".join(
            f"{json.dumps(str(k))}:{canonical_json(v)}" for k, v in sorted(obj.items())
        )
        return "{" + items + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(canonical_json(v) for v in obj) + "]"
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _format_float(float(obj))
    return json.dumps(obj)


def checkpoint_document(model: Model) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "model_kind": model.kind.value,
        "dims": {"M": model.M, "N": model.N, "r": model.r},
        "seed": model.seed,
        "params": {
            name: {"shape": list(p.shape), "data": [float(v) for v in p.data.reshape(-1)]}
            for name, p in model.params.items()
        },
    }


def dumps_checkpoint(model: Model) -> str:
    return canonical_json(checkpoint_document(model)) + "\n"


def save_checkpoint(model: Model, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_checkpoint(model), encoding="utf-8")
    logger.info("Saved %s checkpoint to %s", model.kind.value, path)
    return path


def load_checkpoint(path: Union[str, Path]) -> Model:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(str(path), exc.lineno, f"invalid JSON: {exc.msg}") from exc
    try:
        if doc["format_version"] != FORMAT_VERSION:
            raise DataFormatError(str(path), None, f"unsupported format_version {doc['format_version']}")
        dims = doc["dims"]
        model = Model(ModelKind(doc["model_kind"]), dims["M"], dims["N"], dims["r"], doc["seed"])
        state = {
            name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
            for name, entry in doc["params"].items()
        }
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, DataFormatError):
            raise
        raise DataFormatError(str(path), None, f"malformed checkpoint: {exc}") from exc
    model.load_state_dict(state)
    return model


def check_vocab(model: Model, M: int, N: int) -> None:
    """Raise VocabMismatchError unless the model was built for an (M, N) vocabulary."""
    if (model.M, model.N) != (M, N):
        raise VocabMismatchError(model.M, model.N, M, N)
