"""
Exception hierarchy for the CHE toolkit.

Every error raised on purpose by the package derives from ``CheError`` and
from the matching builtin (``ValueError``, ``ArithmeticError`` or
``RuntimeError``) so callers can catch either.
"""

from typing import Iterable, Optional, Sequence, Tuple


class CheError(Exception):
    """Base class for all toolkit errors."""


class InvalidArgumentError(CheError, ValueError):
    """A scalar argument is outside its domain (e.g. sigma <= 0, k < 1)."""


class ShapeError(CheError, ValueError):
    """Operand shapes are incompatible for an operation."""

    def __init__(self, op_kind: str, shapes: Sequence[Tuple[int, ...]], detail: str = ""):
        self.op_kind = op_kind
        self.shapes = [tuple(s) for s in shapes]
        msg = f"{op_kind}: incompatible shapes {self.shapes}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NumericOverflowError(CheError, ArithmeticError):
    """An operation produced NaN or Inf."""

    def __init__(self, op_kind: str, detail: str = ""):
        self.op_kind = op_kind
        msg = f"{op_kind}: non-finite output"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class InvalidRecordError(CheError, ValueError):
    """A patient record or visit violates its invariants."""


class ConfigError(CheError, ValueError):
    """Configuration keys are unknown or carry invalid values."""

    def __init__(self, message: str, keys: Optional[Iterable[str]] = None):
        self.keys = sorted(set(keys or []))
        if self.keys:
            message = f"{message}: {', '.join(self.keys)}"
        super().__init__(message)


class DataFormatError(CheError, ValueError):
    """A dataset or checkpoint file cannot be parsed."""

    def __init__(self, path: str, line: Optional[int], detail: str):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {detail}")


class VocabMismatchError(CheError, ValueError):
    """Checkpoint vocabulary differs from the dataset vocabulary."""

    def __init__(self, expected_m: int, expected_n: int, found_m: int, found_n: int):
        self.expected = (expected_m, expected_n)
        self.found = (found_m, found_n)
        super().__init__(
            f"vocabulary mismatch: checkpoint has M={expected_m}, N={expected_n} "
            f"but dataset has M={found_m}, N={found_n}"
        )


class TrainingAbortedError(CheError, RuntimeError):
    """A training epoch hit a non-finite loss."""

    def __init__(self, sample_id: str, logits_range: Tuple[float, float], detail: str = ""):
        self.sample_id = sample_id
        self.logits_range = logits_range
        msg = (
            f"non-finite loss at sample {sample_id} "
            f"(logits range [{logits_range[0]:.4g}, {logits_range[1]:.4g}])"
        )
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
