"""
CHE Toolkit - Run Configuration
=================================
Command-scoped configuration with dotted keys.

Resolution order: ``config.settings`` defaults, then an optional flat
``key = value`` file, then ``--set`` flag overrides. Every hyperparameter
of the generator, trainer, HSIC and PW blocks is addressable as
``<section>.<field>`` (``train.epsilon``, ``generator.rho_train``, ...).
Each run writes the resolved configuration as ``config.resolved``; feeding
that file back through ``--config`` reproduces the run.
"""

import logging
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

from dotenv import dotenv_values
from pydantic import BaseModel, Field, ValidationError, field_validator

from config.settings import CheSettings, settings as default_settings
from src.errors import ConfigError
from src.models import (
    GeneratorConfig,
    HsicConfig,
    Method,
    ModelKind,
    PwConfig,
    SplitProtocol,
    TrainConfig,
)

logger = logging.getLogger(__name__)

RESOLVED_NAME = "config.resolved"

# Hyperparameter grids offered to sweeps.
GRID_DEFAULTS: Dict[str, List[Any]] = {
    "train.model_lr": [1e-2, 3e-3, 1e-3],
    "train.batch_size": [16, 32, 64, 128, 256],
    "train.hidden": [16, 32, 64],
    "train.dropout": [0.1, 0.5],
    "train.epsilon": [0.1, 0.3, 1.0, 3.0, 10.0],
}


def _split_ints(value: Any) -> Any:
    if isinstance(value, str):
        return [int(v) for v in value.replace(" ", "").split(",") if v]
    return value


class RunOptions(BaseModel):
    """Pipeline choices that are not model hyperparameters."""
    method: Method = Method.CHE
    model_kind: ModelKind = ModelKind.LSTM
    protocol: SplitProtocol = SplitProtocol.ENV
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    ks: List[int] = Field(default_factory=lambda: [10, 20])
    jobs: int = Field(1, ge=1)
    attribution_points: int = Field(200, ge=1)

    @field_validator("seeds", "ks", mode="before")
    @classmethod
    def _comma_separated(cls, value: Any) -> Any:
        return _split_ints(value)

    @field_validator("ks")
    @classmethod
    def _positive_ks(cls, ks: List[int]) -> List[int]:
        if not ks or min(ks) < 1:
            raise ValueError("ks must be positive integers")
        return ks


class RunConfig(BaseModel):
    """Every configurable block of a run."""
    generator: GeneratorConfig = Field(default_factory=GeneratorConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    hsic: HsicConfig = Field(default_factory=HsicConfig)
    pw: PwConfig = Field(default_factory=PwConfig)
    run: RunOptions = Field(default_factory=RunOptions)

    # -- construction ----------------------------------------------------

    @classmethod
    def from_settings(cls, source: Optional[CheSettings] = None) -> "RunConfig":
        s = source or default_settings
        return cls(
            generator=GeneratorConfig(
                patients=s.GEN_PATIENTS, M=s.GEN_M, N=s.GEN_N, S=s.GEN_STATES,
                mean_visits=s.GEN_MEAN_VISITS, mean_codes=s.GEN_MEAN_CODES,
                rho_train=s.GEN_RHO_TRAIN, rho_test=s.GEN_RHO_TEST,
                env_train=s.GEN_ENV_TRAIN, env_test=s.GEN_ENV_TEST,
            ),
            train=TrainConfig(
                epsilon=s.TRAIN_EPSILON, model_lr=s.TRAIN_MODEL_LR,
                weight_lr=s.TRAIN_WEIGHT_LR, weight_steps=s.TRAIN_WEIGHT_STEPS,
                batch_size=s.TRAIN_BATCH_SIZE, max_epochs=s.TRAIN_MAX_EPOCHS, patience=s.TRAIN_PATIENCE,
                hidden=s.TRAIN_HIDDEN, dropout=s.TRAIN_DROPOUT,
                weight_min=s.WEIGHT_MIN, weight_max=s.WEIGHT_MAX,
            ),
            hsic=HsicConfig(sigma_policy=s.HSIC_SIGMA_POLICY, sigma=s.HSIC_SIGMA),
            pw=PwConfig(
                negative_multiplier=s.PW_NEGATIVE_MULTIPLIER, max_epochs=s.PW_MAX_EPOCHS,
                patience=s.PW_PATIENCE, holdout_fraction=s.PW_HOLDOUT_FRACTION,
            ),
            run=RunOptions(seeds=s.SWEEP_SEEDS, ks=s.EVAL_KS, jobs=s.SWEEP_JOBS),
        )

    # -- dotted keys -----------------------------------------------------

    def flatten(self) -> Dict[str, Any]:
        """``section.field`` -> value for every field."""
        flat: Dict[str, Any] = {}
        for section in type(self).model_fields:
            block = getattr(self, section)
            for name in type(block).model_fields:
                flat[f"{section}.{name}"] = getattr(block, name)
        return flat

    @classmethod
    def known_keys(cls) -> List[str]:
        return sorted(cls().flatten())

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        """Copy with dotted-key overrides applied; every bad key is reported at once."""
        known = set(self.flatten())
        unknown = sorted(k for k in overrides if k not in known)
        if unknown:
            raise ConfigError("unknown configuration keys", unknown)

        nested: Dict[str, Dict[str, Any]] = {
            section: getattr(self, section).model_dump() for section in type(self).model_fields
        }
        for key, value in overrides.items():
            section, name = key.split(".", 1)
            if isinstance(value, str) and value.strip() == "":
                value = None
            nested[section][name] = value
        try:
            return type(self).model_validate(nested)
        except ValidationError as exc:
            keys = [".".join(str(part) for part in err["loc"][:2]) for err in exc.errors()]
            details = "; ".join(
                f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in exc.errors()
            )
            raise ConfigError(f"invalid configuration ({details})", keys) from exc

    # -- snapshots -------------------------------------------------------

    def resolved_text(self) -> str:
        return "".join(f"{key} = {format_value(value)}\n" for key, value in sorted(self.flatten().items()))

    def write_resolved(self, directory: Union[str, Path]) -> Path:
        path = Path(directory) / RESOLVED_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.resolved_text(), encoding="utf-8")
        return path


def format_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(format_value(v) for v in value)
    return str(value)


def read_config_file(path: Union[str, Path]) -> Dict[str, Optional[str]]:
    """Parse a flat ``key = value`` file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return dict(dotenv_values(path, encoding="utf-8"))


def parse_assignments(assignments: Optional[List[str]]) -> Dict[str, str]:
    """``["train.epsilon=0.1", ...]`` -> mapping; malformed entries are rejected together."""
    parsed: Dict[str, str] = {}
    bad: List[str] = []
    for item in assignments or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            bad.append(item)
            continue
        parsed[key.strip()] = value.strip()
    if bad:
        raise ConfigError("expected key=value", bad)
    return parsed


def parse_grid(assignments: Optional[List[str]]) -> Dict[str, List[str]]:
    """``["train.epsilon=0.1,0.3"]`` -> {"train.epsilon": ["0.1", "0.3"]}.

    A bare key with no ``=`` expands to its ``GRID_DEFAULTS`` axis.
    """
    items = []
    for item in assignments or []:
        key = item.strip()
        if "=" not in key and key in GRID_DEFAULTS:
            item = f"{key}=" + ",".join(format_value(v) for v in GRID_DEFAULTS[key])
        items.append(item)
    grid = {key: [v for v in value.split(",") if v] for key, value in parse_assignments(items).items()}
    empty = sorted(k for k, values in grid.items() if not values)
    if empty:
        raise ConfigError("grid axes need at least one value", empty)
    return grid


def resolve(
    config_file: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    source: Optional[CheSettings] = None,
) -> RunConfig:
    """settings -> config file -> flag overrides."""
    config = RunConfig.from_settings(source)
    if config_file is not None:
        config = config.with_overrides(read_config_file(config_file))
    if overrides:
        config = config.with_overrides(overrides)
    return config


def grid_points(grid: Mapping[str, List[Any]]) -> List[Tuple[Tuple[str, Any], ...]]:
    """Cartesian product of grid axes, in key order."""
    points: List[Tuple[Tuple[str, Any], ...]] = [()]
    for key in sorted(grid):
        points = [p + ((key, value),) for p in points for value in grid[key]]
    return points
