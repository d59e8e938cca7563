"""Run configuration, validated with pydantic.

Every subcommand reads one JSON file. Validation failures are reported as
``field.path: message`` lines before any computation starts.
"""

from __future__ import annotations

import json
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class PdeSettings(_Strict):
    n_x: int = Field(701, ge=4)
    dt: float = Field(1e-3, gt=0)
    x_min: float = Field(-3.5, lt=0)


class ExperimentConfig(_Strict):
    id: str = "experiment"
    # problem
    sigma: float = Field(1.0, gt=0)
    epsilon: float = Field(0.01, gt=0, lt=1)
    T: float = Field(1.0, gt=0)
    x0: float = Field(-1.0, lt=0)
    # solver
    K: int = Field(5, ge=1)
    M: int = Field(300, ge=2)
    dt: float = Field(1e-3, gt=0)
    delta: float = Field(0.1, gt=0)
    z_scheme: Literal["gradient-ansatz", "martingale-increment"] = "gradient-ansatz"
    stopping_mode: Literal["freeze-all", "per-trajectory"] = "freeze-all"
    rank_tolerance: float = Field(1e-6, gt=0)
    ridge: float = Field(0.0, ge=0)
    constant_basis: bool = True
    freeze_centres: bool = False
    truncate: bool = True
    seed: int = Field(0, ge=0)
    repetitions: int = Field(20, ge=1)
    # importance sampling
    importance_sampling: bool = True
    is_paths: Optional[int] = Field(None, ge=2)
    clip: float = Field(1e3, gt=0)
    # constant push c in b0(x) = b(x) + c, used with the drift-changed driver
    drift_tilt: Optional[float] = None
    # PDE reference
    reference: bool = True
    pde: PdeSettings = PdeSettings()

    @model_validator(mode="after")
    def _grid(self):
        if self.dt > self.T:
            raise ValueError(f"dt={self.dt} exceeds the horizon T={self.T}")
        return self


class Table1Config(_Strict):
    rows: List[ExperimentConfig] = Field(min_length=1)


def _format(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{path}: {err['msg']}")
    return "; ".join(lines)


def parse_config(data: dict, model=ExperimentConfig):
    try:
        return model.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format(exc)) from None


def load_config(path, model=ExperimentConfig):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return parse_config(data, model)


def with_overrides(config, **changes):
    """Copy of a config with fields replaced, re-validated."""
    data = config.model_dump()
    data.update({k: v for k, v in changes.items() if v is not None})
    return parse_config(data, type(config))
