"""Run configuration: TOML in, validated settings out.

Every table rejects unknown keys. The canonical form of a configuration is
its JSON dump with sorted keys and unset optional entries dropped; its
SHA-256 is the configuration hash recorded with every run.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import List, Literal, Optional, Union

import tomli
import tomli_w
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError


class _Table(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class TwoStateIncomeConfig(_Table):
    kind: Literal["two_state"] = "two_state"
    y_lo: float = Field(0.5, gt=0)
    y_hi: float = Field(1.5, gt=0)
    rate_up: float = Field(0.25, gt=0)
    rate_down: float = Field(0.25, gt=0)


class OUIncomeConfig(_Table):
    kind: Literal["ou_diffusion"]
    kappa: float = Field(0.5, gt=0)
    mean: float = Field(1.0, gt=0)
    nu: float = Field(0.02, ge=0)
    n_y: int = Field(7, ge=2)
    width: float = Field(3.0, gt=0)


class ModelConfig(_Table):
    rho: float = Field(0.05, ge=0)
    crra: float = Field(2.0, gt=0)
    nu: float = Field(0.0, ge=0)
    beta: float = Field(5e-4, ge=0)
    horizon: float = Field(50.0, gt=0)
    dt: float = Field(0.5, gt=0)
    production_scale: float = Field(0.15, gt=0)
    income: Union[TwoStateIncomeConfig, OUIncomeConfig] = Field(default_factory=TwoStateIncomeConfig, discriminator="kind")


class GridConfig(_Table):
    a_max: float = Field(50.0, gt=0)
    n_a: int = Field(200, ge=3)


class StationaryConfig(_Table):
    tol: float = Field(1e-9, gt=0)


class TransitionConfig(_Table):
    n_steps: Optional[int] = Field(None, ge=1)
    tol: float = Field(1e-10, gt=0)
    shift_nodes: int = Field(10, ge=0)


class TemporaryConfig(_Table):
    predictor: Literal["perfect_foresight", "constant_current", "adaptive_level", "parametric_plm"] = "adaptive_level"
    rule: Literal["decreasing_gain", "constant_gain", "recursive_least_squares", "none"] = "constant_gain"
    gain: float = Field(0.2, gt=0, le=1)
    t0: float = Field(1.0, gt=0)
    n_steps: Optional[int] = Field(None, ge=0)
    belief_scale: List[float] = [1.1, 0.95]
    inner_stride: int = Field(1, ge=1)
    recovery_threshold: float = Field(1e-6, gt=0)
    shift_nodes: int = Field(10, ge=0)


class CommonNoiseConfig(_Table):
    n_steps: int = Field(500, ge=0)
    dt: float = Field(0.1, gt=0)
    z_nodes: int = Field(11, ge=3)
    p_nodes: int = Field(21, ge=4)
    price_spread: float = Field(0.5, gt=0, lt=1)
    kappa: float = Field(0.5, ge=0)
    sigma: float = Field(0.0, ge=0)
    rule: Literal["decreasing_gain", "constant_gain", "recursive_least_squares", "none"] = "constant_gain"
    gain: float = Field(0.5, gt=0, le=1)
    belief_scale: float = Field(1.05, gt=0)
    cache_threshold: float = Field(0.01, ge=0)
    density_every: int = Field(50, ge=1)


class DiscreteConfig(_Table):
    """Either a named toy economy or explicit arrays (which override it)."""

    variant: Literal["controlled", "linear", "mrp", "mrp_linear"] = "controlled"
    n_z: Literal[1, 2] = 2
    horizon: int = Field(3, ge=0)
    discount: float = Field(0.9, gt=0, le=1)
    z_kernel: Optional[List[List[float]]] = None
    x_kernel: Optional[List[List[List[List[float]]]]] = None
    reward_coef: Optional[List[List[List[List[float]]]]] = None
    terminal_coef: Optional[List[List[List[float]]]] = None
    price_intercept: Optional[List[float]] = None
    price_weights: Optional[List[List[float]]] = None
    z_values: Optional[List[float]] = None
    m0: List[float] = [0.6, 0.4]
    z0: int = Field(0, ge=0)
    resolution: int = Field(101, ge=11)
    kernel: Literal["degenerate", "level", "var"] = "level"
    price_nodes: int = Field(25, ge=2)
    price_range: List[float] = [0.2, 1.4]
    sigma: float = Field(0.05, ge=0)
    rule: Literal["decreasing_gain", "constant_gain", "recursive_least_squares", "none"] = "recursive_least_squares"
    gain: float = Field(0.1, gt=0, le=1)
    t0: float = Field(1.0, gt=0)
    belief0: List[float] = [0.5]
    n_steps: int = Field(50, ge=0)
    planning_horizon: Optional[int] = Field(None, ge=0)
    montecarlo_paths: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _ranges(self):
        if len(self.price_range) != 2 or self.price_range[0] >= self.price_range[1]:
            raise ValueError("price_range must be [low, high] with low < high")
        return self


class RunConfig(_Table):
    seed: int = Field(0, ge=0)
    threads: int = Field(1, ge=1)


class Config(_Table):
    model: ModelConfig = Field(default_factory=ModelConfig)
    grid: GridConfig = Field(default_factory=GridConfig)
    stationary: StationaryConfig = Field(default_factory=StationaryConfig)
    transition: TransitionConfig = Field(default_factory=TransitionConfig)
    temporary: TemporaryConfig = Field(default_factory=TemporaryConfig)
    common_noise: CommonNoiseConfig = Field(default_factory=CommonNoiseConfig)
    discrete: DiscreteConfig = Field(default_factory=DiscreteConfig)
    run: RunConfig = Field(default_factory=RunConfig)

    def normalized(self) -> dict:
        return self.model_dump(mode="json", exclude_none=True)

    def canonical_json(self) -> str:
        return json.dumps(self.normalized(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def to_toml(self) -> str:
        return tomli_w.dumps(self.normalized())

    def with_overrides(self, **dotted) -> "Config":
        """Copy with ``section.key`` entries replaced (``None`` values are skipped)."""
        data = self.normalized()
        for key, value in dotted.items():
            if value is None:
                continue
            section, name = key.split(".", 1)
            data.setdefault(section, {})[name] = value
        return config_from_dict(data)


def _key_of(err) -> str:
    # drop discriminator tags pydantic inserts for tagged unions
    loc = [str(p) for p in err["loc"] if p not in ("two_state", "ou_diffusion")]
    return ".".join(loc)


def config_from_dict(data: dict) -> Config:
    try:
        return Config.model_validate(data)
    except ValidationError as exc:
        first = exc.errors()[0]
        raise ConfigError(first["msg"], key=_key_of(first)) from None


def parse_config(path) -> Config:
    """Read and validate a TOML configuration file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"configuration file {str(path)!r} not found", key="config")
    try:
        data = tomli.loads(path.read_text(encoding="utf-8"))
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}", key="config") from None
    return config_from_dict(data)
