"""Run configuration: YAML file, strict schema, and conversion to model objects.

Unknown keys are rejected at every level. All numeric defaults live in
:data:`DEFAULTS`.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError
from .models import DriverSpec, ModelConfig, ObstacleSpec, TerminalSpec
from .mpp_sim import DEFAULT_LEAF_BUDGET, ClockA, IntensityKernel, MarkSpace

BUDGET_ENV = "MFRBSDE_BUDGET"

DEFAULTS = {
    "tol": 1e-10,
    "max_iter": 200,
    "budget": DEFAULT_LEAF_BUDGET,
    "rule_budget": 200_000,
    "reps": 200,
    "n_list": [16, 32, 64, 128, 256, 512, 1024, 2048, 4096],
    "n": 2,
    "seeds": 100,
    "probes": 200,
    "paths": 10,
    "copies": 8,
}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class MarksSchema(_Strict):
    labels: list[str]
    values: Optional[list[float]] = None


class ClockSchema(_Strict):
    kind: Literal["identity", "piecewise-linear", "monotone"] = "identity"
    horizon: float = Field(gt=0)
    times: Optional[list[float]] = None
    values: Optional[list[float]] = None


class KernelSchema(_Strict):
    weights: list[float]


class DriverSchema(_Strict):
    family: Literal["linear", "lipschitz-saturated", "quadratic-exponential"] = "linear"
    a: float = 0.0
    b: float = 0.0
    c: float = 0.0
    g: list[float] = Field(default_factory=list)
    scale: float = 1.0
    lam: float = 1.0
    measure_form: Literal["mean", "distance"] = "mean"
    C_f: Optional[float] = None
    beta: Optional[float] = None
    alpha_bound: Optional[float] = None
    a_gamma: Optional[list[float]] = None
    u_bound: float = 1.0


class ObstacleSchema(_Strict):
    family: Literal["constant", "linear", "inactive"] = "inactive"
    c0: float = 0.0
    c1: float = 0.0
    c_state: float = 0.0
    k1: float = 0.0
    k2: float = 0.0
    measure_form: Literal["mean", "distance"] = "mean"
    gamma1: Optional[float] = None
    gamma2: Optional[float] = None


class TerminalSchema(_Strict):
    family: Literal["constant", "indicator", "linear", "clipped"] = "constant"
    c: float = 0.0
    slope: float = 0.0
    lo: float = 0.0
    hi: float = 1.0
    threshold: int = 1
    bound: Optional[float] = None


class ModelSchema(_Strict):
    framework: Literal["mpp", "poisson"] = "mpp"
    M: int = Field(default=8, ge=1)
    marks: Optional[MarksSchema] = None
    clock: ClockSchema
    kernel: KernelSchema
    driver: DriverSchema = DriverSchema()
    obstacle: ObstacleSchema = ObstacleSchema()
    terminal: TerminalSchema = TerminalSchema()


class RunSchema(_Strict):
    tol: float = Field(default=DEFAULTS["tol"], gt=0)
    max_iter: int = Field(default=DEFAULTS["max_iter"], ge=1)
    budget: Optional[int] = Field(default=None, ge=1)
    rule_budget: int = Field(default=DEFAULTS["rule_budget"], ge=1)
    recombine: bool = True
    reps: int = Field(default=DEFAULTS["reps"], ge=2)
    n_list: list[int] = Field(default_factory=lambda: list(DEFAULTS["n_list"]))
    n: int = Field(default=DEFAULTS["n"], ge=1)
    seeds: int = Field(default=DEFAULTS["seeds"], ge=1)
    probes: int = Field(default=DEFAULTS["probes"], ge=1)
    paths: int = Field(default=DEFAULTS["paths"], ge=1)
    copies: int = Field(default=DEFAULTS["copies"], ge=1)
    h_step: Optional[float] = Field(default=None, gt=0)


class ConfigSchema(_Strict):
    model: Optional[ModelSchema] = None
    run: RunSchema = RunSchema()
    seed: int = 0

    @model_validator(mode="after")
    def _n_list_increasing(self):
        nl = self.run.n_list
        if any(b <= a for a, b in zip(nl, nl[1:])):
            raise ValueError("run.n_list must be strictly increasing")
        return self


def parse_config(data: dict | None) -> ConfigSchema:
    try:
        return ConfigSchema.model_validate(data or {})
    except ValidationError as exc:
        raise ConfigError(f"configuration schema violation:\n{exc}") from None


def load_config(path: str | os.PathLike | None) -> ConfigSchema:
    if path is None:
        return parse_config({})
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file is not valid YAML: {exc}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError("config file must hold a mapping at the top level")
    return parse_config(data)


def effective_budget(cfg: ConfigSchema) -> int:
    if cfg.run.budget is not None:
        return cfg.run.budget
    env = os.environ.get(BUDGET_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{BUDGET_ENV} must be an integer, got {env!r}") from None
    return DEFAULTS["budget"]


def build_model(schema: ModelSchema) -> ModelConfig:
    m = len(schema.kernel.weights)
    if schema.marks is None:
        marks = MarkSpace.default(m)
    else:
        vals = schema.marks.values if schema.marks.values is not None else [1.0] * len(schema.marks.labels)
        marks = MarkSpace(tuple(schema.marks.labels), vals)
    c = schema.clock
    clock = ClockA(c.kind, c.horizon, c.times, c.values)
    d = schema.driver.model_dump()
    d["g"] = tuple(d["g"])
    if d["a_gamma"] is not None:
        d["a_gamma"] = tuple(d["a_gamma"])
    return ModelConfig(
        marks, clock, IntensityKernel(schema.kernel.weights), DriverSpec(**d),
        ObstacleSpec(**schema.obstacle.model_dump()), TerminalSpec(**schema.terminal.model_dump()),
        schema.framework, schema.M,
    )


def require_model(cfg: ConfigSchema) -> ModelConfig:
    if cfg.model is None:
        raise ConfigError("this subcommand needs a 'model' section in the config")
    return build_model(cfg.model)


def canonical_json(cfg: ConfigSchema) -> str:
    return json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def config_hash(cfg: ConfigSchema) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()
