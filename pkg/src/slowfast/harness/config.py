"""JSON experiment configuration: parsing, strict key checking, hashing."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from ..errors import ConfigError, InputError
from ..model import BUILTIN_MODELS, CoefficientSet, model_from_config
from ..monotone_ops import MonotoneOperator, operator_from_dict
from ..sde_engine import SimConfig

SECTIONS = ("model", "operators", "sim", "experiment")
KINDS = ("avg_theta_pos", "avg_theta_zero", "ldp", "mixing", "picard")


def config_hash(cfg: dict) -> str:
    """sha256 of the canonical JSON form (sorted keys, no whitespace)."""
    text = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def _check_keys(section: dict, allowed, where: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(f"section {where!r} must be an object")
    extra = sorted(set(section) - set(allowed))
    if extra:
        raise ConfigError(f"unknown keys in {where}: {extra}")


@dataclass
class EpsilonRule:
    """``epsilon = coef * delta^power`` (or a constant when ``power == 0``)."""

    power: float = 0.5
    coef: float = 1.0

    def __call__(self, delta: float) -> float:
        return self.coef * delta ** self.power


@dataclass
class ExperimentGrid:
    kind: str = "avg_theta_pos"
    deltas: list = field(default_factory=lambda: [1e-1, 1e-2, 1e-3, 1e-4])
    epsilon_rule: EpsilonRule = field(default_factory=EpsilonRule)
    gammas: list = field(default_factory=lambda: [0.5])
    n_particles: int = 256
    dt: float = 1e-2
    dt_rule: str = "min_delta"
    seeds_per_cell: int = 1
    repetitions: int = 32
    max_workers: int = 1
    targets: list = field(default_factory=list)
    eta: Optional[float] = None
    epsilons: list = field(default_factory=list)
    delta_power: float = 1.5
    n_mc: int = 1000

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        if self.dt_rule not in ("fixed", "min_delta"):
            raise ConfigError("dt_rule must be 'fixed' or 'min_delta'")
        if isinstance(self.epsilon_rule, dict):
            _check_keys(self.epsilon_rule, ("power", "coef"), "experiment.epsilon_rule")
            self.epsilon_rule = EpsilonRule(**self.epsilon_rule)
        if any(d <= 0 for d in self.deltas):
            raise ConfigError("deltas must be positive")
        if self.kind == "avg_theta_pos" and self.epsilon_rule.power > 1:
            # delta/epsilon = delta^(1-p)/coef must stay bounded as delta -> 0.
            raise ConfigError("avg_theta_pos needs delta/epsilon bounded: epsilon power <= 1")
        if self.kind == "ldp" and self.delta_power <= 1:
            raise ConfigError("ldp needs delta/epsilon -> 0: delta_power > 1")
        if self.max_workers < 1:
            raise ConfigError("max_workers must be >= 1")

    def cell_dt(self, delta: float) -> float:
        return min(self.dt, delta) if self.dt_rule == "min_delta" else self.dt

    def cells(self):
        out = []
        for d in self.deltas:
            for g in self.gammas:
                for s in range(self.seeds_per_cell):
                    out.append({"delta": float(d), "epsilon": float(self.epsilon_rule(d)),
                                "gamma": float(g), "seed_index": s})
        return out


SIM_KEYS = ("T", "dt", "epsilon", "delta", "theta", "gamma", "n_particles", "x0", "y0",
            "fast_substeps", "seed", "repetitions")
MODEL_KEYS = ("name", "params")
OPERATOR_KEYS = ("A1", "A2")


@dataclass
class RunConfig:
    raw: dict
    model_name: str
    model_params: dict
    A1_spec: dict
    A2_spec: dict
    sim: dict
    grid: ExperimentGrid

    @property
    def hash(self) -> str:
        return config_hash(self.raw)

    def build_model(self) -> CoefficientSet:
        return model_from_config(self.model_name, self.model_params)

    def build_operators(self, coeffs: CoefficientSet) -> tuple[MonotoneOperator, MonotoneOperator]:
        A1 = operator_from_dict(self.A1_spec, coeffs.n)
        A2 = operator_from_dict(self.A2_spec, coeffs.m)
        return A1, A2

    def sim_config(self, **overrides) -> SimConfig:
        kw = dict(self.sim)
        kw.update(overrides)
        try:
            return SimConfig(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def parse_config(raw: dict, seed: Optional[int] = None) -> RunConfig:
    """Validate a config document; ``seed`` (CLI flag) overrides ``sim.seed``."""
    raw = copy.deepcopy(raw)
    _check_keys(raw, SECTIONS, "config")
    model = raw.get("model", {"name": "linear_test"})
    _check_keys(model, MODEL_KEYS, "model")
    name = model.get("name", "linear_test")
    if name not in BUILTIN_MODELS:
        raise ConfigError(f"unknown model {name!r}; built-ins are {BUILTIN_MODELS}")
    ops = raw.get("operators", {})
    _check_keys(ops, OPERATOR_KEYS, "operators")
    sim = raw.get("sim", {})
    _check_keys(sim, SIM_KEYS, "sim")
    if seed is not None:
        sim["seed"] = int(seed)
        raw.setdefault("sim", {})["seed"] = int(seed)
    exp = raw.get("experiment", {})
    _check_keys(exp, [f.name for f in fields(ExperimentGrid)], "experiment")
    try:
        grid = ExperimentGrid(**copy.deepcopy(exp))
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    rc = RunConfig(raw, name, dict(model.get("params", {})), ops.get("A1", {"kind": "zero"}),
                   ops.get("A2", {"kind": "zero"}), sim, grid)
    try:
        coeffs = rc.build_model()
        rc.build_operators(coeffs)
    except InputError as exc:
        raise ConfigError(str(exc)) from exc
    return rc


def load_config(path, seed: Optional[int] = None) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(raw, seed)
