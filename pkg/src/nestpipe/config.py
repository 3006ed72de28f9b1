"""YAML run configuration for the command-line tool.

Schema (every key optional)::

    pipeline:   {P: 4, M: 16, V: 1, W: 3, llm_cp: 1, enc_cp: 1}
    placement:  {encoder_dp: null, generator_dp: null, has_generator: false}
    strategies: [bigmac, compute_efficient, memory_efficient]
    seed: 0
    fsdp_mode: null            # collective | one_sided
    rendezvous: false
    footprint:  {A_m: 1, A_l: 1}
    cost:
      t_llm_fwd: 1             # number, list of per-microbatch values, or a distribution
      t_llm_bwd: null          # null means twice the forward cost
      t_enc_fwd: 0
      t_enc_bwd: null
      t_gen_fwd: 0
      t_gen_bwd: null
      comm_latency: 0
      bandwidth: null
      t_cp_convert: 0
      t_fsdp_gather: 0
      t_fsdp_pull: null
      sizes: {act: 1, grad: 1, emb: 1, emb_grad: 1, gen_in: 1, gen_grad: 1}
    exec: {d_in: 3, d: 4, samples: 4, workloads: 1}
    output: {dir: nestpipe-out}

A distribution is a mapping such as ``{distribution: bimodal, low: 1,
high: 3, p_high: 0.5}`` or ``{distribution: uniform, low: 1, high: 3}``;
it is sampled once per microbatch from the run seed.
"""
from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from fractions import Fraction

import yaml

from .comm import PayloadSizes
from .memory import ActivationFootprint
from .nesting import ModulePlacement, Strategy
from .schedule import PipelineConfig, ScheduleError
from .simulator import CostModel, bimodal_durations, uniform_durations

ENV_VAR = "NESTPIPE_CONFIG"


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "pipeline": {"P": 4, "M": 16, "V": 1, "W": 3, "llm_cp": 1, "enc_cp": 1},
    "placement": {"encoder_dp": None, "generator_dp": None, "has_generator": False},
    "strategies": [s.value for s in Strategy],
    "seed": 0,
    "fsdp_mode": None,
    "rendezvous": False,
    "footprint": {"A_m": 1, "A_l": 1},
    "cost": {
        "t_llm_fwd": 1, "t_llm_bwd": None,
        "t_enc_fwd": 0, "t_enc_bwd": None,
        "t_gen_fwd": 0, "t_gen_bwd": None,
        "comm_latency": 0, "bandwidth": None, "t_cp_convert": 0,
        "t_fsdp_gather": 0, "t_fsdp_pull": None,
        "sizes": {"act": 1, "grad": 1, "emb": 1, "emb_grad": 1, "gen_in": 1, "gen_grad": 1},
    },
    "exec": {"d_in": 3, "d": 4, "samples": 4, "workloads": 1},
    "output": {"dir": "nestpipe-out"},
}

_PER_MB_COSTS = ("t_llm_fwd", "t_llm_bwd", "t_enc_fwd", "t_enc_bwd", "t_gen_fwd", "t_gen_bwd")


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"'{where}' must be a mapping")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def _number(value, where: str):
    if isinstance(value, bool) or not isinstance(value, (int, float, str)):
        raise ConfigError(f"'{where}' must be a number, got {value!r}")
    if isinstance(value, str):
        try:
            return Fraction(value)
        except ValueError:
            raise ConfigError(f"'{where}' must be a number, got {value!r}") from None
    if value < 0:
        raise ConfigError(f"'{where}' must be non-negative, got {value}")
    return value


def _duration(value, where: str, M: int, seed: int):
    if value is None:
        return None
    if isinstance(value, list):
        if len(value) != M:
            raise ConfigError(f"'{where}' lists {len(value)} values but M={M}")
        return [_number(v, where) for v in value]
    if isinstance(value, dict):
        value = dict(value)
        kind = value.pop("distribution", None)
        try:
            if kind == "bimodal":
                return bimodal_durations(M, seed, **value)
            if kind == "uniform":
                return uniform_durations(M, seed, **value)
        except TypeError as exc:
            raise ConfigError(f"'{where}': {exc}") from None
        raise ConfigError(f"'{where}' has unknown distribution {kind!r}")
    return _number(value, where)


@dataclass
class RunConfig:
    pipeline: PipelineConfig
    placement: ModulePlacement
    strategies: list[Strategy]
    cost: CostModel
    footprint: ActivationFootprint
    seed: int = 0
    rendezvous: bool = False
    exec_dims: dict = field(default_factory=dict)
    output_dir: str = "nestpipe-out"
    raw: dict = field(default_factory=dict)


def parse_config(data: dict | None, seed: int | None = None) -> RunConfig:
    """Validate a config mapping against the schema; unknown keys are rejected."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping at the top level")
    raw = _merge(DEFAULTS, data)
    if seed is not None:
        raw["seed"] = seed
    if not isinstance(raw["seed"], int):
        raise ConfigError("'seed' must be an integer")
    try:
        pipeline = PipelineConfig(**raw["pipeline"])
        placement = ModulePlacement(**raw["placement"])
        strategies = [Strategy.parse(s) for s in raw["strategies"]]
    except (ScheduleError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    c = raw["cost"]
    costs = {
        name: _duration(c[name], f"cost.{name}", pipeline.M, raw["seed"] + i)
        for i, name in enumerate(_PER_MB_COSTS)
    }
    scalars = {}
    for name in ("comm_latency", "t_cp_convert", "t_fsdp_gather"):
        scalars[name] = _number(c[name], f"cost.{name}")
    for name in ("bandwidth", "t_fsdp_pull"):
        scalars[name] = None if c[name] is None else _number(c[name], f"cost.{name}")
    try:
        sizes = PayloadSizes(**{k: _number(v, f"cost.sizes.{k}") for k, v in c["sizes"].items()})
        cost = CostModel(**costs, **scalars, sizes=sizes, fsdp_mode=raw["fsdp_mode"])
        footprint = ActivationFootprint(**raw["footprint"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if costs["t_llm_fwd"] is None:
        raise ConfigError("'cost.t_llm_fwd' is required")
    return RunConfig(
        pipeline, placement, strategies, cost, footprint,
        seed=raw["seed"], rendezvous=bool(raw["rendezvous"]),
        exec_dims=raw["exec"], output_dir=raw["output"]["dir"], raw=raw,
    )


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` overrides; values are parsed as YAML scalars."""
    data = copy.deepcopy(data or {})
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        path, value = item.split("=", 1)
        keys = path.split(".")
        node = data
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override inside non-mapping '{key}'")
        node[keys[-1]] = yaml.safe_load(value)
    return data


def load_config(path: str | None, overrides: list[str] = (), seed: int | None = None) -> RunConfig:
    data: dict = {}
    if path:
        try:
            with open(path) as fh:
                data = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    return parse_config(apply_overrides(data, list(overrides)), seed)


def with_pipeline(run: RunConfig, **changes) -> RunConfig:
    return dataclasses.replace(run, pipeline=dataclasses.replace(run.pipeline, **changes))
