"""Experiment configuration: a JSON document with fixed sections.

Every section is optional; missing keys take the defaults of the chosen
system. Unknown keys anywhere raise :class:`ConfigError` so typos fail loudly.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Optional

import numpy as np

from ..filter import AlphaFn, MODES
from ..systems import (Policy, SEGWAY_DEFAULTS, SystemModel, lqr_gain, make_double_integrator,
                       make_policy, make_segway)
from ..value import ValueConfig
from .experiments import METHODS, FilterSpec, SweepSpec


class ConfigError(ValueError):
    pass


DI_DEFAULTS: dict[str, Any] = {
    "system": {"name": "double_integrator", "mass_range": [0.8, 1.2], "position_bound": 1.0,
               "control_bound": 1.0, "two_sided": True},
    "policy": {
        "rollout": {"kind": "saturating_linear", "gains": [[0.0, 2.0]]},
        "nominal": {"kind": "constant", "value": [0.0]},
    },
    "value": {"T": 6.4, "dt": 0.1, "N": 100, "vertex_weight": 0.5},
    "filter": {"method": "rpcbf", "alpha": 1.0, "mode": "nominal_d", "hocbf_alphas": [1.0, 1.0],
               "dt_control": 0.1},
    "experiment": {"grid": [[-1.5, 1.5, 20], [-1.5, 1.5, 20]], "Tbar": 15.0, "Nbar": 25,
                   "only_inside": False, "x0": [0.0, 0.0], "duration": 15.0, "plant_samples": 1,
                   "dt_list": [0.05, 0.1, 0.2], "num_v0": 301},
    "seed": 0,
}

SEGWAY_CONFIG_DEFAULTS: dict[str, Any] = {
    "system": {"name": "segway", "params": {}},
    "policy": {
        "rollout": {"kind": "lqr", "Q": [0.01, 1.0, 1.0, 1.0], "R": [1.0]},
        "nominal": {"kind": "constant", "value": "max"},
    },
    "value": {"T": 20.0, "dt": 0.1, "N": 1, "vertex_weight": 0.5},
    # a gentle alpha: with a 0.1 s hold the filter loses authority where V and h
    # reach zero together, so V is only allowed to creep up slowly
    "filter": {"method": "pcbf", "alpha": 0.1, "mode": "nominal_d", "hocbf_alphas": [1.0, 1.0],
               "dt_control": 0.1},
    "experiment": {"grid": [[-2.5, 2.5, 50], [-0.35 * np.pi, 0.35 * np.pi, 50], 0.0, 0.0],
                   "Tbar": 30.0, "Nbar": 1, "only_inside": False, "x0": [0.8, -0.07, 0.0, 0.0],
                   "duration": 30.0, "plant_samples": 1, "dt_list": [0.05, 0.1, 0.2],
                   "num_v0": 301},
    "seed": 0,
}

_POLICY_KEYS = {"kind", "gains", "value", "Q", "R"}


def defaults_for(system_name: str) -> dict:
    if system_name == "double_integrator":
        return copy.deepcopy(DI_DEFAULTS)
    if system_name == "segway":
        return copy.deepcopy(SEGWAY_CONFIG_DEFAULTS)
    raise ConfigError(f"unknown system {system_name!r}")


def _merge(base: dict, override: Mapping, where: str) -> dict:
    out = dict(base)
    for key, val in override.items():
        if key not in base:
            raise ConfigError(f"unknown key {where}{key!r}")
        if isinstance(base[key], dict) and key != "params":
            if not isinstance(val, Mapping):
                raise ConfigError(f"{where}{key!r} must be an object")
            out[key] = _merge(base[key], val, f"{where}{key}.")
        else:
            out[key] = val
    return out


def resolve(raw: Optional[Mapping] = None) -> dict:
    """Fill ``raw`` with the defaults of its system and validate the keys."""
    raw = dict(raw or {})
    name = raw.get("system", {}).get("name", "double_integrator")
    base = defaults_for(name)
    if name == "segway":
        params = raw.get("system", {}).get("params", {})
        unknown = set(params) - set(SEGWAY_DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown segway parameters {sorted(unknown)}")
    for role in ("rollout", "nominal"):
        pol = raw.get("policy", {}).get(role, {})
        unknown = set(pol) - _POLICY_KEYS
        if unknown:
            raise ConfigError(f"unknown key policy.{role}.{sorted(unknown)[0]!r}")
        if "kind" in pol and pol["kind"] != base["policy"][role]["kind"]:
            # a different kind replaces the default entry rather than merging into it
            base["policy"][role] = {k: None for k in _POLICY_KEYS}
    cfg = _merge(base, raw, "")
    for role in ("rollout", "nominal"):
        cfg["policy"][role] = {k: v for k, v in cfg["policy"][role].items() if v is not None}
    if cfg["filter"]["method"] not in METHODS:
        raise ConfigError(f"unknown filter method {cfg['filter']['method']!r}")
    if cfg["filter"]["mode"] not in MODES:
        raise ConfigError(f"unknown filter mode {cfg['filter']['mode']!r}")
    return cfg


def load(path) -> dict:
    with open(Path(path)) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: {err}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return resolve(raw)


@dataclass(frozen=True)
class Setup:
    """Objects built from a resolved config."""

    config: dict
    system: SystemModel
    rollout_policy: Policy
    nominal_policy: Policy
    value_config: ValueConfig
    filter_spec: FilterSpec
    dt_control: float

    def sweep_spec(self, method: Optional[str] = None) -> SweepSpec:
        ex = self.config["experiment"]
        return SweepSpec(ex["grid"], float(ex["Tbar"]), int(ex["Nbar"]),
                         method or self.filter_spec.method)


def build_system(sec: Mapping) -> SystemModel:
    if sec["name"] == "double_integrator":
        return make_double_integrator(tuple(sec["mass_range"]), float(sec["position_bound"]),
                                      float(sec["control_bound"]), bool(sec["two_sided"]))
    return make_segway(sec.get("params", {}))


def build_policy(system: SystemModel, sec: Mapping) -> Policy:
    kind = sec["kind"]
    if kind == "lqr":
        Q = np.diag(np.asarray(sec["Q"], dtype=float))
        R = np.diag(np.asarray(sec["R"], dtype=float))
        return make_policy(system, "saturating_linear", gains=lqr_gain(system, Q, R))
    value = sec.get("value")
    if isinstance(value, str):
        lo, hi = system.control_box
        if value not in ("max", "min"):
            raise ConfigError(f"policy value {value!r} must be numeric, 'max' or 'min'")
        value = hi if value == "max" else lo
    return make_policy(system, kind, gains=sec.get("gains"), value=value)


def build(cfg: Mapping, seed=None) -> Setup:
    """Construct the system, policies, value config and filter spec."""
    cfg = copy.deepcopy(dict(cfg))
    if seed is not None:
        cfg["seed"] = seed
    try:
        system = build_system(cfg["system"])
        rollout_policy = build_policy(system, cfg["policy"]["rollout"])
        nominal = build_policy(system, cfg["policy"]["nominal"])
        v = cfg["value"]
        vcfg = ValueConfig(float(v["T"]), float(v["dt"]), int(v["N"]), rollout_policy,
                           float(v["vertex_weight"]), cfg["seed"])
        f = cfg["filter"]
        fspec = FilterSpec(f["method"], vcfg, AlphaFn(float(f["alpha"])), f["mode"],
                           tuple(float(a) for a in f["hocbf_alphas"]))
    except (KeyError, TypeError) as err:
        raise ConfigError(f"invalid config: {err}") from None
    return Setup(cfg, system, rollout_policy, nominal, vcfg, fspec, float(f["dt_control"]))
