"""Experiment configuration: schema, validation and model builders."""
from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Union

import jsonschema
import numpy as np

from .space import (DiscreteSpace, build_circle, build_flat_torus, build_interval_orbifold,
                    build_warped_torus)


class ConfigError(ValueError):
    """Configuration failed validation; the message names the offending field."""


_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_POS_INT = {"type": "integer", "minimum": 1}
_OPT_POS = {"type": ["number", "null"], "exclusiveMinimum": 0}

_PROFILE = {
    "oneOf": [
        {"type": "null"},
        {"type": "number", "exclusiveMinimum": 0},
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"const": "cosine"},
                "a": _NUM,
                "b": _NUM,
                "k": {"type": "integer"},
            },
        },
    ]
}

_MODEL = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["circle", "warped_torus", "flat_torus", "interval_orbifold"]},
        "n": {"type": "integer", "minimum": 3},
        "n_y": {"type": "integer", "minimum": 3},
        "n_z": {"type": "integer", "minimum": 3},
        "length": _POS,
        "side": _POS,
        "sigma": _POS,
        "density": _PROFILE,
        "offset": _NUM,
        "base_point": {"type": "integer", "minimum": 0},
    },
}

SCHEMA: Dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "heatrecon experiment configuration",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "model": _MODEL,
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "modes": _POS_INT,
                "method": {"enum": ["auto", "dense", "sparse"]},
                "seed": {"type": "integer", "minimum": 0},
            },
        },
        "phd": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "radius": _OPT_POS,
                "delta": _POS,
                "time_delta": _OPT_POS,
                "time_ratio": {"type": "number", "exclusiveMinimum": 1},
                "eps": {"type": "number", "minimum": 0},
                "noise": {"type": "number", "minimum": 0},
                "seed": {"type": ["integer", "null"], "minimum": 0},
            },
        },
        "inverse": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "k_max": {"type": ["integer", "null"], "minimum": 2},
                "consistency_tol": _POS,
                "refine": {"type": "boolean"},
                "dim": {"type": ["integer", "null"], "minimum": 1, "maximum": 3},
                "probe_factor": _POS,
                "step_factor": _POS,
                "s_max": _OPT_POS,
                "n_time": _POS_INT,
                "kind": {"enum": ["fourier", "gauss"]},
                "rank_rtol": _POS,
                "injectivity": {"type": "boolean"},
                "inj_points": {"type": ["array", "null"], "items": {"type": "integer", "minimum": 0}},
                "inj_passes": {"type": ["integer", "null"], "minimum": 1},
                "inj_eps_factor": _POS,
                "inj_resolution": _POS,
            },
        },
        "mgh": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "budget": _POS_INT,
                "exhaustive": {"type": ["boolean", "null"]},
            },
        },
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "sigma": {"type": "array", "minItems": 1, "items": _POS},
                "noise": {"type": "array", "minItems": 1, "items": {"type": "number", "minimum": 0}},
                "seeds": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 0}},
                "profile": _PROFILE,
                "n_y": {"type": "integer", "minimum": 3},
                "n_z": {"type": "integer", "minimum": 3},
                "delta": _POS,
                "time_delta": _OPT_POS,
                "net_rows": _POS_INT,
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dir": {"type": "string"},
                "plot": {"type": "boolean"},
            },
        },
    },
}

DEFAULTS: Dict[str, Any] = {
    "model": {"kind": "circle", "n": 512, "length": 2 * np.pi},
    "solver": {"modes": 400, "method": "auto", "seed": 0},
    "phd": {"radius": None, "delta": 0.1, "time_delta": 0.05, "time_ratio": 1.2, "eps": 0.0,
            "noise": 0.0, "seed": None},
    "inverse": {},
    "mgh": {"budget": 16, "exhaustive": None},
    "sweep": {"sigma": [1.0, 0.5, 0.25, 0.125], "noise": [0.0, 1e-4, 1e-3, 1e-2], "seeds": [1, 2, 3],
              "profile": {"kind": "cosine", "a": 2.0, "b": 1.0, "k": 1},
              "n_y": 32, "n_z": 32, "delta": 0.25, "time_delta": 0.1, "net_rows": 16},
    "output": {"dir": "out", "plot": False},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "model":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate_config(raw: dict) -> dict:
    """Check ``raw`` against :data:`SCHEMA` and return it merged over the defaults."""
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config field {where}: {exc.message}") from None
    cfg = _merge(DEFAULTS, raw)
    phd = cfg["phd"]
    if phd["noise"] > 0 and phd["seed"] is None:
        raise ConfigError("config field phd.seed: a seed is mandatory when phd.noise > 0")
    sigma = cfg["sweep"]["sigma"]
    if any(a <= b for a, b in zip(sigma, sigma[1:])):
        raise ConfigError("config field sweep.sigma: grid must be strictly decreasing")
    return cfg


def load_config(path: Optional[Union[str, Path]], overrides: Optional[dict] = None) -> dict:
    """Read, overlay ``overrides`` (section -> fields) and validate a config file."""
    raw = {} if path is None else _read_raw(path)
    for section, fields in (overrides or {}).items():
        raw[section] = dict(raw.get(section) or {}, **fields)
    return validate_config(raw)


def _read_raw(path: Union[str, Path]) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    return raw


def profile_function(spec, period: float) -> Optional[Union[float, Callable]]:
    """Density profile from its config form; ``cosine`` is ``a + b cos(2 pi k y / period)``."""
    if spec is None or isinstance(spec, (int, float)):
        return spec
    a, b, k = float(spec.get("a", 2.0)), float(spec.get("b", 1.0)), int(spec.get("k", 1))

    def cosine(y):
        return a + b * np.cos(2 * np.pi * k * np.asarray(y) / period)

    return cosine


def build_model(model: dict) -> DiscreteSpace:
    kind = model["kind"]
    if kind == "circle":
        length = model.get("length", 2 * np.pi)
        return build_circle(model.get("n", 512), length, profile_function(model.get("density"), length),
                            offset=model.get("offset", 0.0), base_point=model.get("base_point", 0))
    if kind == "warped_torus":
        return build_warped_torus(model.get("n_y", 32), model.get("n_z", 16), model.get("sigma", 1.0),
                                  profile_function(model.get("density"), 2.0),
                                  base_point=model.get("base_point", 0))
    if kind == "flat_torus":
        return build_flat_torus(model.get("n", 40), model.get("side", 2.0))
    if kind == "interval_orbifold":
        return build_interval_orbifold(model.get("n", 256), model.get("length", np.pi),
                                       base_point=model.get("base_point"))
    raise ConfigError(f"config field model.kind: unknown model {kind!r}")


def limit_circle(n_y: int, profile) -> DiscreteSpace:
    """The collapse limit of the warped tori: ``[-1, 1]`` periodic with measure ``c(y) dy``."""
    return build_circle(n_y, 2.0, profile_function(profile, 2.0), offset=-1.0)
