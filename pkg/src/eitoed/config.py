"""Experiment configuration: JSON schema, named presets and hashing."""
from __future__ import annotations

import copy
import hashlib
import json
import os

import jsonschema

from .errors import ConfigError

_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}
_vec3 = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}

SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "additionalProperties": False,
    "required": ["mesh", "layout", "conductivity", "contact_peaks", "noise", "mode", "optimizer", "roi"],
    "properties": {
        "mesh": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "path": {"type": "string"},
                "outer_radius": _pos,
                "skull_shell": {"type": "array", "items": _pos, "minItems": 2, "maxItems": 2},
                "target_edge_length": _pos,
                "flat_bottom_height": {"oneOf": [_pos, {"type": "null"}]},
            },
        },
        "layout": {
            "type": "object",
            "additionalProperties": False,
            "required": ["radius"],
            "properties": {
                "preset": {"enum": ["symmetric12", "quadrant12"]},
                "file": {"type": "string"},
                "theta": {"type": "array", "items": {"type": "number"}, "minItems": 2},
                "phi": {"type": "array", "items": {"type": "number"}, "minItems": 2},
                "radius": _pos,
                "tau": _nonneg,
                "feeding": {"type": "integer", "minimum": 0},
                "min_facets": _nonneg,
            },
        },
        "conductivity": {
            "type": "object",
            "additionalProperties": False,
            "required": ["skin", "skull", "brain"],
            "properties": {"skin": _pos, "skull": _pos, "brain": _pos},
        },
        "contact_peaks": {"oneOf": [_pos, {"type": "array", "items": _pos, "minItems": 2}]},
        "noise": {
            "type": "object",
            "additionalProperties": False,
            "required": ["scale", "seed"],
            "properties": {"scale": _nonneg, "seed": {"type": "integer", "minimum": 0}},
        },
        "mode": {"enum": ["gaussian-roi", "tv-adaptive"]},
        "prior": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"length": _pos, "std": _pos},
        },
        "tv": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "gamma": _pos, "smoothing": _pos, "c_upsilon": _pos, "b_upsilon": _pos,
                "inner_steps": {"type": "integer", "minimum": 1},
                "linearizations": {"type": "integer", "minimum": 1},
                "contacts_known": {"type": "boolean"},
            },
        },
        "roi": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "halfspaces": {"type": "array", "items": {"type": "array", "items": {"type": "number"},
                                                          "minItems": 4, "maxItems": 4}},
                "brain_only": {"type": "boolean"},
            },
        },
        "optimizer": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tolerance": _nonneg,
                "max_iterations": {"type": "integer", "minimum": 0},
                "step": _pos,
                "armijo_trials": {"type": "integer", "minimum": 1},
                "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "beta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "pole_threshold": _nonneg,
                "bound_margin": _nonneg,
                "gradient_step": _pos,
                "gradient_rtol": _pos,
            },
        },
        "inclusion": {
            "oneOf": [
                {"type": "null"},
                {"type": "object", "additionalProperties": False,
                 "required": ["center", "radius", "amplitude"],
                 "properties": {"center": _vec3, "radius": _pos, "amplitude": {"type": "number"}}},
            ]
        },
    },
}

_BASE = {
    "mesh": {"outer_radius": 0.09, "skull_shell": [0.07, 0.08], "target_edge_length": 0.012,
             "flat_bottom_height": None},
    "layout": {"preset": "symmetric12", "radius": 0.025, "tau": 0.4, "feeding": 0, "min_facets": 4.0},
    "conductivity": {"skin": 0.2, "skull": 0.06, "brain": 0.2},
    "contact_peaks": 1000.0,
    "noise": {"scale": 1e-3, "seed": 0},
    "mode": "gaussian-roi",
    "prior": {"length": 0.05, "std": 0.2},
    "tv": {"gamma": 1e5, "smoothing": 1e-6, "c_upsilon": 300.0, "b_upsilon": 0.01,
           "inner_steps": 5, "linearizations": 5, "contacts_known": True},
    "roi": {"halfspaces": [], "brain_only": True},
    "optimizer": {"tolerance": 0.0, "max_iterations": 40, "step": 0.5, "armijo_trials": 30,
                  "alpha": 0.5, "beta": 5 / 6, "pole_threshold": 0.2, "bound_margin": 0.02,
                  "gradient_step": 1e-4, "gradient_rtol": 1e-2},
    "inclusion": {"center": [-0.03, -0.03, 0.035], "radius": 0.025, "amplitude": 0.1},
}

# the upper quadrant x <= 0, y <= 0 of the brain, above the plane z = 0.02
QUADRANT_ROI = {"halfspaces": [[0, 0, 1, 0.02], [-1, 0, 0, 0], [0, -1, 0, 0]], "brain_only": True}

PRESETS = {
    "gaussian-fullbrain": {"mode": "gaussian-roi", "roi": {"halfspaces": [[0, 0, 1, 0.02]], "brain_only": True}},
    "gaussian-quadrant": {"mode": "gaussian-roi", "roi": QUADRANT_ROI},
    "tv-adaptive": {"mode": "tv-adaptive", "roi": {"halfspaces": [], "brain_only": True}},
}


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _field_path(error) -> str:
    parts = [str(p) for p in error.absolute_path]
    return ".".join(parts) if parts else "<root>"


def validate(cfg: dict) -> dict:
    validator = jsonschema.Draft7Validator(SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        e = errors[0]
        raise ConfigError(e.message, _field_path(e))
    mesh = cfg["mesh"]
    if "path" in mesh:
        if not os.path.isfile(mesh["path"]):
            raise ConfigError(f"file not found: {mesh['path']}", "mesh.path")
    else:
        r_in, r_out = mesh["skull_shell"]
        if not 0 < r_in < r_out < mesh["outer_radius"]:
            raise ConfigError("need 0 < r_in < r_out < outer_radius", "mesh.skull_shell")
    lay = cfg["layout"]
    sources = [k for k in ("preset", "file", "theta") if k in lay]
    if len(sources) != 1:
        raise ConfigError("give exactly one of preset, file or theta/phi", "layout")
    if "theta" in lay and len(lay["theta"]) != len(lay.get("phi", [])):
        raise ConfigError("theta and phi must have equal length", "layout.phi")
    if "file" in lay and not os.path.isfile(lay["file"]):
        raise ConfigError(f"file not found: {lay['file']}", "layout.file")
    return cfg


def resolve(user: dict | None = None, preset: str | None = None, seed: int | None = None) -> dict:
    """Defaults, then preset, then the user file, then command-line overrides."""
    cfg = copy.deepcopy(_BASE)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}", "preset")
        cfg = merge(cfg, PRESETS[preset])
    if user:
        if not isinstance(user, dict):
            raise ConfigError("configuration must be a JSON object")
        user = copy.deepcopy(user)
        lay = user.get("layout", {})
        if isinstance(lay, dict) and any(k in lay for k in ("file", "theta")):
            cfg["layout"].pop("preset", None)
        cfg = merge(cfg, user)
    if seed is not None:
        cfg["noise"]["seed"] = seed
    return validate(cfg)


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON ({exc.msg} at line {exc.lineno})", str(path)) from None


def config_hash(cfg: dict) -> str:
    text = json.dumps(cfg, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(text.encode()).hexdigest()
