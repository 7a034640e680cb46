"""JSON configuration: schemas, validation with JSON-pointer messages, defaults."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from .narx import DEFAULT_TOL


class ConfigError(ValueError):
    """Schema violation; ``pointer`` locates the offending field."""

    def __init__(self, message: str, pointer: str = ""):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer


_number_or_range = {
    "oneOf": [
        {"type": "number"},
        {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
        {"type": "object", "required": ["low", "high"],
         "properties": {"low": {"type": "number"}, "high": {"type": "number"},
                        "step": {"type": "number", "exclusiveMinimum": 0}},
         "additionalProperties": False},
        {"type": "object", "required": ["choice"],
         "properties": {"choice": {"type": "array", "minItems": 1}},
         "additionalProperties": False},
    ]
}

SYSTEM_SCHEMA = {
    "type": "object",
    "required": ["dt", "samples", "modes"],
    "properties": {
        "name": {"type": "string"},
        "dt": {"type": "number", "exclusiveMinimum": 0},
        "samples": {"type": "integer", "minimum": 1},
        "modes": {
            "type": "array", "minItems": 1,
            "items": {
                "type": "object", "required": ["id", "ode"],
                "properties": {
                    "id": {"type": "string"},
                    "k": {"oneOf": [{"type": "integer", "minimum": 1},
                                    {"type": "array", "items": {"type": "integer", "minimum": 1}}]},
                    "ode": {"oneOf": [{"type": "string"},
                                      {"type": "array", "items": {"type": "string"}, "minItems": 1}]},
                },
                "additionalProperties": False,
            },
        },
        "transitions": {
            "type": "array",
            "items": {
                "type": "object", "required": ["src", "dst", "guard"],
                "properties": {
                    "src": {"type": "string"}, "dst": {"type": "string"},
                    "guard": {"type": "string"},
                    "reset": {"type": "object",
                              "properties": {"matrix": {"type": "array"}, "offset": {"type": "array"}},
                              "additionalProperties": False},
                },
                "additionalProperties": False,
            },
        },
        "init": {
            "type": "object",
            "properties": {
                "mode": {"oneOf": [{"type": "string"},
                                   {"type": "array", "items": {"type": "string"}, "minItems": 1}]},
                "state": {"type": "object", "additionalProperties": _number_or_range},
            },
            "additionalProperties": False,
        },
        "inputs": {
            "type": "array",
            "items": {
                "type": "object", "required": ["kind"],
                "properties": {"kind": {"enum": ["constant", "step", "cosine", "random"]}},
            },
        },
        "description": {"type": "string"},
    },
    "additionalProperties": False,
}

_kernel = {"enum": ["linear", "poly", "rbf"]}
_kernel_params = {
    "type": "object",
    "properties": {"gamma": {"type": "number", "exclusiveMinimum": 0},
                   "degree": {"type": "integer", "minimum": 1},
                   "coef0": {"type": "number"}},
    "additionalProperties": False,
}

INFER_SCHEMA = {
    "type": "object",
    "required": ["template"],
    "properties": {
        "name": {"type": "string"},
        "description": {"type": "string"},
        "system": {"type": ["string", "object"]},
        "dataset": {
            "type": "object",
            "properties": {"n_train": {"type": "integer", "minimum": 1},
                           "n_test": {"type": "integer", "minimum": 0},
                           "seed": {"type": "integer", "minimum": 0}},
            "additionalProperties": False,
        },
        "template": {
            "type": "object", "required": ["order"],
            "properties": {
                "order": {"type": "integer", "minimum": 0},
                "terms": {"type": "array", "items": {
                    "oneOf": [{"type": "string"},
                              {"type": "array", "items": {"type": "string"}, "minItems": 1}]}},
            },
            "additionalProperties": False,
        },
        "segmenter": {
            "type": "object",
            "properties": {"kind": {"enum": ["sliding", "binary"]},
                           "window": {"type": ["integer", "null"], "minimum": 2},
                           "tol": {"type": "number", "exclusiveMinimum": 0}},
            "additionalProperties": False,
        },
        "clustering": {
            "type": "object",
            "properties": {"criterion": {"enum": ["mergeable", "minimal"]},
                           "assign": {"enum": ["first", "best"]}},
            "additionalProperties": False,
        },
        "svm": {
            "type": "object",
            "properties": {
                "kernel": _kernel, "params": _kernel_params,
                "C": {"type": "number", "exclusiveMinimum": 0},
                "lags": {"type": "integer", "minimum": 0},
                "max_points": {"type": "integer", "minimum": 10},
                "per_pair": {"type": "object", "additionalProperties": {
                    "type": "object",
                    "properties": {"kernel": _kernel, "params": _kernel_params,
                                   "C": {"type": "number", "exclusiveMinimum": 0}},
                    "additionalProperties": False}},
            },
            "additionalProperties": False,
        },
        "eval": {
            "type": "object",
            "properties": {"probe": {"type": "integer", "minimum": 1},
                           "split": {"enum": ["test", "train"]}},
            "additionalProperties": False,
        },
    },
    "additionalProperties": False,
}

DEFAULTS = {
    "dataset": {"n_train": 9, "n_test": 6, "seed": 0},
    "template": {"terms": []},
    "segmenter": {"kind": "sliding", "window": None, "tol": DEFAULT_TOL},
    "clustering": {"criterion": "mergeable", "assign": "first"},
    "svm": {"kernel": "rbf", "params": {}, "C": 1e4, "lags": 0, "max_points": 600, "per_pair": {}},
    "eval": {"probe": 10, "split": "test"},
}


def _pointer(path) -> str:
    return "".join(f"/{p}" for p in path)


def validate(obj, schema) -> None:
    """Raise :class:`ConfigError` for the first (deepest) schema violation."""
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(obj), key=lambda e: (-len(e.absolute_path), e.message))
    if not errors:
        return
    err = errors[0]
    ptr = _pointer(err.absolute_path)
    if err.validator == "required":
        missing = [r for r in err.validator_value if r not in err.instance]
        ptr = f"{ptr}/{missing[0]}" if missing else ptr
        raise ConfigError(f"missing required field {missing[0]!r}" if missing else err.message, ptr)
    if err.validator == "additionalProperties":
        raise ConfigError(err.message, ptr)
    raise ConfigError(err.message, ptr)


def validate_system(obj: dict) -> dict:
    validate(obj, SYSTEM_SCHEMA)
    return obj


@dataclass
class InferConfig:
    """Validated inference configuration with defaults filled in."""

    raw: dict
    name: str = "benchmark"
    system: object = None
    dataset: dict = field(default_factory=dict)
    template: dict = field(default_factory=dict)
    segmenter: dict = field(default_factory=dict)
    clustering: dict = field(default_factory=dict)
    svm: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)

    def echo(self) -> dict:
        return {"name": self.name, "dataset": self.dataset, "template": self.template,
                "segmenter": self.segmenter, "clustering": self.clustering, "svm": self.svm,
                "eval": self.eval}


def make_config(obj: dict) -> InferConfig:
    validate(obj, INFER_SCHEMA)
    merged = {}
    for key, dflt in DEFAULTS.items():
        merged[key] = {**copy.deepcopy(dflt), **copy.deepcopy(obj.get(key, {}))}
    return InferConfig(obj, obj.get("name", "benchmark"), obj.get("system"), **merged)


def load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from None


def load_config(path) -> InferConfig:
    return make_config(load_json(path))
