"""Published JSON schemas for the CLI config files, plus loading and validation.

Each command reads one YAML or JSON file. Validation errors name the
offending field as a dotted path (``window.T_e``, ``synthesis.lr``).
Defaults are filled in after validation by :func:`with_defaults`.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

import jsonschema
import yaml

from .errors import ConfigError
from .models import ARCHITECTURES
from .augment import MODES as AUGMENT_MODES
from .labeling_eval import SOFT_LABEL_MODES
from .synthesis import TERM_NORMALIZATIONS

_ARCHS = sorted(ARCHITECTURES)
_SCHEDULES = ["cosine", "constant", "step"]

_DATASET = {
    "type": "object",
    "required": ["name"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "root": {"type": ["string", "null"]},
        "classes": {"type": ["array", "null"], "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        "per_class": {"type": ["integer", "null"], "minimum": 1},
        "imbalanced": {
            "type": ["object", "null"],
            "required": ["min_frac", "max_frac"],
            "additionalProperties": False,
            "properties": {"min_frac": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                           "max_frac": {"type": "number", "exclusiveMinimum": 0, "maximum": 1}},
        },
    },
}

_BASE = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "arch": {"enum": _ARCHS},
        "path": {"type": ["string", "null"]},
        "pretrain_epochs": {"type": "integer", "minimum": 0},
        "options": {"type": "object"},
    },
}

_TRAIN = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "momentum": {"type": "number", "minimum": 0, "maximum": 1},
        "weight_decay": {"type": "number", "minimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "schedule": {"enum": _SCHEDULES},
        "flip": {"type": "boolean"},
    },
}

_COMMON = {
    "seed": {"type": "integer", "minimum": 0},
    "output": {"type": "string", "minLength": 1},
}

POOL_PRIOR = {
    "type": "object",
    "required": ["dataset", "window", "output"],
    "additionalProperties": False,
    "properties": {
        **_COMMON,
        "dataset": _DATASET,
        "base": _BASE,
        "train": _TRAIN,
        "window": {
            "type": "object",
            "required": ["T_b", "T_e", "m"],
            "additionalProperties": False,
            "properties": {"T_b": {"type": "integer", "minimum": 0},
                           "T_e": {"type": "integer", "minimum": 0},
                           "m": {"type": "integer", "minimum": 1},
                           "unit": {"enum": ["epoch", "step"]},
                           "max_stage": {"type": ["integer", "null"], "minimum": 0}},
        },
    },
}

POOL_POST = {
    "type": "object",
    "required": ["dataset", "prune", "output"],
    "additionalProperties": False,
    "properties": {
        **_COMMON,
        "dataset": _DATASET,
        "base": _BASE,
        "train": _TRAIN,
        "strict": {"type": "boolean"},
        "prune": {
            "type": "object",
            "required": ["count", "target_flops_ratio"],
            "additionalProperties": False,
            "properties": {"count": {"type": "integer", "minimum": 1},
                           "target_flops_ratio": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                           "finetune_steps": {"type": "integer", "minimum": 0},
                           "finetune_unit": {"enum": ["epoch", "step"]}},
        },
    },
}

DISTILL = {
    "type": "object",
    "required": ["pool", "dataset", "output"],
    "additionalProperties": False,
    "properties": {
        **_COMMON,
        "pool": {"type": "string"},
        "dataset": _DATASET,
        "log_every": {"type": "integer", "minimum": 0},
        "synthesis": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "ipc": {"type": "integer", "minimum": 1},
                "iterations": {"type": "integer", "minimum": 1},
                "batch_size": {"type": "integer", "minimum": 1},
                "ensemble_n": {"type": "integer", "minimum": 1},
                "u": {"type": "number", "minimum": 0},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "betas": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                "weight_decay": {"type": "number", "minimum": 0},
                "lr_schedule": {"enum": ["cosine", "constant"]},
                "init_mode": {"enum": ["real", "noise"]},
                "augment": {"enum": list(AUGMENT_MODES)},
                "clamp_pixels": {"type": "boolean"},
                "per_image_subsets": {"type": "boolean"},
                "term_normalization": {"enum": list(TERM_NORMALIZATIONS)},
                "divergence_factor": {"type": "number", "exclusiveMinimum": 1},
            },
        },
    },
}

RELABEL = {
    "type": "object",
    "required": ["synthetic", "pool", "output"],
    "additionalProperties": False,
    "properties": {
        **_COMMON,
        "synthetic": {"type": "string"},
        "pool": {"type": "string"},
        "augment": {"enum": list(AUGMENT_MODES)},
        "members": {"type": ["array", "null"], "items": {"type": "integer", "minimum": 0}, "minItems": 1},
    },
}

EVAL = {
    "type": "object",
    "required": ["synthetic", "test", "output"],
    "additionalProperties": False,
    "properties": {
        **_COMMON,
        "synthetic": {"type": "string"},
        "test": _DATASET,
        "pool": {"type": ["string", "null"]},
        "archs": {"type": "array", "items": {"enum": _ARCHS}, "minItems": 1},
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        "soft_label_mode": {"enum": list(SOFT_LABEL_MODES)},
        "hp": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": {"type": "integer", "minimum": 1},
                "batch_size": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "betas": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                "weight_decay": {"type": "number", "minimum": 0},
                "schedule": {"enum": ["cosine", "constant"]},
                "augment": {"enum": list(AUGMENT_MODES)},
                "cutmix_beta": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "baseline": {
            "type": ["object", "null"],
            "required": ["dataset"],
            "additionalProperties": False,
            "properties": {"dataset": _DATASET, "ipc": {"type": "integer", "minimum": 1}},
        },
    },
}

SCHEMAS = {"pool-prior": POOL_PRIOR, "pool-post": POOL_POST, "distill": DISTILL, "relabel": RELABEL,
           "eval": EVAL}

# Defaults follow the library defaults; pool training lr mirrors the desk pipeline.
DEFAULTS = {
    "pool-prior": {
        "seed": 0,
        "base": {"arch": "convnet-3", "path": None, "pretrain_epochs": 0, "options": {}},
        "train": {"lr": 0.05, "momentum": 0.9, "weight_decay": 5e-4, "batch_size": 64, "schedule": "cosine",
                  "flip": False},
        "window": {"unit": "epoch", "max_stage": None},
    },
    "pool-post": {
        "seed": 0,
        "strict": False,
        "base": {"arch": "convnet-3", "path": None, "pretrain_epochs": 0, "options": {}},
        "train": {"lr": 0.05, "momentum": 0.9, "weight_decay": 5e-4, "batch_size": 64, "schedule": "cosine",
                  "flip": False},
        "prune": {"finetune_steps": 0, "finetune_unit": "epoch"},
    },
    "distill": {"seed": 0, "log_every": 0, "synthesis": {}},
    "relabel": {"seed": 0, "augment": "none", "members": None},
    "eval": {"seed": 0, "pool": None, "archs": ["convnet-3"], "seeds": [0, 1, 2], "soft_label_mode": "none",
             "hp": {}, "baseline": None},
}


def _field_path(err: jsonschema.ValidationError) -> str:
    parts = [str(p) for p in err.absolute_path]
    if err.validator == "required":
        missing = [k for k in err.validator_value if isinstance(err.instance, dict) and k not in err.instance]
        if missing:
            parts.append(missing[0])
    elif err.validator == "additionalProperties" and isinstance(err.instance, dict):
        allowed = set(err.schema.get("properties", {}))
        extra = sorted(k for k in err.instance if k not in allowed)
        if extra:
            parts.append(extra[0])
    return ".".join(parts)


def validate(command: str, cfg) -> None:
    """Raise ConfigError for the first violation (deterministic order by path)."""
    if command not in SCHEMAS:
        raise KeyError(f"no schema for command {command!r}")
    validator = jsonschema.Draft202012Validator(SCHEMAS[command])
    errors = sorted(validator.iter_errors(cfg), key=lambda e: (list(map(str, e.absolute_path)), e.message))
    if errors:
        err = errors[0]
        raise ConfigError(_field_path(err), err.message)
    if command == "pool-prior":
        w = cfg["window"]
        if w["T_b"] > w["T_e"]:
            raise ConfigError("window.T_b", f"T_b={w['T_b']} exceeds T_e={w['T_e']}")
    if command in ("pool-prior", "pool-post"):
        base = cfg.get("base", {})
        if base.get("path") and base.get("pretrain_epochs"):
            raise ConfigError("base.pretrain_epochs", "pretraining only applies when building a fresh base")


def _merge(defaults: dict, cfg: dict) -> dict:
    out = copy.deepcopy(defaults)
    for k, v in cfg.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def with_defaults(command: str, cfg: dict) -> dict:
    return _merge(DEFAULTS[command], cfg)


def load_config(path) -> dict:
    """Parse a YAML or JSON config file (JSON is valid YAML, so one parser covers both)."""
    p = Path(path)
    if not p.exists():
        raise ConfigError("", f"config file not found: {p}")
    try:
        cfg = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError("", f"cannot parse {p}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("", f"{p} must contain a mapping at top level")
    return cfg


def load_and_validate(command: str, path) -> dict:
    cfg = load_config(path)
    validate(command, cfg)
    return with_defaults(command, cfg)


def schema_text(command: str) -> str:
    return json.dumps(SCHEMAS[command], indent=2)
