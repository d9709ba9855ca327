"""Experiment configuration: a versioned JSON document with a strict schema."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

CONFIG_VERSION = 1

_task = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["copy", "retrieval", "clusters"]},
        "vocab_size": {"type": "integer", "minimum": 2},
        "seq_len": {"type": "integer", "minimum": 1},
        "n_train": {"type": "integer", "minimum": 1},
        "n_val": {"type": "integer", "minimum": 1},
        "n_test": {"type": "integer", "minimum": 1},
        "n_pairs": {"type": "integer", "minimum": 1},
        "n_classes": {"type": "integer", "minimum": 2},
        "sharpness": {"type": "number", "minimum": 0},
        "shift": {"type": "number", "minimum": 0},
        "noise": {"type": "number", "minimum": 0},
    },
}

_model = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["det", "babn"]},
        "d_model": {"type": "integer", "minimum": 1},
        "n_heads": {"type": "integer", "minimum": 1},
        "n_layers": {"type": "integer", "minimum": 1},
        "ffn_hidden": {"type": "integer", "minimum": 1},
        "rho": {"type": "number", "minimum": 0},
        "sigma": {"type": "number", "minimum": 0},
        "beta": {"type": "number", "exclusiveMinimum": 0},
        "init_from": {"type": "string"},
        "pretrain_steps": {"type": "integer", "minimum": 0},
    },
}

_train = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "steps": {"type": "integer", "minimum": 1},
        "batch_size": {"type": "integer", "minimum": 1},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "clip": {"type": "number", "minimum": 0},
        "eval_every": {"type": "integer", "minimum": 1},
        "anneal_w0": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "warmup_frac": {"type": "number", "minimum": 0, "maximum": 1},
        "kl_reduction": {"enum": ["mean", "sum"]},
    },
}

_metrics = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "n_bins": {"type": "integer", "minimum": 1},
        "samples": {"type": "integer", "minimum": 2},
        "p_threshold": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "conf_threshold": {"type": "number", "minimum": 0, "maximum": 1},
    },
}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["version", "seed", "task", "model"],
    "properties": {
        "version": {"const": CONFIG_VERSION},
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string"},
        "task": _task,
        "model": _model,
        "train": _train,
        "metrics": _metrics,
    },
}


class ConfigError(ValueError):
    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class MetricsConfig:
    n_bins: int = 10
    samples: int = 20
    p_threshold: float = 0.05
    conf_threshold: float = 0.95


@dataclass
class ExperimentConfig:
    seed: int
    task: dict
    model: dict
    train: dict = field(default_factory=dict)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    output_dir: str = "runs/default"
    version: int = CONFIG_VERSION


def validate(doc):
    """Raise ConfigError naming the offending field path."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if not errors:
        return
    err = errors[0]
    path = "/".join(str(p) for p in err.absolute_path) or "<root>"
    if err.validator == "required":
        missing = [r for r in err.validator_value if r not in err.instance]
        path = "/".join([*map(str, err.absolute_path), missing[0]]) if missing else path
        raise ConfigError(path, "required field is missing")
    raise ConfigError(path, err.message)


def from_dict(doc):
    validate(doc)
    return ExperimentConfig(
        seed=doc["seed"], task=dict(doc["task"]), model=dict(doc["model"]),
        train=dict(doc.get("train", {})), metrics=MetricsConfig(**doc.get("metrics", {})),
        output_dir=doc.get("output_dir", "runs/default"), version=doc["version"])


def load(path):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"not valid JSON: {exc}") from None
    return from_dict(doc)
