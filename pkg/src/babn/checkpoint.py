"""Checkpoint container and the deterministic -> BABN conversion.

On disk a checkpoint is one JSON document::

    {"format": "babn-ckpt" | "det-attn", "version": 1,
     "config": {...AttentionConfig...},
     "constants": {"beta": .., "rho": .., "sigma": ..},   # babn-ckpt only
     "tensors": {name: {"shape": [...], "values": [...]}}}

Values are written with 17 significant digits, which round-trips float64
exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import AttentionConfig, AttentionModel, base_param_shapes
from .belief import BabnConstants, BabnModel, babn_param_shapes, init_babn_params

FORMAT_VERSION = 1
FORMATS = ("det-attn", "babn-ckpt")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    format: str
    config: AttentionConfig
    tensors: dict
    constants: BabnConstants = None
    version: int = FORMAT_VERSION
    meta: dict = field(default_factory=dict)

    def validate(self):
        if self.format not in FORMATS:
            raise CheckpointError(f"unknown checkpoint format {self.format!r}")
        if self.version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {self.version}")
        expected = dict(base_param_shapes(self.config))
        if self.format == "babn-ckpt":
            if self.constants is None:
                raise CheckpointError("babn-ckpt checkpoint without constants")
            expected.update(babn_param_shapes(self.config))
        missing = sorted(set(expected) - set(self.tensors))
        extra = sorted(set(self.tensors) - set(expected))
        if missing or extra:
            raise CheckpointError(f"tensor set does not match config: missing={missing} extra={extra}")
        for name, shape in expected.items():
            if self.tensors[name].shape != tuple(shape):
                raise CheckpointError(f"{name}: shape {self.tensors[name].shape} != expected {tuple(shape)}")
        return self

    def to_json(self):
        doc = {
            "format": self.format,
            "version": self.version,
            "config": self.config.to_dict(),
        }
        if self.constants is not None:
            doc["constants"] = {"beta": self.constants.beta, "rho": self.constants.rho,
                                "sigma": self.constants.sigma}
        if self.meta:
            doc["meta"] = self.meta
        head = json.dumps(doc, indent=1, sort_keys=True)[:-2]
        parts = []
        for name in sorted(self.tensors):
            arr = np.asarray(self.tensors[name], dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise CheckpointError(f"{name}: refusing to write non-finite values")
            values = ",".join("%.17g" % v for v in arr.ravel())
            parts.append(f' {json.dumps(name)}: {{"shape": {json.dumps(list(arr.shape))}, "values": [{values}]}}')
        return head + ',\n "tensors": {\n' + ",\n".join(parts) + "\n }\n}\n"

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        for key in ("format", "version", "config", "tensors"):
            if key not in doc:
                raise CheckpointError(f"checkpoint missing field {key!r}")
        tensors = {name: np.array(t["values"], dtype=np.float64).reshape(t["shape"])
                   for name, t in doc["tensors"].items()}
        constants = BabnConstants(**doc["constants"]) if "constants" in doc else None
        ckpt = cls(format=doc["format"], config=AttentionConfig(**doc["config"]), tensors=tensors,
                   constants=constants, version=doc["version"], meta=doc.get("meta", {}))
        return ckpt.validate()

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text())


def checkpoint_from_model(model, meta=None):
    constants = getattr(model, "constants", None)
    return Checkpoint(format=model.format_tag, config=model.config, tensors=model.state(),
                      constants=constants, meta=dict(meta or {})).validate()


def model_from_checkpoint(ckpt):
    ckpt.validate()
    if ckpt.format == "babn-ckpt":
        return BabnModel(ckpt.config, ckpt.constants, params=ckpt.tensors)
    return AttentionModel(ckpt.config, params=ckpt.tensors)


def convert_checkpoint(det_ckpt, rng, rho=1.5, sigma=1e-6, beta=1.0):
    """Deterministic checkpoint -> BABN checkpoint.

    Shared tensors are copied verbatim; the prior and encoder tensors are
    freshly initialised from ``rng``.
    """
    if det_ckpt.format != "det-attn":
        raise CheckpointError(f"can only convert det-attn checkpoints, got {det_ckpt.format!r}")
    try:
        det_ckpt.validate()
    except CheckpointError as exc:
        raise CheckpointError(f"conversion failed: {exc}") from None
    tensors = {name: np.array(v, copy=True) for name, v in det_ckpt.tensors.items()}
    tensors.update(init_babn_params(det_ckpt.config, rng))
    return Checkpoint(format="babn-ckpt", config=det_ckpt.config, tensors=tensors,
                      constants=BabnConstants(rho=rho, sigma=sigma, beta=beta),
                      meta={"converted_from": "det-attn"}).validate()
