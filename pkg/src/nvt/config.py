"""Run configuration: one JSON file holding model, noise, training, data and output settings."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import jsonschema

from nvt.data import AugmentConfig, NormStats
from nvt.errors import ConfigError
from nvt.model import ViTConfig
from nvt.noise import KINDS, NoiseConfig
from nvt.train import TrainConfig

_POS_INT = {"type": "integer", "minimum": 1}
_NUM = {"type": "number"}
_TRIPLE = {"type": "array", "items": _NUM, "minItems": 3, "maxItems": 3}

SCHEMA: dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "nvt run config",
    "type": "object",
    "additionalProperties": False,
    "required": ["model", "train", "data", "output"],
    "properties": {
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["image_size", "patch_size", "embed_dim", "depth", "num_heads", "num_classes"],
            "properties": {
                "image_size": _POS_INT,
                "patch_size": _POS_INT,
                "embed_dim": _POS_INT,
                "depth": _POS_INT,
                "num_heads": _POS_INT,
                "num_classes": {"type": "integer", "minimum": 2},
                "mlp_ratio": {"type": "number", "exclusiveMinimum": 0},
                "drop_rate": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            },
        },
        "noise": {
            "oneOf": [
                {"type": "null"},
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind"],
                    "properties": {
                        "kind": {"enum": list(KINDS)},
                        "layer_index": {"type": ["integer", "null"], "minimum": 0},
                        "alpha": {"type": ["number", "null"]},
                        "custom": {"type": ["array", "null"], "items": {"type": "array", "items": _NUM}},
                        "selection_seed": {"type": ["integer", "null"]},
                    },
                },
            ]
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "required": ["batch_size"],
            "properties": {
                "batch_size": _POS_INT,
                "base_lr": {"type": "number", "exclusiveMinimum": 0},
                "epochs": _POS_INT,
                "smoothing": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "weight_decay": {"type": "number", "minimum": 0},
                "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "adam_eps": {"type": "number", "exclusiveMinimum": 0},
                "seed": {"type": "integer"},
                "deterministic": {"type": "boolean"},
            },
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "required": ["root"],
            "properties": {
                "root": {"type": "string", "minLength": 1},
                "train_split": {"type": "string"},
                "val_split": {"type": "string"},
                "norm": {
                    "oneOf": [
                        {"const": "train"},
                        {
                            "type": "object",
                            "additionalProperties": False,
                            "required": ["mean", "std"],
                            "properties": {"mean": _TRIPLE, "std": _TRIPLE},
                        },
                    ]
                },
                "augment": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "num_ops": {"type": "integer", "minimum": 0},
                        "magnitude": {"type": "integer", "minimum": 0, "maximum": 30},
                        "interpolation": {"const": "nearest"},
                        "seed": {"type": "integer"},
                    },
                },
                "scale_range": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "required": ["dir"],
            "properties": {"dir": {"type": "string", "minLength": 1}},
        },
    },
}


@dataclass(frozen=True)
class DataConfig:
    root: str
    train_split: str = "train"
    val_split: str = "val"
    norm: NormStats | None = None  # None: compute from the training split
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    scale_range: tuple[float, float] = (0.7, 1.0)

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0 < lo <= hi <= 1:
            raise ConfigError("need 0 < lo <= hi <= 1", "data.scale_range")

    def to_json(self) -> dict[str, Any]:
        return {
            "root": self.root,
            "train_split": self.train_split,
            "val_split": self.val_split,
            "norm": "train" if self.norm is None else self.norm.to_json(),
            "augment": {
                "num_ops": self.augment.num_ops,
                "magnitude": self.augment.magnitude,
                "interpolation": self.augment.interpolation,
                "seed": self.augment.seed,
            },
            "scale_range": list(self.scale_range),
        }


@dataclass(frozen=True)
class RunConfig:
    model: ViTConfig
    train: TrainConfig
    data: DataConfig
    output_dir: str
    noise: NoiseConfig | None = None
    base_dir: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        if self.noise is not None:
            # validates layer_index against depth; a missing index stays unresolved until setup
            self.noise.resolve(self.model.depth)

    def to_json(self) -> dict[str, Any]:
        return {
            "model": self.model.to_json(),
            "noise": None if self.noise is None else self.noise.to_json(),
            "train": self.train.to_json(),
            "data": self.data.to_json(),
            "output": {"dir": self.output_dir},
        }

    def resolve_path(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else self.base_dir / path

    @classmethod
    def from_json(cls, obj: Any, base_dir: Path | str = ".") -> "RunConfig":
        validator = jsonschema.Draft202012Validator(SCHEMA)
        errors = sorted(validator.iter_errors(obj), key=lambda e: list(e.absolute_path))
        if errors:
            err = errors[0]
            path = ".".join(str(p) for p in err.absolute_path) or "<root>"
            raise ConfigError(err.message, path)
        d = obj["data"]
        norm = d.get("norm", "train")
        data = DataConfig(
            root=d["root"],
            train_split=d.get("train_split", "train"),
            val_split=d.get("val_split", "val"),
            norm=None if norm == "train" else NormStats.from_json(norm),
            augment=AugmentConfig(**d.get("augment", {})),
            scale_range=tuple(d.get("scale_range", (0.7, 1.0))),
        )
        return cls(
            model=ViTConfig.from_json(obj["model"]),
            train=TrainConfig.from_json(obj["train"]),
            data=data,
            output_dir=obj["output"]["dir"],
            noise=NoiseConfig.from_json(obj.get("noise")),
            base_dir=Path(base_dir),
        )


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found", "--config") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}", "--config") from None
    return RunConfig.from_json(obj, path.parent)
