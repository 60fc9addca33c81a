"""Run configuration: a single JSON document with strict validation.

Unknown keys are rejected and every offending key is reported at once.
A document may name a ``preset``; its own values are merged over the preset.
"""
from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .data import RESCALE, AugmentConfig, Preprocess
from .errors import ConfigError
from .model import INCEPTION_V3_PARAMS
from .train import StageConfig, TrainConfig

SEED_ENV = "STATECNN_SEED"

DEFAULTS: dict = {
    "dataset": {"root": None, "manifest": None, "image_side": 363, "rescale": RESCALE,
                "standardize": False, "ratio": 0.8},
    "augment": {"enabled": True, "rotation_max_deg": 20.0, "zoom_range": 0.1, "width_shift": 0.1,
                "height_shift": 0.1, "horizontal_flip": True, "fill_mode": "nearest"},
    "model": {"classes": 7, "dropout": 0.5, "conv_blocks": 2, "bn_epsilon": 1e-3, "bn_momentum": 0.99,
              "backbone": {"kind": "shape_only", "declared_params": INCEPTION_V3_PARAMS}},
    "stage1": {"optimizer": "rmsprop", "lr": 0.001, "epochs": 100},
    "stage2": {"optimizer": "sgd", "lr": 0.0001, "decay": 1e-6, "momentum": 0.9, "epochs": 100,
               "unfreeze_top_k": 4, "init_from": "best"},
    "batch_size": 32,
    "seeds": {"master": 0},
    "output_dir": "runs/default",
    "keep_checkpoints": "all",
}

_BACKBONE_KEYS = {
    "shape_only": {"kind", "declared_params", "seed", "channels"},
    "tiny_trainable": {"kind", "units", "channels", "downsample", "seed"},
}
_STAGE_KEYS = {"optimizer", "lr", "epochs", "momentum", "decay", "unfreeze_top_k", "init_from"}

# The experiment grid: head depth, fine-tuning and its starting point, and a
# higher fine-tuning rate.
PRESETS: dict[str, dict] = {
    "default": {},
    "one_conv_block": {"model": {"conv_blocks": 1}, "stage1": {"epochs": 50}, "stage2": None},
    "two_conv_blocks": {"stage1": {"epochs": 100}, "stage2": None},
    "finetune_last": {"stage1": {"epochs": 100}, "stage2": {"epochs": 50, "init_from": "last"}},
    "finetune_best": {"stage1": {"epochs": 100}, "stage2": {"epochs": 31, "init_from": "best"}},
    "finetune_lr_1e-3": {"stage2": {"lr": 0.001}},
}


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "backbone":
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _check_keys(doc, allowed, where, errors):
    if not isinstance(doc, dict):
        errors.append(f"{where}: expected an object")
        return
    for k in doc:
        if k not in allowed:
            errors.append(f"{where}.{k}: unknown key" if where else f"{k}: unknown key")


def validate(doc: dict) -> list[str]:
    """Every problem with ``doc``, one message per offending key."""
    errors: list[str] = []
    _check_keys(doc, set(DEFAULTS) | {"preset"}, "", errors)
    for section in ("dataset", "augment", "model", "seeds"):
        if section in doc:
            _check_keys(doc[section], set(DEFAULTS[section]), section, errors)
    for stage in ("stage1", "stage2"):
        if doc.get(stage) is not None:
            _check_keys(doc[stage], _STAGE_KEYS, stage, errors)
    backbone = doc.get("model", {}).get("backbone") if isinstance(doc.get("model"), dict) else None
    if backbone is not None:
        kind = backbone.get("kind") if isinstance(backbone, dict) else None
        if kind not in _BACKBONE_KEYS:
            errors.append(f"model.backbone.kind: must be one of {sorted(_BACKBONE_KEYS)}")
        else:
            _check_keys(backbone, _BACKBONE_KEYS[kind], "model.backbone", errors)
    if "preset" in doc and doc["preset"] not in PRESETS:
        errors.append(f"preset: unknown preset {doc['preset']!r}; choose from {sorted(PRESETS)}")
    return errors


@dataclass
class RunConfig:
    dataset: dict
    augment: dict
    model: dict
    stage1: dict
    stage2: dict | None
    batch_size: int
    seeds: dict
    output_dir: str
    keep_checkpoints: str
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, doc: dict | None = None, preset: str | None = None) -> "RunConfig":
        doc = dict(doc or {})
        errors = validate(doc)
        if preset is not None and preset not in PRESETS:
            errors.append(f"preset: unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        if errors:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))
        base = deep_merge(DEFAULTS, PRESETS[preset or doc.pop("preset", None) or "default"])
        doc.pop("preset", None)
        merged = deep_merge(base, doc)
        if base["stage2"] is None and isinstance(doc.get("stage2"), dict):
            merged["stage2"] = deep_merge(DEFAULTS["stage2"], doc["stage2"])
        env_seed = os.environ.get(SEED_ENV)
        if env_seed is not None:
            try:
                merged["seeds"]["master"] = int(env_seed)
            except ValueError:
                raise ConfigError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from None
        cfg = cls(**merged, raw=merged)
        cfg.train_config()  # range checks
        return cfg

    @classmethod
    def load(cls, path=None, preset: str | None = None) -> "RunConfig":
        if path is None:
            return cls.from_dict({}, preset)
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        return cls.from_dict(doc, preset)

    @property
    def master_seed(self) -> int:
        return int(self.seeds["master"])

    def preprocess(self) -> Preprocess:
        d = self.dataset
        if d["image_side"] < 1:
            raise ConfigError("dataset.image_side must be >= 1")
        return Preprocess(int(d["image_side"]), float(d["rescale"]), bool(d["standardize"]))

    def augment_config(self) -> AugmentConfig | None:
        a = dict(self.augment)
        if not a.pop("enabled"):
            return None
        return AugmentConfig(**a, seed=self.master_seed)

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(
                stage1=StageConfig(**self.stage1),
                stage2=StageConfig(**self.stage2) if self.stage2 is not None else None,
                batch_size=int(self.batch_size),
                seed=self.master_seed,
                augment=self.augment_config(),
                preprocess=self.preprocess(),
                keep_checkpoints=self.keep_checkpoints,
            )
        except TypeError as exc:
            raise ConfigError(f"invalid configuration: {exc}") from None

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True)
