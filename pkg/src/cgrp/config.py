"""Training configuration files: a flat JSON object validated against a schema.

Example::

    {"stage": "mrrn", "batch_size": 4, "patch": 64, "max_steps": 500,
     "pseudo_source": "aligned", "backbone_weights": "random",
     "loss": {"smooth": 0.1}}

Unknown keys are rejected. ``loss`` holds :class:`LossWeights` overrides.
"""
from __future__ import annotations

import json
from dataclasses import fields
from pathlib import Path

from .losses import LossWeights
from .trainer import PSEUDO_SOURCES, STAGES, TrainConfig

# key -> (accepted types, help); defaults come from TrainConfig / LossWeights
SCHEMA = {
    "stage": (str, f"one of {', '.join(STAGES)}"),
    "batch_size": (int, "patches per optimisation step"),
    "patch": (int, "square patch size in pixels"),
    "epochs": (int, "passes over the training records"),
    "max_steps": ((int, type(None)), "hard cap on steps (null for none)"),
    "lr": ((int, float), "Adam learning rate (constant)"),
    "betas": (list, "Adam moment coefficients [beta1, beta2]"),
    "seed": (int, "root seed for initialisation and patch sampling"),
    "checkpoint_every": (int, "steps between intermediate checkpoints (0 = end only)"),
    "pseudo_source": (str, f"registration target, one of {', '.join(PSEUDO_SOURCES)}"),
    "reg_grad_to_cpstn": (bool, "joint stage: let the registration loss update the translator"),
    "use_ifm": (bool, "use the attention module (false = concatenation)"),
    "backbone_weights": (str, "'imagenet', 'random' or a path to VGG-19 weights"),
    "loss": (dict, "loss weight overrides, keys as in the loss section"),
}


def schema() -> dict:
    """Machine-readable description of every config key and its default."""
    defaults = TrainConfig().to_dict()
    out = {k: {"type": _type_name(t), "default": defaults.get(k), "help": h} for k, (t, h) in SCHEMA.items()}
    loss_defaults = LossWeights().to_dict()
    out["loss"]["keys"] = {f.name: loss_defaults[f.name] for f in fields(LossWeights)}
    return out


def _type_name(t) -> str:
    if isinstance(t, tuple):
        return " | ".join("null" if x is type(None) else x.__name__ for x in t)
    return t.__name__


def validate(raw: dict) -> dict:
    if not isinstance(raw, dict):
        raise ValueError("config must be a JSON object")
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    for key, value in raw.items():
        types = SCHEMA[key][0]
        if isinstance(value, bool) and types in (int, (int, float), (int, type(None))):
            raise ValueError(f"config key {key!r} must be {_type_name(types)}, got a boolean")
        if not isinstance(value, types):
            raise ValueError(f"config key {key!r} must be {_type_name(types)}, got {type(value).__name__}")
    if "loss" in raw:
        known = {f.name for f in fields(LossWeights)}
        bad = sorted(set(raw["loss"]) - known)
        if bad:
            raise ValueError(f"unknown loss keys: {', '.join(bad)}")
    return raw


def load_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from exc
    return validate(raw)


def build_train_config(raw: dict, **overrides) -> TrainConfig:
    """Merge a validated config with command-line overrides (``None`` = unset)."""
    merged = dict(validate(dict(raw)))
    loss = dict(merged.pop("loss", {}))
    loss.update(overrides.pop("loss", {}) or {})
    merged.update({k: v for k, v in overrides.items() if v is not None})
    validate(merged)
    merged["loss"] = LossWeights.from_dict({**LossWeights().to_dict(), **loss})
    return TrainConfig(**merged)
