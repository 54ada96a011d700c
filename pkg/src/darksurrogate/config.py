"""
Run configuration documents for the command-line tools.

A run config is one JSON object. It is validated against :data:`SCHEMA`
before any work starts; unknown keys anywhere are rejected. Budgets may be
given on the [0, 1] pixel scale (``epsilon``, ``beta``) or on the 0-255
scale through the dedicated ``epsilon_255`` / ``beta_255`` keys, never both.
"""

import copy
import json
import os
from pathlib import Path

import jsonschema

from .attacks import FUSIONS, OBJECTIVES, OPTIMIZERS, AttackConfig
from .augment import MIX_KINDS
from .core.models import ARCHITECTURES
from .faceverify import FACE_DEFAULTS, MARGIN_KINDS, MarginLossConfig
from .labeling import STRATEGIES
from .training import TrainConfig

OUT_ENV = "DARKSURROGATE_OUT"
MANIFEST_VERSION = 1

_num = {"type": "number"}
_int = {"type": "integer"}
_path = {"type": "string", "minLength": 1}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


_TOY = _obj(
    {
        "world": {"type": "object"},
        "world_seed": _int,
        "data_seed": _int,
        "n_train": _int,
        "n_victim_train": _int,
        "n_eval": _int,
        "split": {"enum": ["train", "victim_train", "eval"]},
    }
)
_FACE_TOY = _obj(
    {
        "world": {"type": "object"},
        "world_seed": _int,
        "data_seed": _int,
        "n_ids": _int,
        "per_id": _int,
        "eval_ids": _int,
        "eval_per_id": _int,
        "pairs_per_kind": _int,
        "split": {"enum": ["train", "victim_train", "eval"]},
    }
)
DATA = {
    "oneOf": [
        _obj({"toy": _TOY}, ["toy"]),
        _obj({"face_toy": _FACE_TOY}, ["face_toy"]),
        _obj(
            {
                "path": _path,
                "labels_path": _path,
                "format": {"enum": ["idx", "csv"]},
                "num_classes": {"type": "integer", "minimum": 2},
                "shape": {"type": "array", "items": _int, "minItems": 3, "maxItems": 3},
                "split": {"type": "string"},
            },
            ["path", "format", "num_classes"],
        ),
    ]
}
TRAIN = _obj(
    {
        "epochs": {"type": "integer", "minimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "milestones": {"type": "array", "items": _int},
        "lr_decay": _num,
        "weight_decay": {"type": "number", "minimum": 0},
        "momentum": {"type": "number", "minimum": 0},
        "mix_strategy": {"enum": list(MIX_KINDS)},
        "alpha": {"type": "number", "exclusiveMinimum": 0},
        "mask_side": {"type": ["integer", "null"]},
        "label_strategy": {"enum": list(STRATEGIES)},
        "smoothing": {"type": "number", "minimum": 0, "maximum": 1},
        "temperature": {"type": "number", "exclusiveMinimum": 0},
        "flip": {"type": "boolean"},
        "crop_pad": {"type": "integer", "minimum": 0},
        "robust_eps": {"type": "number", "minimum": 0},
        "robust_eps_255": {"type": "number", "minimum": 0},
        "margin": {"enum": list(MARGIN_KINDS)},
        "margin_warmup_epochs": {"type": "integer", "minimum": 0},
        "margin_lr_scale": {"type": "number", "exclusiveMinimum": 0},
    }
)
ATTACK = _obj(
    {
        "optimizer": {"enum": list(OPTIMIZERS)},
        "epsilon": {"type": "number", "minimum": 0, "maximum": 1},
        "epsilon_255": {"type": "number", "minimum": 0, "maximum": 255},
        "beta": {"type": "number", "minimum": 0},
        "beta_255": {"type": "number", "minimum": 0},
        "mu": {"type": "number", "minimum": 0},
        "steps": {"type": "integer", "minimum": 1},
        "p_t": {"type": "number", "minimum": 0, "maximum": 1},
        "objective": {"enum": list(OBJECTIVES)},
        "diversity": {"type": "boolean"},
        "fusion": {"enum": list(FUSIONS)},
        "resize_low": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
    }
)
MODEL = _obj({"arch": {"enum": sorted(ARCHITECTURES)}, "checkpoint": _path})
CHECKPOINTS = {
    "type": "object",
    "minProperties": 1,
    "additionalProperties": {"oneOf": [_path, {"type": "array", "items": _path, "minItems": 1}]},
}
SCHEMA = _obj(
    {
        "seed": _int,
        "out": _path,
        "data": DATA,
        "eval_data": DATA,
        "model": MODEL,
        "teacher": MODEL,
        "train": TRAIN,
        "attack": ATTACK,
        "attacks": {"type": "object", "minProperties": 1, "additionalProperties": ATTACK},
        "surrogates": CHECKPOINTS,
        "victims": CHECKPOINTS,
        "seeds": {"type": "array", "items": _int, "minItems": 1},
        "alphas": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
        "reports": {"type": "array", "items": _path, "minItems": 1},
        "max_samples": {"type": "integer", "minimum": 1},
    }
)


class ConfigError(ValueError):
    """Schema or consistency violation; ``path`` names the offending field."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path or '<root>'}: {message}")


def _field_path(error):
    return ".".join(str(p) for p in error.absolute_path)


def validate(doc):
    """Raise :class:`ConfigError` on the most relevant schema violation."""
    errors = sorted(jsonschema.Draft202012Validator(SCHEMA).iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = jsonschema.exceptions.best_match(errors)
        raise ConfigError(_field_path(err), err.message)
    for section in ["attack"] + [f"attacks.{k}" for k in doc.get("attacks", {})]:
        block = doc.get("attack") if section == "attack" else doc["attacks"][section.split(".", 1)[1]]
        if block is None:
            continue
        for key in ("epsilon", "beta"):
            if key in block and f"{key}_255" in block:
                raise ConfigError(f"{section}.{key}_255", f"give either {key} or {key}_255, not both")
    train = doc.get("train", {})
    if "robust_eps" in train and "robust_eps_255" in train:
        raise ConfigError("train.robust_eps_255", "give either robust_eps or robust_eps_255, not both")
    return doc


def load(path):
    """Read a config or a manifest; a manifest yields its recorded config."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"not valid JSON: {exc}") from None
    if isinstance(doc, dict) and "manifest_version" in doc:
        doc = doc["config"]
    return validate(doc)


def attack_config(block, command="attack"):
    """Resolve an attack block into an :class:`AttackConfig` with command defaults.

    Defaults: eps 16/255, beta 2/255, mu 1, p_t 0.7, 10 steps; the targeted
    logit objective defaults to 200 steps; face attacks use eps 8/255 and
    20 steps.
    """
    block = dict(block or {})
    optimizer = block.pop("optimizer", "mdi2_fgsm")
    for key in ("epsilon", "beta"):
        if f"{key}_255" in block:
            block[key] = block.pop(f"{key}_255") / 255
    if command == "face-attack":
        for key, value in FACE_DEFAULTS.items():
            block.setdefault(key, value)
        block.setdefault("objective", "embedding_dodge")
    elif block.get("objective") == "targeted_logit":
        block.setdefault("steps", 200)
    if optimizer != "mdi2_fgsm":
        block.setdefault("diversity", False)
    return optimizer, AttackConfig(**block)


def train_config(block, seed):
    block = dict(block or {})
    robust = block.pop("robust_eps", None)
    if "robust_eps_255" in block:
        robust = block.pop("robust_eps_255") / 255
    margin = MarginLossConfig(
        block.pop("margin", "plain_softmax"),
        warmup_epochs=block.pop("margin_warmup_epochs", 0),
        lr_scale=block.pop("margin_lr_scale", 1.0),
    )
    return TrainConfig(**block, seed=seed), robust, margin


def resolve(doc, command, seed=None, out=None, objective=None, optimizer=None):
    """Apply command-line overrides and fill defaults; returns the resolved document."""
    doc = copy.deepcopy(doc)
    if seed is not None:
        doc["seed"] = seed
    doc.setdefault("seed", 0)
    if objective is not None or optimizer is not None:
        block = doc.setdefault("attack", {})
        if objective is not None:
            block["objective"] = objective
        if optimizer is not None:
            block["optimizer"] = optimizer
    validate(doc)
    out_dir = out or os.environ.get(OUT_ENV) or doc.get("out") or f"runs/{command}"
    doc.pop("out", None)
    return doc, Path(out_dir)
