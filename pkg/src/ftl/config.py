"""Run configuration: defaults, presets, JSON loading and validation.

Resolution order is defaults < preset < config file < command-line overrides.
The resolved config is plain JSON so a run directory can be replayed exactly.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from .data import (DEFAULT_POOL, SHAPES, WARP_DOFS, GlyphPool, TripleSet, load_dataset_dir, load_idx,
                   make_triples)
from .errors import ConfigError, DimensionError, FTLError
from .losses import BalancedBceConfig, reconstruction_loss
from .network import PRESETS, EncoderDecoderConfig, preset_config
from .transform import CIRCLE, INTERVAL, TransformFamily

LOSS_KINDS = ("l1", "face", "bce")
DATASET_KINDS = ("synthetic", "idx", "dir")


@dataclass
class OptimSpec:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    milestones: list[int] = field(default_factory=list)


@dataclass
class LossSpec:
    kind: str = "l1"
    alpha: float = 0.85
    gamma: float = 0.98
    reg_weight: float = 0.1
    regularize: bool = False
    classify: bool = False
    class_weight: float = 10.0


@dataclass
class DatasetSpec:
    kind: str = "synthetic"
    count: int = 5000
    seed: int = 1
    shapes: list[str] = field(default_factory=lambda: list(DEFAULT_POOL))
    stroke_range: list[float] = field(default_factory=lambda: [0.16, 0.24])
    aspect_range: list[float] = field(default_factory=lambda: [0.85, 1.15])
    jitter: float = 0.0
    glyph_size: float = 1.0
    absolute_rotation: bool = True
    images: str | None = None
    labels: str | None = None
    path: str | None = None


@dataclass
class RunConfig:
    preset: str = "desk-mlp"
    model: str = "desk-mlp"
    family: Any = None
    optimizer: OptimSpec = field(default_factory=OptimSpec)
    batch: int = 64
    epochs: int = 10
    iterations: int | None = None
    loss: LossSpec = field(default_factory=LossSpec)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    out: str = "runs/default"
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 0

    def to_json(self) -> dict:
        return asdict(self)


# Hyperparameters per named run. "face-schedule" pairs the structural loss
# with the step-decay schedule on the convolutional desk model.
RUN_PRESETS: dict[str, dict] = {
    "mnist-mlp": {"model": "mnist-mlp", "batch": 128, "epochs": 200, "optimizer": {"lr": 1e-3},
                  "dataset": {"count": 12000}},
    "desk-mlp": {"model": "desk-mlp", "batch": 64, "epochs": 60, "optimizer": {"lr": 1e-3},
                 "dataset": {"count": 8000}},
    "desk-conv": {"model": "desk-conv", "batch": 64, "epochs": 20, "optimizer": {"lr": 1e-3},
                  "dataset": {"count": 8000}},
    "tiny-mlp": {"model": "tiny-mlp", "batch": 16, "epochs": 2, "dataset": {"count": 64}},
    "face-schedule": {"model": "desk-conv", "batch": 32, "iterations": 60000,
                      "optimizer": {"lr": 1e-4, "milestones": [30000, 50000]},
                      "loss": {"kind": "face", "alpha": 0.85}},
}


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in out:
            raise ConfigError(f"unknown config field {where!r}")
        if isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _merge(out[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def _build(cls, doc: dict, path: str):
    kwargs = {}
    nested = {"optimizer": OptimSpec, "loss": LossSpec, "dataset": DatasetSpec}
    for f in fields(cls):
        value = doc[f.name]
        if cls is RunConfig and f.name in nested:
            if not isinstance(value, dict):
                raise ConfigError(f"config field {path}{f.name!r} must be an object")
            value = _build(nested[f.name], value, f"{f.name}.")
        kwargs[f.name] = value
    return cls(**kwargs)


def load_family(value) -> TransformFamily | None:
    """``value`` is None, a family JSON object, a JSON string, or a file path."""
    if value is None:
        return None
    try:
        if isinstance(value, dict):
            return TransformFamily.from_json(value)
        text = str(value)
        if not text.lstrip().startswith("{"):
            try:
                text = Path(text).read_text()
            except OSError as exc:
                raise ConfigError(f"cannot read family file {value!r}: {exc}") from None
        return TransformFamily.loads(text)
    except ConfigError:
        raise
    except (FTLError, ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"malformed family: {exc}") from None


def _check(cond: bool, name: str, message: str) -> None:
    if not cond:
        raise ConfigError(f"config field {name!r}: {message}")


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and np.isfinite(v)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def validate(cfg: RunConfig) -> None:
    _check(isinstance(cfg.preset, str), "preset", "must be a string")
    _check(cfg.model in PRESETS, "model", f"unknown architecture {cfg.model!r}; choose from {PRESETS}")
    o = cfg.optimizer
    _check(_is_num(o.lr) and o.lr > 0, "optimizer.lr", f"must be a positive number, got {o.lr!r}")
    for name in ("beta1", "beta2"):
        v = getattr(o, name)
        _check(_is_num(v) and 0 <= v < 1, f"optimizer.{name}", f"must lie in [0, 1), got {v!r}")
    _check(isinstance(o.milestones, list) and all(_is_int(m) and m >= 0 for m in o.milestones),
           "optimizer.milestones", "must be a list of non-negative iterations")
    _check(_is_int(cfg.batch) and cfg.batch >= 2, "batch", f"must be an integer >= 2, got {cfg.batch!r}")
    _check(_is_int(cfg.epochs) and cfg.epochs >= 0, "epochs", f"must be a non-negative integer, got {cfg.epochs!r}")
    _check(cfg.iterations is None or (_is_int(cfg.iterations) and cfg.iterations >= 0), "iterations",
           f"must be null or a non-negative integer, got {cfg.iterations!r}")
    _check(_is_int(cfg.seed) and cfg.seed >= 0, "seed", f"must be a non-negative integer, got {cfg.seed!r}")
    _check(_is_int(cfg.log_every) and cfg.log_every >= 1, "log_every", "must be a positive integer")
    _check(_is_int(cfg.checkpoint_every) and cfg.checkpoint_every >= 0, "checkpoint_every",
           "must be a non-negative integer")
    _check(isinstance(cfg.out, str) and cfg.out != "", "out", "must be a non-empty path")

    loss = cfg.loss
    _check(loss.kind in LOSS_KINDS, "loss.kind", f"unknown loss {loss.kind!r}; choose from {LOSS_KINDS}")
    _check(_is_num(loss.alpha) and 0 <= loss.alpha <= 1, "loss.alpha", f"must lie in [0, 1], got {loss.alpha!r}")
    _check(_is_num(loss.gamma) and 0 < loss.gamma < 1, "loss.gamma", f"must lie in (0, 1), got {loss.gamma!r}")
    _check(_is_num(loss.reg_weight) and loss.reg_weight >= 0, "loss.reg_weight", "must be >= 0")
    _check(_is_num(loss.class_weight) and loss.class_weight >= 0, "loss.class_weight", "must be >= 0")
    _check(isinstance(loss.regularize, bool), "loss.regularize", "must be a boolean")
    _check(isinstance(loss.classify, bool), "loss.classify", "must be a boolean")

    d = cfg.dataset
    _check(d.kind in DATASET_KINDS, "dataset.kind", f"unknown dataset kind {d.kind!r}; choose from {DATASET_KINDS}")
    _check(_is_int(d.count) and d.count >= 2, "dataset.count", f"must be an integer >= 2, got {d.count!r}")
    _check(_is_int(d.seed) and d.seed >= 0, "dataset.seed", "must be a non-negative integer")
    _check(isinstance(d.shapes, list) and len(d.shapes) > 0 and all(s in SHAPES for s in d.shapes),
           "dataset.shapes", f"must be a non-empty list drawn from {SHAPES}")
    for name in ("stroke_range", "aspect_range"):
        r = getattr(d, name)
        _check(isinstance(r, list) and len(r) == 2 and all(_is_num(v) for v in r) and 0 < r[0] <= r[1],
               f"dataset.{name}", f"must be [lo, hi] with 0 < lo <= hi, got {r!r}")
    _check(_is_num(d.jitter) and d.jitter >= 0, "dataset.jitter", "must be >= 0")
    _check(_is_num(d.glyph_size) and d.glyph_size > 0, "dataset.glyph_size", "must be > 0")
    if d.kind == "idx":
        _check(isinstance(d.images, str), "dataset.images", "an idx dataset needs an images path")
    if d.kind == "dir":
        _check(isinstance(d.path, str), "dataset.path", "a dir dataset needs a path")

    family = load_family(cfg.family)
    if family is not None and d.kind != "dir":
        for dof in family.dofs:
            _check(dof.name in WARP_DOFS and dof.kind in (CIRCLE, INTERVAL), "family",
                   f"dof {dof.name!r} has no image-space warp; synthetic data needs dofs from {WARP_DOFS}")
    if loss.classify and d.kind == "idx":
        _check(isinstance(d.labels, str), "dataset.labels", "classification needs a labels file")


def resolve_config(doc: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Merge defaults, the preset named by overrides/doc, the file and overrides."""
    doc = doc or {}
    overrides = overrides or {}
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    preset = overrides.get("preset") or doc.get("preset") or "desk-mlp"
    if preset not in RUN_PRESETS:
        raise ConfigError(f"config field 'preset': unknown preset {preset!r}; choose from {tuple(RUN_PRESETS)}")
    merged = _merge(RunConfig().to_json(), RUN_PRESETS[preset])
    merged["preset"] = preset
    merged = _merge(merged, doc)
    merged = _merge(merged, overrides)
    merged["preset"] = preset
    cfg = _build(RunConfig, merged, "")
    validate(cfg)
    family = load_family(cfg.family)
    if family is not None:
        cfg.family = family.to_json()
    return cfg


def load_config_file(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None


# ---------------------------------------------------------------------------
# turning a config into objects
# ---------------------------------------------------------------------------

def model_config(cfg: RunConfig) -> EncoderDecoderConfig:
    return preset_config(cfg.model, load_family(cfg.family))


def loss_function(cfg: RunConfig):
    bce = BalancedBceConfig(gamma=cfg.loss.gamma) if cfg.loss.kind == "bce" else None
    return reconstruction_loss(cfg.loss.kind, cfg.loss.alpha, bce)


def glyph_pool(spec: DatasetSpec, images=None, labels=None) -> GlyphPool:
    return GlyphPool(tuple(spec.shapes), tuple(spec.stroke_range), tuple(spec.aspect_range), images=images,
                     labels=labels, absolute_rotation=spec.absolute_rotation, jitter=spec.jitter,
                     size=spec.glyph_size)


def load_triples(spec: DatasetSpec, family: TransformFamily, input_shape: tuple[int, int],
                 seed_override: int | None = None) -> TripleSet:
    """Materialize the dataset a config describes (data errors propagate)."""
    seed = spec.seed if seed_override is None else seed_override
    side = input_shape[0]
    if spec.kind == "synthetic":
        return make_triples(seed, spec.count, family, glyph_pool(spec), side)
    if spec.kind == "idx":
        data = load_idx(spec.images, spec.labels)
        if data.images.shape[1:] != tuple(input_shape):
            raise DimensionError(f"IDX images are {data.images.shape[1:]}, model expects {tuple(input_shape)}")
        return make_triples(seed, spec.count, family, glyph_pool(spec, data.images, data.labels), side)
    triples, dir_family, _ = load_dataset_dir(spec.path)
    if dir_family.to_json() != family.to_json():
        raise ConfigError(f"dataset {spec.path} was generated for a different family than the model")
    if triples.x.shape[1:] != tuple(input_shape):
        raise DimensionError(f"dataset images are {triples.x.shape[1:]}, model expects {tuple(input_shape)}")
    return triples
