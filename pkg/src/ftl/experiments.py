"""Desk-scale experiments: disentangling, invariance margin, invariant classification."""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import GlyphPool, identity_triples, make_labeled_glyphs, make_rotated_set, make_triples, warp
from .evaluation import (evaluate_classifier, plain_reconstruction_error,
                         stability_sweep, transformed_reconstruction_error)
from .losses import l1_loss
from .network import ClassifierHead, EncoderDecoder, HeadConfig, preset_config
from .tensor import no_grad
from .train import TrainSettings, encode_features, train, train_head
from .transform import rotation_family


@dataclass
class DeskSettings:
    preset: str = "desk-mlp"
    train_count: int = 8000
    test_count: int = 500
    epochs: int = 60
    batch: int = 64
    lr: float = 1e-3
    seed: int = 0
    data_seed: int = 1
    test_seed: int = 2
    sweep_frames: int = 8
    sweep_inputs: int = 10


def rotation_frame_match(model: EncoderDecoder, images: np.ndarray, frames: np.ndarray, grid) -> dict:
    """Decode a rotation sweep and check each decoded frame against the
    ground-truth warps: a frame matches when its L1 to the warp at the same
    angle is lower than to every other angle's warp."""
    family = model.family
    identity = family.identity_params()
    hits = total = 0
    with no_grad():
        for img, frame in zip(images, frames):
            batch = np.repeat(img[None], len(grid), axis=0)
            decoded = model.forward_transformed(batch, [identity.replace(rotation=g) for g in grid]).data
            truth = np.stack([warp(img, rotation=g, frame=frame) for g in grid])
            for j in range(len(grid)):
                dists = np.abs(truth - decoded[j]).mean(axis=(1, 2))
                hits += int(np.argmin(dists) == j and np.sum(dists == dists[j]) == 1)
                total += 1
    return {"matched": hits, "total": total, "fraction": hits / total if total else 0.0}


def desk_disentangle(settings: DeskSettings = DeskSettings(), log=print) -> dict:
    model = EncoderDecoder(preset_config(settings.preset), seed=settings.seed)
    family = model.family
    start = time.perf_counter()
    train_set = make_triples(settings.data_seed, settings.train_count, family)
    test_set = make_triples(settings.test_seed, settings.test_count, family)
    history = train(model, train_set, l1_loss,
                    TrainSettings(lr=settings.lr, batch=settings.batch, epochs=settings.epochs,
                                  seed=settings.seed, log_every=500))
    train_time = time.perf_counter() - start
    log(f"trained {history.steps} steps in {train_time:.1f}s")
    err = transformed_reconstruction_error(model, test_set)
    plain = plain_reconstruction_error(model, test_set.x)
    grid = [2.0 * math.pi * k / settings.sweep_frames for k in range(settings.sweep_frames)]
    ids = test_set.x[: settings.sweep_inputs]
    frames = test_set.frame[: settings.sweep_inputs]
    match = rotation_frame_match(model, ids, frames, grid)
    curve = stability_sweep(model, family, ids, "rotation", np.linspace(0.0, 2.0 * math.pi, 17),
                            frames=frames)
    return {
        "model": model,
        "history": history,
        "train_seconds": train_time,
        "transformed_l1": err["mean"],
        "identity_baseline_l1": err["baseline_mean"],
        "plain_l1": plain,
        "frame_match": match,
        "curve": curve,
        "settings": asdict(settings),
    }


@dataclass
class RotClassSettings:
    preset: str = "desk-mlp"
    train_count: int = 1000
    test_count: int = 1000
    triples_per_image: int = 6
    epochs: int = 40
    batch: int = 64
    lr: float = 1e-3
    reg_weight: float = 0.1
    head_epochs: int = 150
    head_hidden: int = 128
    rotation_reps: int = 5
    jitter: float = 0.07
    glyph_size: float = 1.3
    joint: bool = True
    seed: int = 0
    data_seed: int = 11
    test_seed: int = 12


def _fit_head(model, settings, features_kind, images, labels, seed):
    feats = encode_features(model, images, features_kind)
    head = ClassifierHead(HeadConfig(in_dim=feats.shape[1], hidden=settings.head_hidden, classes=10,
                                     features=features_kind), seed=seed)
    train_head(head, feats, labels, epochs=settings.head_epochs, seed=seed)
    return head


def rotated_classification(settings: RotClassSettings = RotClassSettings(), log=print) -> dict:
    """Invariant-signature head vs raw-code head on rotated glyphs.

    Both encoders share architecture, data, and iteration budget. The first
    trains through the feature transform with the invariance regularizer; the
    second is a plain autoencoder (target ``x``, identity transform).
    """
    start = time.perf_counter()
    source = GlyphPool(jitter=settings.jitter, size=settings.glyph_size)
    train_imgs, train_labels = make_labeled_glyphs(settings.data_seed, settings.train_count, source)
    test_imgs, test_labels = make_labeled_glyphs(settings.test_seed, settings.test_count, source)
    rng = np.random.default_rng(settings.test_seed + 1000)
    train_rot, _ = make_rotated_set(train_imgs, rng)
    test_rot, _ = make_rotated_set(test_imgs, rng)
    pool = GlyphPool(images=train_imgs, labels=train_labels)

    results = {}
    for name, use_ftl in (("signature", True), ("code", False)):
        family = rotation_family(settings.rotation_reps) if settings.rotation_reps else None
        model = EncoderDecoder(preset_config(settings.preset, family), seed=settings.seed)
        triples = make_triples(settings.data_seed, settings.train_count * settings.triples_per_image,
                               model.family, pool)
        if not use_ftl:
            triples = identity_triples(triples.x, model.family, triples.label)
        head = None
        if settings.joint:
            in_dim = model.family.signature_dim if use_ftl else model.family.feature_dim
            head = ClassifierHead(HeadConfig(in_dim=in_dim, hidden=settings.head_hidden, classes=10,
                                             features=name), seed=settings.seed)
        train(model, triples, l1_loss,
              TrainSettings(lr=settings.lr, batch=settings.batch, epochs=settings.epochs, seed=settings.seed,
                            reg_weight=settings.reg_weight if use_ftl else 0.0, head_features=name,
                            log_every=1000), head=head)
        if head is None:
            head = _fit_head(model, settings, name, train_rot, train_labels, settings.seed)
        metrics = evaluate_classifier(model, head, test_rot, test_labels, classes=10, features=name)
        train_metrics = evaluate_classifier(model, head, train_rot, train_labels, classes=10, features=name)
        log(f"{name}: test error {metrics['error']:.4f} train error {train_metrics['error']:.4f}")
        results[name] = {"test": metrics, "train_error": train_metrics["error"], "model": model, "head": head}
    results["seconds"] = time.perf_counter() - start
    results["settings"] = asdict(settings)
    results["test_images"], results["test_labels"] = test_rot, test_labels
    return results
