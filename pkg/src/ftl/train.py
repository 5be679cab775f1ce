"""Minibatch Adam on the transformed-reconstruction objective."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import TripleSet
from .errors import DegenerateBatchError, ParameterError
from .losses import combined_classification_loss, invariance_regularizer
from .network import ClassifierHead, EncoderDecoder
from .optim import Adam, step_decay
from .tensor import Tensor, no_grad
from .transform import BlockTransform, apply, build_batch_transform, invariant_signature


@dataclass
class TrainSettings:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    batch: int = 64
    epochs: int = 10
    iterations: int | None = None
    milestones: tuple[int, ...] = ()
    reg_weight: float = 0.0
    class_weight: float = 10.0
    head_features: str = "signature"
    log_every: int = 50
    seed: int = 0


@dataclass
class TrainHistory:
    rows: list[dict] = field(default_factory=list)
    steps: int = 0

    COLUMNS = ("step", "loss", "recon", "reg", "cls", "lr", "wall_time")


def _rows(blocks: BlockTransform, idx: np.ndarray) -> BlockTransform:
    return BlockTransform(blocks.family, tuple(b[idx] for b in blocks.blocks))


def train(model: EncoderDecoder, triples: TripleSet, loss_fn: Callable, settings: TrainSettings,
          head: ClassifierHead | None = None, optimizer: Adam | None = None,
          on_step: Callable[[int], None] | None = None) -> TrainHistory:
    """Minimize ``loss(d(F_theta e(x)), x_t)`` (+ regularizer, + classification).

    Iteration order is a pure function of ``settings.seed``. Partial final
    batches smaller than 2 rows are dropped (batchnorm needs statistics).
    """
    params = model.parameters() + (head.parameters() if head is not None else [])
    opt = optimizer or Adam(params, lr=settings.lr, beta1=settings.beta1, beta2=settings.beta2)
    history = TrainHistory()
    n = len(triples)
    if settings.batch < 2:
        raise ParameterError(f"batch must be >= 2 for batchnorm, got {settings.batch}")
    if n == 0:
        return history
    if n < 2:
        raise DegenerateBatchError("training needs at least 2 triples")
    all_blocks = build_batch_transform(model.family, triples.params)
    rng = np.random.default_rng(settings.seed)
    per_epoch = max(1, -(-n // settings.batch))
    total = settings.iterations if settings.iterations is not None else settings.epochs * per_epoch
    start = time.perf_counter()
    step = 0
    order = np.empty(0, dtype=np.int64)
    while step < total:
        if len(order) < 2:
            order = rng.permutation(n)
        idx, order = order[: settings.batch], order[settings.batch :]
        if len(idx) < 2:
            continue
        opt.lr = step_decay(settings.lr, step, settings.milestones)
        opt.zero_grad()
        x, x_t = Tensor(triples.x[idx]), Tensor(triples.x_t[idx])
        code = model.encode(x, train=True)
        pred = model.decode(apply(_rows(all_blocks, idx), code), train=True)
        recon = loss_fn(pred, x_t)
        loss = recon
        reg_val = cls_val = 0.0
        if settings.reg_weight > 0:
            reg = invariance_regularizer(model.family, code, model.encode(x_t, train=True))
            loss = loss + settings.reg_weight * reg
            reg_val = reg.item()
        if head is not None:
            feats = invariant_signature(model.family, code) if settings.head_features == "signature" else code
            scores = head(feats, train=True)
            before = loss.item()
            loss = combined_classification_loss(loss, scores, triples.label[idx], settings.class_weight)
            cls_val = (loss.item() - before) / settings.class_weight if settings.class_weight else 0.0
        loss.backward()
        opt.step()
        step += 1
        if on_step is not None:
            on_step(step)
        if step % settings.log_every == 0 or step == total:
            history.rows.append({"step": step, "loss": loss.item(), "recon": recon.item(), "reg": reg_val,
                                 "cls": cls_val, "lr": opt.lr, "wall_time": time.perf_counter() - start})
    history.steps = step
    return history


def train_head(head: ClassifierHead, features: np.ndarray, labels: np.ndarray, epochs: int = 60,
               batch: int = 64, lr: float = 1e-3, seed: int = 0) -> list[float]:
    """Fit a classifier head on frozen features with softmax cross-entropy."""
    from .tensor import cross_entropy

    opt = Adam(head.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    losses = []
    n = len(features)
    for _ in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch):
            idx = order[s : s + batch]
            if len(idx) < 2:
                continue
            opt.zero_grad()
            loss = cross_entropy(head(Tensor(features[idx]), train=True), labels[idx])
            loss.backward()
            opt.step()
            losses.append(loss.item())
    return losses


def encode_features(model: EncoderDecoder, images: np.ndarray, kind: str = "signature",
                    batch: int = 500) -> np.ndarray:
    """Eval-mode codes or invariant signatures, computed in fixed-size chunks."""
    out = []
    with no_grad():
        for s in range(0, len(images), batch):
            code = model.encode(images[s : s + batch])
            out.append((invariant_signature(model.family, code) if kind == "signature" else code).data)
    return np.concatenate(out)
