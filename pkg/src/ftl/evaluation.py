"""Measurements on trained models and machine-readable reports."""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .data import TripleSet, warp
from .errors import DomainError, ParameterError
from .losses import l1_loss
from .tensor import Tensor, no_grad
from .transform import CIRCLE, INTERVAL, TransformFamily, invariant_signature

REPORT_SCHEMA_VERSION = 1
CURVE_COLUMNS = ("sweep_value", "same_mean", "same_std", "diff_mean", "diff_std")


def config_hash(config: Any) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    # sqrt of the product, not product of sqrts: a self-pair gives exactly 1
    denom = np.sqrt(float(np.dot(a, a)) * float(np.dot(b, b)))
    return float(np.dot(a, b)) / denom if denom > 0 else 0.0


def l2_distance(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b))


METRICS: dict[str, Callable[[np.ndarray, np.ndarray], float]] = {"cosine": cosine_similarity, "l2": l2_distance}


@dataclass
class StabilityCurve:
    dof: str
    metric: str
    sweep_values: list[float]
    same_mean: list[float]
    same_std: list[float]
    diff_mean: list[float]
    diff_std: list[float]
    train_range: tuple[float, float]
    same_count: int
    diff_count: int

    def rows(self):
        return zip(self.sweep_values, self.same_mean, self.same_std, self.diff_mean, self.diff_std)

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["train_range"] = list(self.train_range)
        return doc


def dof_train_range(family: TransformFamily, dof: str) -> tuple[float, float]:
    spec = family[dof]
    if spec.kind == CIRCLE:
        return (0.0, 2.0 * np.pi)
    if spec.kind == INTERVAL:
        return (spec.lo, spec.hi)
    raise ParameterError(f"dof {dof!r} ({spec.kind}) cannot be swept in image space")


def check_grid(family: TransformFamily, dof: str, grid: Sequence[float]) -> None:
    spec = family[dof]
    bad = [g for g in grid if not np.isfinite(g)]
    if spec.kind == INTERVAL:
        bad += [g for g in grid if np.isfinite(g) and not spec.lo <= g <= spec.hi]
    if bad:
        raise DomainError(f"grid values {bad} outside the domain of dof {dof!r}")


def _signatures(model, images: np.ndarray) -> np.ndarray:
    with no_grad():
        return invariant_signature(model.family, model.encode(images)).data


def stability_sweep(model, family: TransformFamily, identities: np.ndarray, dof: str,
                    grid: Sequence[float], metric: str = "cosine", frames: Sequence[float] | None = None
                    ) -> StabilityCurve:
    """Compare invariant signatures of warped images with unwarped ones.

    Same-identity pairs compare ``base_i`` with ``warp(base_i, g)``; different
    identity pairs compare ``warp(base_i, g)`` with every ``base_j``, ``j != i``.
    """
    identities = np.asarray(identities, dtype=np.float64)
    if len(identities) < 2:
        raise ParameterError("stability_sweep needs at least two identities")
    if metric not in METRICS:
        raise ParameterError(f"unknown metric {metric!r}")
    grid = [float(g) for g in grid]
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ParameterError("sweep values must be strictly increasing")
    train_range = dof_train_range(family, dof)
    fn = METRICS[metric]
    frames = np.zeros(len(identities)) if frames is None else np.asarray(frames)
    base = _signatures(model, identities)
    m = len(identities)
    same_mean, same_std, diff_mean, diff_std = [], [], [], []
    for g in grid:
        warped = np.stack([warp(img, frame=f, **{dof: g}) for img, f in zip(identities, frames)])
        sig = _signatures(model, warped)
        same = [fn(base[i], sig[i]) for i in range(m)]
        diff = [fn(sig[i], base[j]) for i in range(m) for j in range(m) if j != i]
        same_mean.append(float(np.mean(same)))
        same_std.append(float(np.std(same)))
        diff_mean.append(float(np.mean(diff)))
        diff_std.append(float(np.std(diff)))
    return StabilityCurve(dof, metric, grid, same_mean, same_std, diff_mean, diff_std, train_range,
                          same_count=m, diff_count=m * (m - 1))


def per_item_losses(pred: np.ndarray, target: np.ndarray, loss: Callable = l1_loss) -> np.ndarray:
    with no_grad():
        return np.array([loss(Tensor(p[None]), Tensor(t[None])).item() for p, t in zip(pred, target)])


def transformed_reconstruction_error(model, triples: TripleSet, loss: Callable = l1_loss,
                                     batch: int = 250) -> dict:
    """Mean loss of ``forward_transformed(x, theta)`` against ``x_t``, next to the
    identity baseline ``loss(x, x_t)``."""
    preds = []
    with no_grad():
        for s in range(0, len(triples), batch):
            part = triples.subset(np.arange(s, min(s + batch, len(triples))))
            preds.append(np.asarray(model.forward_transformed(part.x, part.params).data))
    pred = np.concatenate(preds) if preds else np.zeros_like(triples.x_t)
    model_loss = per_item_losses(pred, triples.x_t, loss)
    baseline = per_item_losses(triples.x, triples.x_t, loss)
    return {
        "mean": float(model_loss.mean()) if len(model_loss) else 0.0,
        "baseline_mean": float(baseline.mean()) if len(baseline) else 0.0,
        "rows": [{"index": i, "model": float(a), "baseline": float(b)}
                 for i, (a, b) in enumerate(zip(model_loss, baseline))],
    }


def plain_reconstruction_error(model, images: np.ndarray, loss: Callable = l1_loss, batch: int = 250) -> float:
    preds = []
    with no_grad():
        for s in range(0, len(images), batch):
            preds.append(model.reconstruct(images[s : s + batch]).data)
    return float(per_item_losses(np.concatenate(preds), images, loss).mean())


def evaluate_classifier(model, head, images: np.ndarray, labels: np.ndarray, classes: int | None = None,
                        features: str = "signature") -> dict:
    """Argmax accuracy and a ``K x K`` confusion matrix (rows: true class)."""
    from .train import encode_features

    labels = np.asarray(labels, dtype=np.int64)
    with no_grad():
        feats = encode_features(model, images, features)
        scores = head(Tensor(feats)).data
    k = classes or scores.shape[1]
    pred = scores.argmax(axis=1)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    correct = int((pred == labels).sum())
    total = len(labels)
    accuracy = correct / total if total else 0.0
    return {"accuracy": accuracy, "error": 1.0 - accuracy, "correct": correct, "total": total,
            "confusion": confusion.tolist()}


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    run_id: str
    seed: int
    preset: str
    config_hash: str
    metrics: dict[str, Any] = field(default_factory=dict)
    curves: list[StabilityCurve] = field(default_factory=list)
    artifacts: list[str] = field(default_factory=list)

    def add_metric(self, name: str, value) -> None:
        self.metrics[name] = {"value": value, "config_hash": self.config_hash}

    def to_json(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "run_id": self.run_id,
            "seed": self.seed,
            "preset": self.preset,
            "config_hash": self.config_hash,
            "metrics": self.metrics,
            "curves": [c.to_json() for c in self.curves],
            "artifacts": self.artifacts,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "EvalReport":
        curves = []
        for c in doc.get("curves", []):
            c = dict(c)
            c["train_range"] = tuple(c["train_range"])
            curves.append(StabilityCurve(**c))
        return cls(doc["run_id"], doc["seed"], doc["preset"], doc["config_hash"], doc.get("metrics", {}),
                   curves, list(doc.get("artifacts", [])))


def curve_csv(curve: StabilityCurve) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CURVE_COLUMNS)
    for row in curve.rows():
        writer.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def emit_report(report: EvalReport, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for curve in report.curves:
        name = f"curve_{curve.dof}_{curve.metric}.csv"
        (out / name).write_text(curve_csv(curve))
        if name not in report.artifacts:
            report.artifacts.append(name)
        written.append(out / name)
    path = out / "report.json"
    path.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    return [path] + written


def load_report_schema() -> dict:
    return json.loads((Path(__file__).with_name("report.schema.json")).read_text())
