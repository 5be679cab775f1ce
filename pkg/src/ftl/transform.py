"""The feature transform layer: block-diagonal rotations acting on codes.

A :class:`TransformFamily` lists degrees of freedom. Each one owns
``repetitions`` contiguous subvectors of size ``block_dim``, and all of them
are rotated by the same matrix. Circle dofs are plain 2D rotations. Interval
dofs are embedded on a half circle. Sphere dofs are 3D rotations built from
azimuth and elevation, with an optional roll so that composition stays closed.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .errors import DimensionError, DomainError, ParameterError
from .tensor import Tensor, as_tensor, concat, take

CIRCLE = "circle"
INTERVAL = "interval"
SPHERE = "sphere"
_KINDS = (CIRCLE, INTERVAL, SPHERE)
TWO_PI = 2.0 * math.pi


# ---------------------------------------------------------------------------
# rotation primitives
# ---------------------------------------------------------------------------

def _check_finite(*values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise ParameterError(f"angle must be finite, got {v!r}")


def rotation_2d(angle: float) -> np.ndarray:
    angle = float(angle)
    _check_finite(angle)
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def rotation_3d(azimuth: float, elevation: float, roll: float = 0.0) -> np.ndarray:
    """``R_roll @ R_elevation @ R_azimuth``.

    Azimuth turns about the third axis, elevation turns in the 1-3 plane and
    roll about the first axis. With ``roll == 0`` this is the no-roll head pose
    rotation.
    """
    azimuth, elevation, roll = float(azimuth), float(elevation), float(roll)
    _check_finite(azimuth, elevation, roll)
    ca, sa = math.cos(azimuth), math.sin(azimuth)
    ce, se = math.cos(elevation), math.sin(elevation)
    r_az = np.array([[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]])
    r_el = np.array([[ce, 0.0, se], [0.0, 1.0, 0.0], [-se, 0.0, ce]])
    out = r_el @ r_az
    if roll != 0.0:
        cr, sr = math.cos(roll), math.sin(roll)
        out = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]]) @ out
    return out


def angles_from_rotation_3d(r: np.ndarray) -> tuple[float, float, float]:
    """Inverse of :func:`rotation_3d`: ``(azimuth, elevation, roll)``."""
    cos_el = math.hypot(r[0, 0], r[0, 1])
    elevation = math.atan2(r[0, 2], cos_el)
    # at gimbal lock only azimuth + roll is determined; roll absorbs it
    azimuth = math.atan2(-r[0, 1], r[0, 0]) if cos_el > 1e-12 else 0.0
    rest = r @ rotation_3d(azimuth, elevation).T
    roll = math.atan2(rest[2, 1], rest[1, 1])
    return azimuth, elevation, roll


def map_interval_to_angle(value: float, lo: float, hi: float) -> float:
    """Affine map of ``[lo, hi]`` onto ``[0, pi]``."""
    if not lo < hi:
        raise ParameterError(f"interval needs lo < hi, got [{lo}, {hi}]")
    if not lo <= value <= hi:
        raise DomainError(f"value {value} outside interval [{lo}, {hi}]")
    return (value - lo) / (hi - lo) * math.pi


# ---------------------------------------------------------------------------
# families and parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DofSpec:
    name: str
    kind: str
    block_dim: int
    repetitions: int = 1
    lo: float | None = None
    hi: float | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ParameterError(f"dof {self.name!r}: unknown domain kind {self.kind!r}")
        expected = 3 if self.kind == SPHERE else 2
        if self.block_dim != expected:
            raise ParameterError(
                f"dof {self.name!r}: {self.kind} domain needs block_dim {expected}, got {self.block_dim}"
            )
        if self.repetitions < 1:
            raise ParameterError(f"dof {self.name!r}: repetitions must be positive")
        if self.kind == INTERVAL:
            if self.lo is None or self.hi is None or not self.lo < self.hi:
                raise ParameterError(f"dof {self.name!r}: interval needs lo < hi, got [{self.lo}, {self.hi}]")
        elif self.lo is not None or self.hi is not None:
            raise ParameterError(f"dof {self.name!r}: only interval domains carry bounds")

    @property
    def width(self) -> int:
        return self.block_dim * self.repetitions

    @property
    def signature_width(self) -> int:
        r = self.repetitions
        return r * (r + 1) // 2

    @property
    def identity(self):
        """Parameter value whose block is the identity matrix."""
        if self.kind == CIRCLE:
            return 0.0
        if self.kind == INTERVAL:
            return 0.5 * (self.lo + self.hi)
        return (0.0, 0.0, 0.0)

    def to_json(self) -> dict:
        domain: dict[str, Any] = {"kind": self.kind}
        if self.kind == INTERVAL:
            domain["lo"] = self.lo
            domain["hi"] = self.hi
        return {"name": self.name, "domain": domain, "block_dim": self.block_dim,
                "repetitions": self.repetitions}

    @classmethod
    def from_json(cls, doc: Mapping) -> "DofSpec":
        try:
            domain = doc["domain"]
            return cls(name=str(doc["name"]), kind=domain["kind"], block_dim=int(doc["block_dim"]),
                       repetitions=int(doc["repetitions"]), lo=domain.get("lo"), hi=domain.get("hi"))
        except (KeyError, TypeError) as exc:
            raise ParameterError(f"malformed dof entry {doc!r}: {exc}") from None


@dataclass(frozen=True)
class TransformFamily:
    dofs: tuple[DofSpec, ...]
    feature_dim: int = -1

    def __post_init__(self):
        object.__setattr__(self, "dofs", tuple(self.dofs))
        total = sum(d.width for d in self.dofs)
        if self.feature_dim == -1:
            object.__setattr__(self, "feature_dim", total)
        if not self.dofs:
            raise ParameterError("a family needs at least one dof")
        if self.feature_dim != total:
            raise ParameterError(f"feature_dim {self.feature_dim} != sum of dof widths {total}")
        names = [d.name for d in self.dofs]
        if len(set(names)) != len(names):
            raise ParameterError(f"duplicate dof names in {names}")

    def __getitem__(self, name: str) -> DofSpec:
        for d in self.dofs:
            if d.name == name:
                return d
        raise KeyError(name)

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.dofs]

    @property
    def offsets(self) -> list[int]:
        out, pos = [], 0
        for d in self.dofs:
            out.append(pos)
            pos += d.width
        return out

    @property
    def signature_dim(self) -> int:
        return sum(d.signature_width for d in self.dofs)

    def identity_params(self) -> "TransformParams":
        return TransformParams({d.name: d.identity for d in self.dofs})

    def to_json(self) -> dict:
        return {"dofs": [d.to_json() for d in self.dofs], "feature_dim": self.feature_dim}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)

    @classmethod
    def from_json(cls, doc: Mapping) -> "TransformFamily":
        if not isinstance(doc, Mapping) or "dofs" not in doc:
            raise ParameterError("family document needs a 'dofs' list")
        dofs = tuple(DofSpec.from_json(d) for d in doc["dofs"])
        return cls(dofs, int(doc.get("feature_dim", sum(d.width for d in dofs))))

    @classmethod
    def loads(cls, text: str) -> "TransformFamily":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParameterError(f"family JSON does not parse: {exc}") from None
        return cls.from_json(doc)


def _normalize_value(dof: DofSpec, value) -> float | tuple[float, float, float]:
    if dof.kind == SPHERE:
        vals = tuple(float(v) for v in np.atleast_1d(value))
        if len(vals) == 2:
            vals = vals + (0.0,)
        if len(vals) != 3:
            raise ParameterError(f"sphere dof {dof.name!r} needs (azimuth, elevation[, roll]), got {value!r}")
        _check_finite(*vals)
        return vals
    v = float(value)
    _check_finite(v)
    if dof.kind == INTERVAL and not dof.lo <= v <= dof.hi:
        raise DomainError(f"dof {dof.name!r}: value {v} outside [{dof.lo}, {dof.hi}]")
    return v


@dataclass(frozen=True)
class TransformParams:
    values: Mapping[str, Any] = field(default_factory=dict)

    def __getitem__(self, name: str):
        return self.values[name]

    def replace(self, **updates) -> "TransformParams":
        merged = dict(self.values)
        merged.update(updates)
        return TransformParams(merged)

    def resolved(self, family: TransformFamily) -> dict[str, Any]:
        missing = [n for n in family.names if n not in self.values]
        if missing:
            raise ParameterError(f"missing value for dof(s) {missing}")
        return {d.name: _normalize_value(d, self.values[d.name]) for d in family.dofs}

    def to_json(self) -> dict:
        return {k: (list(v) if isinstance(v, (tuple, list)) else v) for k, v in self.values.items()}


# ---------------------------------------------------------------------------
# the operator
# ---------------------------------------------------------------------------

def dof_block(dof: DofSpec, value) -> np.ndarray:
    value = _normalize_value(dof, value)
    if dof.kind == CIRCLE:
        return rotation_2d(value)
    if dof.kind == INTERVAL:
        # offset so the interval midpoint (no change) lands on the identity
        return rotation_2d(map_interval_to_angle(value, dof.lo, dof.hi) - 0.5 * math.pi)
    return rotation_3d(*value)


@dataclass(frozen=True)
class BlockTransform:
    """One rotation per dof, shared by that dof's tied subvectors.

    ``blocks[i]`` is ``[k, k]`` for a single operator or ``[N, k, k]`` for a
    per-row batch of operators.
    """

    family: TransformFamily
    blocks: tuple[np.ndarray, ...]

    @property
    def batched(self) -> bool:
        return self.blocks[0].ndim == 3

    def dense(self) -> np.ndarray:
        if self.batched:
            raise DimensionError("dense() is only defined for a single operator")
        out = np.zeros((self.family.feature_dim, self.family.feature_dim))
        for dof, off, block in zip(self.family.dofs, self.family.offsets, self.blocks):
            w = dof.width
            out[off : off + w, off : off + w] = np.kron(np.eye(dof.repetitions), block)
        return out

    def transpose(self) -> "BlockTransform":
        return BlockTransform(self.family, tuple(np.swapaxes(b, -1, -2) for b in self.blocks))


def build_block_transform(family: TransformFamily, params: TransformParams) -> BlockTransform:
    values = params.resolved(family)
    return BlockTransform(family, tuple(dof_block(d, values[d.name]) for d in family.dofs))


def build_batch_transform(family: TransformFamily, params: Sequence[TransformParams]) -> BlockTransform:
    """Stack one operator per row so a minibatch can carry distinct transforms."""
    if not params:
        raise ParameterError("empty parameter batch")
    resolved = [p.resolved(family) for p in params]
    blocks = tuple(
        np.stack([dof_block(d, r[d.name]) for r in resolved]) for d in family.dofs
    )
    return BlockTransform(family, blocks)


def _split(family: TransformFamily, e: Tensor):
    if e.ndim != 2 or e.shape[1] != family.feature_dim:
        raise DimensionError(f"expected codes of shape [N, {family.feature_dim}], got {e.shape}")
    n = e.shape[0]
    for dof, off in zip(family.dofs, family.offsets):
        yield dof, e[:, off : off + dof.width].reshape(n, dof.repetitions, dof.block_dim)


def apply(op: BlockTransform, e) -> Tensor:
    """``y = F e`` row-wise, via reshape to subvectors and small matmuls."""
    e = as_tensor(e)
    n = e.shape[0] if e.ndim == 2 else None
    if op.batched and op.blocks[0].shape[0] != n:
        raise DimensionError(f"{op.blocks[0].shape[0]} operators for {n} rows")
    parts = []
    for (dof, sub), block in zip(_split(op.family, e), op.blocks):
        rt = np.swapaxes(block, -1, -2)
        parts.append((sub @ Tensor(rt)).reshape(n, dof.width))
    return parts[0] if len(parts) == 1 else concat(parts, axis=1)


def compose(family: TransformFamily, second: TransformParams, first: TransformParams) -> TransformParams:
    """Parameters of "apply ``first``, then ``second``".

    Interval dofs add in angle space. A result that leaves the interval has no
    representation and raises :class:`DomainError`.
    """
    a, b = first.resolved(family), second.resolved(family)
    out: dict[str, Any] = {}
    for dof in family.dofs:
        v1, v2 = a[dof.name], b[dof.name]
        if dof.kind == CIRCLE:
            out[dof.name] = (v1 + v2) % TWO_PI
        elif dof.kind == INTERVAL:
            v = v1 + v2 - dof.identity
            if not dof.lo <= v <= dof.hi:
                raise DomainError(f"dof {dof.name!r}: composition {v} leaves [{dof.lo}, {dof.hi}]")
            out[dof.name] = v
        else:
            out[dof.name] = angles_from_rotation_3d(rotation_3d(*v2) @ rotation_3d(*v1))
    return TransformParams(out)


def invert(family: TransformFamily, params: TransformParams) -> TransformParams:
    values = params.resolved(family)
    out: dict[str, Any] = {}
    for dof in family.dofs:
        v = values[dof.name]
        if dof.kind == CIRCLE:
            out[dof.name] = (-v) % TWO_PI
        elif dof.kind == INTERVAL:
            out[dof.name] = 2.0 * dof.identity - v
        else:
            out[dof.name] = angles_from_rotation_3d(rotation_3d(*v).T)
    return TransformParams(out)


def invariant_signature(family: TransformFamily, e) -> Tensor:
    """Self and pairwise inner products of each dof's tied subvectors.

    Columns run dof by dof; within a dof, pairs ``(i, j)`` with ``i <= j`` in
    lexicographic order.
    """
    e = as_tensor(e)
    parts = []
    for dof, sub in _split(family, e):
        r = dof.repetitions
        gram = (sub @ sub.transpose(0, 2, 1)).reshape(e.shape[0], r * r)
        iu, ju = np.triu_indices(r)
        parts.append(take(gram, iu * r + ju, axis=1))
    return parts[0] if len(parts) == 1 else concat(parts, axis=1)


# ---------------------------------------------------------------------------
# sampling and audit
# ---------------------------------------------------------------------------

def random_params(family: TransformFamily, rng: np.random.Generator) -> TransformParams:
    out: dict[str, Any] = {}
    for dof in family.dofs:
        if dof.kind == CIRCLE:
            out[dof.name] = float(rng.uniform(0.0, TWO_PI))
        elif dof.kind == INTERVAL:
            out[dof.name] = float(rng.uniform(dof.lo, dof.hi))
        else:
            out[dof.name] = (float(rng.uniform(-math.pi, math.pi)),
                             float(rng.uniform(-0.5 * math.pi, 0.5 * math.pi)), 0.0)
    return TransformParams(out)


def random_composable(family: TransformFamily, first: TransformParams,
                      rng: np.random.Generator) -> TransformParams:
    """Random params whose composition with ``first`` stays in every interval."""
    p = random_params(family, rng).values
    values = first.resolved(family)
    out = dict(p)
    for dof in family.dofs:
        if dof.kind == INTERVAL:
            shift = dof.identity - values[dof.name]
            lo, hi = max(dof.lo, dof.lo + shift), min(dof.hi, dof.hi + shift)
            out[dof.name] = float(rng.uniform(lo, hi))
    return TransformParams(out)


AUDIT_THRESHOLDS = {
    "homomorphism": 1e-12,
    "inverse": 1e-12,
    "identity": 1e-12,
    "norm": 1e-12,
    "signature": 1e-9,
}


@dataclass
class AuditReport:
    trials: int
    seed: int
    residuals: dict[str, float]
    thresholds: dict[str, float] = field(default_factory=lambda: dict(AUDIT_THRESHOLDS))

    @property
    def failures(self) -> list[str]:
        return [k for k, v in self.residuals.items() if not v <= self.thresholds[k]]

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_json(self) -> dict:
        return {"trials": self.trials, "seed": self.seed, "residuals": self.residuals,
                "thresholds": self.thresholds, "passed": self.passed, "failures": self.failures}


def audit_homomorphism(family: TransformFamily, trials: int, seed: int = 0,
                       builder: Callable[[TransformFamily, TransformParams], BlockTransform] = build_block_transform,
                       sampler: Callable | None = None, rows: int = 4) -> AuditReport:
    """Check the algebraic laws of the operator against dense matrices.

    ``sampler(family, rng)`` draws a composable pair ``(p1, p2)``; the default
    draws random params and a partner whose composition stays in range.
    """
    if trials < 1:
        raise ParameterError(f"trials must be >= 1, got {trials}")
    rng = np.random.default_rng(seed)
    d = family.feature_dim
    eye = np.eye(d)
    res = dict.fromkeys(AUDIT_THRESHOLDS, 0.0)
    res["identity"] = float(np.abs(builder(family, family.identity_params()).dense() - eye).max())

    for _ in range(trials):
        if sampler is None:
            p1 = random_params(family, rng)
            p2 = random_composable(family, p1, rng)
        else:
            p1, p2 = sampler(family, rng)
        f1 = builder(family, p1)
        dense1 = f1.dense()
        dense2 = builder(family, p2).dense()
        dense21 = builder(family, compose(family, p2, p1)).dense()
        res["homomorphism"] = max(res["homomorphism"], float(np.abs(dense21 - dense2 @ dense1).max()))
        dense_inv = builder(family, invert(family, p1)).dense()
        res["inverse"] = max(res["inverse"], float(np.abs(dense_inv @ dense1 - eye).max()))

        e = rng.uniform(-2.0, 2.0, size=(rows, d))
        y = apply(f1, e).data
        y_dense = e @ dense1.T
        n0 = np.linalg.norm(e, axis=1)
        norm_err = np.abs(np.linalg.norm(y_dense, axis=1) - n0) / n0
        res["norm"] = max(res["norm"], float(norm_err.max()),
                          float((np.abs(np.linalg.norm(y, axis=1) - n0) / n0).max()))
        sig_err = np.abs(invariant_signature(family, y).data - invariant_signature(family, e).data).max()
        res["signature"] = max(res["signature"], float(sig_err))
    return AuditReport(trials=trials, seed=seed, residuals=res)


# ---------------------------------------------------------------------------
# preset families
# ---------------------------------------------------------------------------

def planar_family(repetitions: int, scale_range: tuple[float, float] = (0.7, 1.3)) -> TransformFamily:
    """Rotation on the circle plus x- and y-scaling on half circles."""
    lo, hi = scale_range
    return TransformFamily((
        DofSpec("rotation", CIRCLE, 2, repetitions),
        DofSpec("scale_x", INTERVAL, 2, repetitions, lo, hi),
        DofSpec("scale_y", INTERVAL, 2, repetitions, lo, hi),
    ))


def mnist_family() -> TransformFamily:
    return planar_family(85)


def rotation_family(repetitions: int) -> TransformFamily:
    return TransformFamily((DofSpec("rotation", CIRCLE, 2, repetitions),))


def face_family() -> TransformFamily:
    """Head pose and lighting direction, one 3D block each."""
    return TransformFamily((DofSpec("rotation", SPHERE, 3, 1), DofSpec("light", SPHERE, 3, 1)))
