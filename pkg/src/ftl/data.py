"""Training data: procedural glyphs, image warps, triples and IDX files.

A triple is ``(x, x_t, theta)``: ``x`` shows a glyph at some absolute
orientation ``frame`` and ``x_t = warp(x, theta, frame)`` scales it along the
glyph's own axes and then rotates it about the image center.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, ParameterError
from .transform import CIRCLE, INTERVAL, TransformFamily, TransformParams, random_params, rotation_2d

WARP_DOFS = ("rotation", "scale_x", "scale_y")

# ---------------------------------------------------------------------------
# glyphs
# ---------------------------------------------------------------------------

# canonical coordinates: x right, y down, glyph inside roughly [-0.45, 0.45]^2
_SEGMENTS: dict[str, list[tuple[float, float, float, float]]] = {
    "bar": [(-0.42, 0.0, 0.42, 0.0)],
    "cross": [(-0.4, 0.0, 0.4, 0.0), (0.0, -0.4, 0.0, 0.4)],
    "ell": [(-0.22, -0.42, -0.22, 0.38), (-0.22, 0.38, 0.32, 0.38)],
    "tee": [(-0.36, -0.38, 0.36, -0.38), (0.0, -0.38, 0.0, 0.42)],
    "eff": [(-0.2, -0.42, -0.2, 0.42), (-0.2, -0.38, 0.32, -0.38), (-0.2, 0.0, 0.18, 0.0)],
    "jay": [(0.16, -0.42, 0.16, 0.22), (0.16, 0.22, 0.0, 0.38), (0.0, 0.38, -0.2, 0.38),
            (-0.2, 0.38, -0.3, 0.2)],
    "vee": [(-0.34, -0.4, 0.0, 0.38), (0.0, 0.38, 0.26, -0.16)],
    "wye": [(0.0, 0.02, 0.0, 0.42), (0.0, 0.02, -0.3, -0.36), (0.0, 0.02, 0.3, -0.36)],
    "arrow": [(-0.42, 0.0, 0.36, 0.0), (0.36, 0.0, 0.14, -0.22), (0.36, 0.0, 0.14, 0.22)],
    "pee": [(-0.2, -0.42, -0.2, 0.42)],
    "kay": [(-0.22, -0.42, -0.22, 0.42), (-0.2, 0.06, 0.3, -0.4), (-0.12, -0.02, 0.3, 0.4)],
    "cee": [],
    "disc_notch": [],
}

SHAPES = tuple(_SEGMENTS)
# no rotational symmetry, so every orientation is recoverable from the raster
DEFAULT_POOL = ("ell", "tee", "eff", "jay", "vee", "wye", "arrow", "pee", "kay", "disc_notch")


def _segment_distance(x: np.ndarray, y: np.ndarray, seg) -> np.ndarray:
    x0, y0, x1, y1 = seg
    dx, dy = x1 - x0, y1 - y0
    t = np.clip(((x - x0) * dx + (y - y0) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    return np.hypot(x - (x0 + t * dx), y - (y0 + t * dy))


def _coverage(shape_id: str, x: np.ndarray, y: np.ndarray, stroke: float, segments=None) -> np.ndarray:
    half = 0.5 * stroke
    inside = np.zeros(x.shape, dtype=bool)
    for seg in _SEGMENTS[shape_id] if segments is None else segments:
        inside |= _segment_distance(x, y, seg) <= half
    if shape_id == "pee":
        r = np.hypot(x - 0.0, y + 0.2)
        inside |= (np.abs(r - 0.2) <= half) & (x >= -0.2)
    elif shape_id == "cee":
        r = np.hypot(x, y)
        inside |= (np.abs(r - 0.34) <= half) & ~((x > 0.12) & (np.abs(y) < 0.2))
    elif shape_id == "disc_notch":
        inside |= (np.hypot(x, y) <= 0.36) & ~((x > 0.02) & (np.abs(y + 0.06) < 0.09))
    return inside


@dataclass(frozen=True)
class Glyph:
    shape_id: str
    stroke: float = 0.2
    aspect: float = 1.0
    jitter: float = 0.0
    jitter_seed: int = 0
    size: float = 1.0

    def __post_init__(self):
        if self.shape_id not in _SEGMENTS:
            raise ParameterError(f"unknown glyph {self.shape_id!r}; known: {SHAPES}")
        if self.stroke <= 0 or self.aspect <= 0 or self.size <= 0 or self.jitter < 0:
            raise ParameterError("stroke and aspect must be positive, jitter non-negative")

    def segments(self) -> list[tuple[float, ...]]:
        """Stroke endpoints, displaced per instance when ``jitter > 0``.

        Shared endpoints move together so strokes stay connected.
        """
        base = _SEGMENTS[self.shape_id]
        if self.jitter == 0 or not base:
            return base
        rng = np.random.default_rng(self.jitter_seed)
        moved: dict[tuple[float, float], tuple[float, float]] = {}
        out = []
        for x0, y0, x1, y1 in base:
            ends = []
            for p in ((x0, y0), (x1, y1)):
                if p not in moved:
                    dx, dy = rng.normal(0.0, self.jitter, size=2)
                    moved[p] = (p[0] + dx, p[1] + dy)
                ends.extend(moved[p])
            out.append(tuple(ends))
        return out

    def render(self, resolution: int = 16, rotation: float = 0.0, supersample: int = 4) -> np.ndarray:
        """Anti-aliased raster with the glyph centered and turned by ``rotation``."""
        s = supersample
        offsets = (np.arange(s) + 0.5) / s - 0.5
        grid = (np.arange(resolution)[:, None] + offsets[None, :]).reshape(-1) - (resolution - 1) / 2.0
        py, px = np.meshgrid(grid, grid, indexing="ij")
        px, py = px / (resolution / 2.0), py / (resolution / 2.0)
        c, sn = math.cos(rotation), math.sin(rotation)
        # undo the pose: rotate back by -rotation, then undo the aspect stretch
        u = (c * px + sn * py) / (self.aspect * self.size)
        v = (-sn * px + c * py) / self.size
        hit = _coverage(self.shape_id, u, v, self.stroke, self.segments()).astype(np.float64)
        return hit.reshape(resolution, s, resolution, s).mean(axis=(1, 3))


# ---------------------------------------------------------------------------
# warping
# ---------------------------------------------------------------------------

def _bilinear(image: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    h, w = image.shape
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx, fy = sx - x0, sy - y0

    def at(yy, xx):
        ok = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
        return np.where(ok, image[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)], 0.0)

    return ((1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
            + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1)))


def warp(image: np.ndarray, rotation: float = 0.0, scale_x: float = 1.0, scale_y: float = 1.0,
         frame: float = 0.0) -> np.ndarray:
    """Scale along axes turned by ``frame``, then rotate, about the image center.

    Inverse-mapped bilinear resampling; samples outside the image read 0.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise ParameterError(f"warp needs a square 2D image, got {image.shape}")
    if not (scale_x > 0 and scale_y > 0):
        raise ParameterError(f"scales must be positive, got ({scale_x}, {scale_y})")
    n = image.shape[0]
    if scale_x == scale_y:
        # isotropic: the frame cancels, and skipping it keeps identity warps exact
        inverse = rotation_2d(-rotation) / scale_x
    else:
        rf = rotation_2d(frame)
        inverse = rf @ np.diag([1.0 / scale_x, 1.0 / scale_y]) @ rf.T @ rotation_2d(-rotation)
    c = (n - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(n) - c, np.arange(n) - c, indexing="ij")
    sx = inverse[0, 0] * xs + inverse[0, 1] * ys + c
    sy = inverse[1, 0] * xs + inverse[1, 1] * ys + c
    return _bilinear(image, sx, sy)


def warp_params(family: TransformFamily, params: TransformParams) -> dict[str, float]:
    """Map a family's dof values onto :func:`warp` keyword arguments."""
    values = params.resolved(family)
    out = {"rotation": 0.0, "scale_x": 1.0, "scale_y": 1.0}
    for dof in family.dofs:
        if dof.name not in WARP_DOFS or dof.kind not in (CIRCLE, INTERVAL):
            raise ParameterError(f"dof {dof.name!r} ({dof.kind}) has no image-space warp")
        out[dof.name] = float(values[dof.name])
    return out


def compose_warp(second: dict, first: dict) -> dict:
    """Image-space composition: angles add, canonical-frame scales multiply.

    The second warp must be applied with ``frame + first['rotation']``.
    """
    return {
        "rotation": first.get("rotation", 0.0) + second.get("rotation", 0.0),
        "scale_x": first.get("scale_x", 1.0) * second.get("scale_x", 1.0),
        "scale_y": first.get("scale_y", 1.0) * second.get("scale_y", 1.0),
    }


# ---------------------------------------------------------------------------
# triples
# ---------------------------------------------------------------------------

@dataclass
class TrainingTriple:
    x: np.ndarray
    x_t: np.ndarray
    params: TransformParams
    frame: float = 0.0
    label: int = -1


@dataclass(frozen=True)
class GlyphPool:
    """Where source images come from: procedural glyphs or a stack of images."""

    shapes: tuple[str, ...] = DEFAULT_POOL
    stroke_range: tuple[float, float] = (0.16, 0.24)
    aspect_range: tuple[float, float] = (0.85, 1.15)
    images: np.ndarray | None = field(default=None, compare=False)
    labels: np.ndarray | None = field(default=None, compare=False)
    absolute_rotation: bool = True
    jitter: float = 0.0
    size: float = 1.0

    def __len__(self) -> int:
        return len(self.images) if self.images is not None else len(self.shapes)

    def draw(self, rng: np.random.Generator, resolution: int) -> tuple[np.ndarray, float, int]:
        """Return ``(x, frame, label)``: a source image and its orientation."""
        if len(self) == 0:
            raise ParameterError("empty glyph pool")
        idx = int(rng.integers(len(self)))
        frame = float(rng.uniform(0.0, 2.0 * math.pi)) if self.absolute_rotation else 0.0
        if self.images is not None:
            label = int(self.labels[idx]) if self.labels is not None else -1
            return warp(self.images[idx], rotation=frame), frame, label
        stroke, aspect = float(rng.uniform(*self.stroke_range)), float(rng.uniform(*self.aspect_range))
        seed = int(rng.integers(2**31)) if self.jitter > 0 else 0
        glyph = Glyph(self.shapes[idx], stroke, aspect, self.jitter, seed, self.size)
        return glyph.render(resolution, rotation=frame), frame, idx


def sample_triple(rng: np.random.Generator, family: TransformFamily, pool: GlyphPool,
                  resolution: int = 16) -> TrainingTriple:
    x, frame, label = pool.draw(rng, resolution)
    params = random_params(family, rng)
    x_t = warp(x, frame=frame, **warp_params(family, params))
    return TrainingTriple(x=x, x_t=x_t, params=params, frame=frame, label=label)


@dataclass
class TripleSet:
    """Column-oriented batch of triples."""

    x: np.ndarray
    x_t: np.ndarray
    params: list[TransformParams]
    frame: np.ndarray
    label: np.ndarray

    def __len__(self) -> int:
        return len(self.x)

    def subset(self, idx) -> "TripleSet":
        idx = np.asarray(idx)
        return TripleSet(self.x[idx], self.x_t[idx], [self.params[i] for i in idx],
                         self.frame[idx], self.label[idx])

    def triples(self):
        for i in range(len(self)):
            yield TrainingTriple(self.x[i], self.x_t[i], self.params[i], float(self.frame[i]), int(self.label[i]))


def make_triples(seed: int, count: int, family: TransformFamily, pool: GlyphPool = GlyphPool(),
                 resolution: int = 16, workers: int = 1) -> TripleSet:
    """``count`` triples; worker ``k`` owns the ``k``-th spawned seed stream and
    results are concatenated in worker order."""
    streams = np.random.SeedSequence(seed).spawn(workers) if workers > 1 else [np.random.SeedSequence(seed)]
    sizes = [count // len(streams) + (1 if k < count % len(streams) else 0) for k in range(len(streams))]
    items: list[TrainingTriple] = []
    for ss, n in zip(streams, sizes):
        rng = np.random.default_rng(ss)
        items.extend(sample_triple(rng, family, pool, resolution) for _ in range(n))
    shape = (0, resolution, resolution)
    return TripleSet(
        x=np.stack([t.x for t in items]) if items else np.zeros(shape),
        x_t=np.stack([t.x_t for t in items]) if items else np.zeros(shape),
        params=[t.params for t in items],
        frame=np.array([t.frame for t in items]),
        label=np.array([t.label for t in items], dtype=np.int64),
    )


def make_labeled_glyphs(seed: int, count: int, pool: GlyphPool = GlyphPool(),
                        resolution: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Upright glyph images with their class index (position in ``pool.shapes``)."""
    rng = np.random.default_rng(seed)
    upright = GlyphPool(pool.shapes, pool.stroke_range, pool.aspect_range, absolute_rotation=False,
                        jitter=pool.jitter, size=pool.size)
    images, labels = [], []
    for _ in range(count):
        x, _, label = upright.draw(rng, resolution)
        images.append(x)
        labels.append(label)
    return np.stack(images), np.array(labels, dtype=np.int64)


def make_rotated_set(images: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Rotate every image by its own uniform angle in [0, 2pi); angles are returned
    for diagnostics only."""
    angles = rng.uniform(0.0, 2.0 * math.pi, size=len(images))
    return np.stack([warp(img, rotation=a) for img, a in zip(images, angles)]), angles


# ---------------------------------------------------------------------------
# IDX files
# ---------------------------------------------------------------------------

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class IdxDataset:
    images: np.ndarray
    labels: np.ndarray | None


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4 + 4 * ndim:
        raise FormatError(f"{path}: truncated IDX header")
    found = struct.unpack_from(">I", raw)[0]
    if found != magic:
        raise FormatError(f"{path}: bad IDX magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    body = raw[4 + 4 * ndim :]
    expected = int(np.prod(dims))
    if len(body) != expected:
        raise FormatError(f"{path}: truncated IDX payload: {len(body)} bytes, header declares {expected}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path=None) -> IdxDataset:
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3).astype(np.float64) / 255.0
    labels = None
    if labels_path is not None:
        labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1).astype(np.int64)
        if len(labels) != len(images):
            raise FormatError(f"{len(images)} images but {len(labels)} labels")
    return IdxDataset(images, labels)


def write_idx(path, array: np.ndarray) -> None:
    """Write uint8 data with the IDX header matching its rank (1 or 3)."""
    array = np.asarray(array)
    magic = {1: IDX_LABELS_MAGIC, 3: IDX_IMAGES_MAGIC}.get(array.ndim)
    if magic is None:
        raise FormatError(f"IDX writer supports rank 1 or 3, got {array.ndim}")
    header = struct.pack(f">I{array.ndim}I", magic, *array.shape)
    Path(path).write_bytes(header + array.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------

DATASET_FORMAT = "ftl-dataset"
DATASET_VERSION = 1


def export_dataset(out_dir, triples: TripleSet, family: TransformFamily, meta: dict) -> dict:
    """Raw little-endian float64 arrays plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = len(triples)
    param_cols = [d.name for d in family.dofs]
    params = np.array([[float(p.values[c]) for c in param_cols] for p in triples.params]).reshape(n, len(param_cols))
    arrays = {"x": triples.x, "x_t": triples.x_t, "params": params, "frame": triples.frame,
              "label": triples.label.astype(np.float64)}
    files = {}
    for name, arr in arrays.items():
        fname = f"{name}.f64"
        (out / fname).write_bytes(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        files[name] = {"file": fname, "shape": list(arr.shape)}
    manifest = {"format": DATASET_FORMAT, "version": DATASET_VERSION, "count": n, "dtype": "<f8",
                "param_columns": param_cols, "family": family.to_json(), "files": files, **meta}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_dataset_dir(path) -> tuple[TripleSet, TransformFamily, dict]:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{root}: unreadable manifest: {exc}") from None
    if manifest.get("format") != DATASET_FORMAT:
        raise FormatError(f"{root}: not an {DATASET_FORMAT} directory")
    family = TransformFamily.from_json(manifest["family"])
    arrays = {}
    for name, entry in manifest["files"].items():
        raw = (root / entry["file"]).read_bytes()
        shape = tuple(entry["shape"])
        if len(raw) != 8 * int(np.prod(shape)):
            raise FormatError(f"{entry['file']}: {len(raw)} bytes, manifest declares shape {shape}")
        arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    cols = manifest["param_columns"]
    params = [TransformParams(dict(zip(cols, map(float, row)))) for row in arrays["params"]]
    triples = TripleSet(arrays["x"], arrays["x_t"], params, arrays["frame"], arrays["label"].astype(np.int64))
    return triples, family, manifest


def identity_triples(images: np.ndarray, family: TransformFamily, labels: Sequence[int] | None = None) -> TripleSet:
    n = len(images)
    return TripleSet(np.asarray(images), np.asarray(images), [family.identity_params()] * n,
                     np.zeros(n), np.asarray(labels if labels is not None else [-1] * n, dtype=np.int64))
