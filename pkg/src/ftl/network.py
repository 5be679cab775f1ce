"""Encoder/decoder assemblies around the feature transform layer.

Images travel as ``[N, H, W]`` float arrays in [0, 1]. Layer stacks are
described by :class:`LayerSpec` lists so that a whole model can be rebuilt
from its JSON config (see ``docs/config.md``).
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import CheckpointError, ConfigError, DimensionError
from .optim import AdamState
from .tensor import RunningStats, Tensor, as_tensor, batchnorm, conv2d, upsample_nearest
from .transform import (
    BlockTransform,
    TransformFamily,
    TransformParams,
    apply,
    build_batch_transform,
    build_block_transform,
    invariant_signature,
    planar_family,
    rotation_family,
)

LAYER_KINDS = ("dense", "conv", "upconv", "flatten", "unflatten")


@dataclass
class LayerSpec:
    kind: str
    out: int = 0
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    factor: int = 2
    shape: tuple = ()
    bn: bool = True
    act: bool = True

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["shape"] = list(self.shape)
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "LayerSpec":
        doc = dict(doc)
        doc["shape"] = tuple(doc.get("shape", ()))
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(f"bad layer descriptor {doc}: {exc}") from None


def dense(out: int, bn: bool = True, act: bool = True) -> LayerSpec:
    return LayerSpec("dense", out=out, bn=bn, act=act)


def linear(out: int) -> LayerSpec:
    return LayerSpec("dense", out=out, bn=False, act=False)


@dataclass
class EncoderDecoderConfig:
    input_shape: tuple[int, int]
    encoder: list[LayerSpec]
    decoder: list[LayerSpec]
    family: TransformFamily
    slope: float = 0.1
    preset: str = "custom"

    def to_json(self) -> dict:
        return {
            "preset": self.preset,
            "input_shape": list(self.input_shape),
            "encoder": [l.to_json() for l in self.encoder],
            "decoder": [l.to_json() for l in self.decoder],
            "family": self.family.to_json(),
            "slope": self.slope,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "EncoderDecoderConfig":
        try:
            return cls(
                input_shape=tuple(doc["input_shape"]),
                encoder=[LayerSpec.from_json(l) for l in doc["encoder"]],
                decoder=[LayerSpec.from_json(l) for l in doc["decoder"]],
                family=TransformFamily.from_json(doc["family"]),
                slope=float(doc.get("slope", 0.1)),
                preset=doc.get("preset", "custom"),
            )
        except KeyError as exc:
            raise ConfigError(f"model config missing field {exc}") from None


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

def _mlp_config(side: int, hidden: int, family: TransformFamily, preset: str) -> EncoderDecoderConfig:
    code = family.feature_dim
    return EncoderDecoderConfig(
        input_shape=(side, side),
        encoder=[dense(hidden), dense(hidden), linear(code)],
        decoder=[dense(hidden), dense(hidden), LayerSpec("dense", out=side * side, bn=False, act=True)],
        family=family,
        preset=preset,
    )


def preset_config(name: str, family: TransformFamily | None = None) -> EncoderDecoderConfig:
    """Named architectures; ``family`` overrides the preset's default family."""
    if name == "mnist-mlp":
        return _mlp_config(28, 510, family or planar_family(85), name)
    if name == "desk-mlp":
        return _mlp_config(16, 256, family or planar_family(5), name)
    if name == "tiny-mlp":
        return _mlp_config(8, 16, family or planar_family(1), name)
    if name == "desk-conv":
        fam = family or rotation_family(15)
        return EncoderDecoderConfig(
            input_shape=(16, 16),
            encoder=[
                LayerSpec("conv", out=8, kernel=3, stride=2, padding=1),
                LayerSpec("conv", out=16, kernel=3, stride=2, padding=1),
                LayerSpec("flatten"),
                linear(fam.feature_dim),
            ],
            decoder=[
                dense(256),
                LayerSpec("unflatten", shape=(16, 4, 4)),
                LayerSpec("upconv", out=8, kernel=3, padding=1, factor=2),
                LayerSpec("upconv", out=1, kernel=3, padding=1, factor=2, bn=False, act=True),
                LayerSpec("flatten"),
            ],
            family=fam,
            preset=name,
        )
    raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")


PRESETS = ("mnist-mlp", "desk-mlp", "desk-conv", "tiny-mlp")


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

def _glorot(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class _Stack:
    """One encoder or decoder: a list of layer specs bound to parameters."""

    def __init__(self, prefix: str, specs: Sequence[LayerSpec], in_shape: tuple, slope: float,
                 final_sigmoid: bool, rng: np.random.Generator, params: dict, buffers: dict):
        self.prefix = prefix
        self.specs = list(specs)
        self.slope = slope
        self.final_sigmoid = final_sigmoid
        self.in_shape = in_shape
        shape = in_shape
        for i, spec in enumerate(self.specs):
            name = f"{prefix}.{i}"
            if spec.kind not in LAYER_KINDS:
                raise ConfigError(f"{name}: unknown layer kind {spec.kind!r}")
            if spec.kind == "dense":
                if len(shape) != 1:
                    raise ConfigError(f"{name}: dense layer needs flat input, got {shape}")
                fan_in, fan_out = shape[0], spec.out
                params[f"{name}.weight"] = Tensor(_glorot(rng, (fan_in, fan_out), fan_in, fan_out), True)
                params[f"{name}.bias"] = Tensor(np.zeros(fan_out), True)
                shape = (fan_out,)
            elif spec.kind in ("conv", "upconv"):
                if len(shape) != 3:
                    raise ConfigError(f"{name}: {spec.kind} layer needs [C,H,W] input, got {shape}")
                c, h, w = shape
                if spec.kind == "upconv":
                    h, w = h * spec.factor, w * spec.factor
                    stride = 1
                else:
                    stride = spec.stride
                k = spec.kernel
                kshape = (spec.out, c, k, k)
                params[f"{name}.weight"] = Tensor(_glorot(rng, kshape, c * k * k, spec.out * k * k), True)
                params[f"{name}.bias"] = Tensor(np.zeros(spec.out), True)
                ho = (h + 2 * spec.padding - k) // stride + 1
                wo = (w + 2 * spec.padding - k) // stride + 1
                if ho < 1 or wo < 1:
                    raise ConfigError(f"{name}: kernel {k} too large for input {shape}")
                shape = (spec.out, ho, wo)
            elif spec.kind == "flatten":
                shape = (int(np.prod(shape)),)
            else:
                if int(np.prod(spec.shape)) != int(np.prod(shape)):
                    raise ConfigError(f"{name}: cannot unflatten {shape} into {spec.shape}")
                shape = tuple(spec.shape)
            if spec.kind in ("dense", "conv", "upconv") and spec.bn:
                params[f"{name}.bn.gamma"] = Tensor(np.ones(shape[0]), True)
                params[f"{name}.bn.beta"] = Tensor(np.zeros(shape[0]), True)
                buffers[f"{name}.bn"] = RunningStats(shape[0])
        self.out_shape = shape
        self.out_index = last_weighted(self.specs)
        self.params = params
        self.buffers = buffers

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        mode = "train" if train else "eval"
        for i, spec in enumerate(self.specs):
            name = f"{self.prefix}.{i}"
            if spec.kind == "flatten":
                x = x.reshape(x.shape[0], -1)
                continue
            if spec.kind == "unflatten":
                x = x.reshape((x.shape[0],) + tuple(spec.shape))
                continue
            w, b = self.params[f"{name}.weight"], self.params[f"{name}.bias"]
            if spec.kind == "dense":
                x = x @ w + b
            else:
                if spec.kind == "upconv":
                    x = upsample_nearest(x, spec.factor)
                    x = conv2d(x, w, 1, spec.padding)
                else:
                    x = conv2d(x, w, spec.stride, spec.padding)
                x = x + b.reshape(1, -1, 1, 1)
            if spec.bn:
                x = batchnorm(x, self.params[f"{name}.bn.gamma"], self.params[f"{name}.bn.beta"],
                              mode, self.buffers[f"{name}.bn"])
            if spec.act:
                if self.final_sigmoid and i == self.out_index:
                    x = x.sigmoid()
                else:
                    x = x.leaky_relu(self.slope)
        return x


def last_weighted(specs: Sequence[LayerSpec]) -> int:
    return max(i for i, s in enumerate(specs) if s.kind in ("dense", "conv", "upconv"))


class EncoderDecoder:
    """``d(F_theta[e(x)])`` with learnable encoder ``e`` and decoder ``d``."""

    def __init__(self, config: EncoderDecoderConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.family = config.family
        h, w = config.input_shape
        first = config.encoder[0].kind
        self._conv_input = first == "conv"
        in_shape = (1, h, w) if self._conv_input else (h * w,)
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, RunningStats] = {}
        self.encoder = _Stack("enc", config.encoder, in_shape, config.slope, False, rng, self.params, self.buffers)
        code = self.family.feature_dim
        if self.encoder.out_shape != (code,):
            raise ConfigError(f"encoder output {self.encoder.out_shape} != family feature_dim {code}")
        tail = config.encoder[last_weighted(config.encoder)]
        if tail.bn or tail.act or last_weighted(config.encoder) != len(config.encoder) - 1:
            raise ConfigError("the layer feeding the feature transform must be linear (no batchnorm/activation)")
        self.decoder = _Stack("dec", config.decoder, (code,), config.slope, True, rng, self.params, self.buffers)
        if int(np.prod(self.decoder.out_shape)) != h * w:
            raise ConfigError(f"decoder output {self.decoder.out_shape} does not match input {config.input_shape}")
        out_spec = config.decoder[last_weighted(config.decoder)]
        if out_spec.bn or not out_spec.act:
            raise ConfigError("decoder output layer must have a sigmoid and no batchnorm")

    # -- parameters ---------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": v.data for k, v in self.params.items()}
        for k, rs in self.buffers.items():
            out[f"buffer/{k}.mean"] = rs.mean
            out[f"buffer/{k}.var"] = rs.var
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        expected = self.state_arrays()
        if set(arrays) != set(expected):
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise CheckpointError(f"parameter mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, ref in expected.items():
            if arrays[name].shape != ref.shape:
                raise CheckpointError(f"{name}: shape {arrays[name].shape} != expected {ref.shape}")
        for k, v in self.params.items():
            v.data = np.array(arrays[f"param/{k}"])
        for k, rs in self.buffers.items():
            rs.mean = np.array(arrays[f"buffer/{k}.mean"])
            rs.var = np.array(arrays[f"buffer/{k}.var"])

    # -- forward ------------------------------------------------------------
    def _check_images(self, x) -> Tensor:
        x = as_tensor(x)
        h, w = self.config.input_shape
        if x.ndim != 3 or x.shape[1:] != (h, w):
            raise DimensionError(f"expected images [N, {h}, {w}], got {x.shape}")
        return x

    def encode(self, x, train: bool = False) -> Tensor:
        x = self._check_images(x)
        n = x.shape[0]
        x = x.reshape(n, 1, *self.config.input_shape) if self._conv_input else x.reshape(n, -1)
        return self.encoder(x, train)

    def decode(self, code, train: bool = False) -> Tensor:
        code = as_tensor(code)
        if code.ndim != 2 or code.shape[1] != self.family.feature_dim:
            raise DimensionError(f"expected codes [N, {self.family.feature_dim}], got {code.shape}")
        out = self.decoder(code, train)
        return out.reshape(code.shape[0], *self.config.input_shape)

    def reconstruct(self, x, train: bool = False) -> Tensor:
        return self.decode(self.encode(x, train), train)

    def forward_transformed(self, x, params, train: bool = False) -> Tensor:
        """Decode the transformed code. ``params`` is one TransformParams, a
        list with one entry per row, or a prebuilt :class:`BlockTransform`."""
        code = self.encode(x, train)
        return self.decode(apply(self._operator(params), code), train)

    def _operator(self, params) -> BlockTransform:
        if isinstance(params, BlockTransform):
            return params
        if isinstance(params, TransformParams):
            return build_block_transform(self.family, params)
        return build_batch_transform(self.family, list(params))

    def signature(self, x, train: bool = False) -> Tensor:
        return invariant_signature(self.family, self.encode(x, train))


# ---------------------------------------------------------------------------
# classifier head
# ---------------------------------------------------------------------------

@dataclass
class HeadConfig:
    in_dim: int
    hidden: int = 128
    classes: int = 10
    slope: float = 0.1
    features: str = "signature"  # or "code"

    def to_json(self) -> dict:
        return asdict(self)


class ClassifierHead:
    """Input batchnorm, one hidden leaky-ReLU layer, linear class scores."""

    def __init__(self, config: HeadConfig, seed: int = 0, zero: bool = False):
        self.config = config
        rng = np.random.default_rng(seed)
        d, h, k = config.in_dim, config.hidden, config.classes
        w1 = np.zeros((d, h)) if zero else _glorot(rng, (d, h), d, h)
        w2 = np.zeros((h, k)) if zero else _glorot(rng, (h, k), h, k)
        self.params = {
            "bn.gamma": Tensor(np.ones(d), True),
            "bn.beta": Tensor(np.zeros(d), True),
            "fc1.weight": Tensor(w1, True),
            "fc1.bias": Tensor(np.zeros(h), True),
            "fc2.weight": Tensor(w2, True),
            "fc2.bias": Tensor(np.zeros(k), True),
        }
        self.running = RunningStats(d)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def __call__(self, features, train: bool = False) -> Tensor:
        features = as_tensor(features)
        if features.ndim != 2 or features.shape[1] != self.config.in_dim:
            raise DimensionError(f"head expects [N, {self.config.in_dim}], got {features.shape}")
        p = self.params
        x = batchnorm(features, p["bn.gamma"], p["bn.beta"], "train" if train else "eval", self.running)
        x = (x @ p["fc1.weight"] + p["fc1.bias"]).leaky_relu(self.config.slope)
        return x @ p["fc2.weight"] + p["fc2.bias"]

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"head/{k}": v.data for k, v in self.params.items()}
        out["head/bn.mean"] = self.running.mean
        out["head/bn.var"] = self.running.var
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            v.data = np.array(arrays[f"head/{k}"])
        self.running.mean = np.array(arrays["head/bn.mean"])
        self.running.var = np.array(arrays["head/bn.var"])


def classify_invariants(head: ClassifierHead, signature) -> Tensor:
    """Class scores from invariant signatures (softmax lives in the loss)."""
    return head(signature)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"FTLCKPT\x00"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    model: EncoderDecoder
    head: ClassifierHead | None = None
    optimizer: AdamState | None = None
    seed: int = 0
    step: int = 0
    extra: dict[str, Any] = field(default_factory=dict)


def save_checkpoint(path, model: EncoderDecoder, head: ClassifierHead | None = None,
                    optimizer: AdamState | None = None, seed: int | None = None, step: int = 0,
                    extra: dict | None = None) -> None:
    """Write magic, version, header length, JSON header, then raw LE float64."""
    arrays = dict(model.state_arrays())
    if head is not None:
        arrays.update(head.state_arrays())
    opt_doc = None
    if optimizer is not None:
        opt_doc = {"step_count": optimizer.step_count, "learning_rate": optimizer.learning_rate,
                   "beta1": optimizer.beta1, "beta2": optimizer.beta2, "epsilon": optimizer.epsilon}
        for i, (m, v) in enumerate(zip(optimizer.first_moment, optimizer.second_moment)):
            arrays[f"adam/m.{i:04d}"] = m
            arrays[f"adam/v.{i:04d}"] = v
    table, offset = [], 0
    for name, arr in arrays.items():
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        offset += int(arr.size)
    header = {
        "config": model.config.to_json(),
        "head": head.config.to_json() if head is not None else None,
        "optimizer": opt_doc,
        "seed": model.seed if seed is None else seed,
        "step": step,
        "extra": extra or {},
        "arrays": table,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values())
    Path(path).write_bytes(_PREFIX.pack(MAGIC, VERSION, len(blob)) + blob + payload)


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint ({len(raw)} bytes)")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = _PREFIX.size
    if start + hlen > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from None
    payload = raw[start + hlen :]
    total = sum(e["count"] for e in header["arrays"])
    if len(payload) != 8 * total:
        raise CheckpointError(f"{path}: truncated payload: {len(payload)} bytes, expected {8 * total}")
    flat = np.frombuffer(payload, dtype="<f8")
    arrays = {
        e["name"]: flat[e["offset"] : e["offset"] + e["count"]].reshape(e["shape"]).astype(np.float64)
        for e in header["arrays"]
    }
    try:
        config = EncoderDecoderConfig.from_json(header["config"])
    except Exception as exc:
        raise CheckpointError(f"{path}: bad model config: {exc}") from None
    model = EncoderDecoder(config, seed=header["seed"])
    model.load_state_arrays({k: v for k, v in arrays.items() if k.startswith(("param/", "buffer/"))})
    head = None
    if header["head"] is not None:
        head = ClassifierHead(HeadConfig(**header["head"]))
        head.load_state_arrays(arrays)
    opt = None
    if header["optimizer"] is not None:
        opt = AdamState(**header["optimizer"])
        n = sum(1 for k in arrays if k.startswith("adam/m."))
        opt.first_moment = [arrays[f"adam/m.{i:04d}"] for i in range(n)]
        opt.second_moment = [arrays[f"adam/v.{i:04d}"] for i in range(n)]
    return Checkpoint(model=model, head=head, optimizer=opt, seed=header["seed"], step=header["step"],
                      extra=header.get("extra", {}))
