"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op builds a node holding its parents and a closure mapping the output
gradient to one gradient per parent. ``Tensor.backward`` walks the graph in
reverse topological order. Leaf gradients accumulate across calls; interior
nodes get their gradient overwritten on each pass.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DegenerateBatchError, DimensionError, ParameterError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


class Tensor:
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.grad = None
        out.name = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties --------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- backward ------------------------------------------------------------
    def backward(self) -> None:
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + pg if key in pending else pg

    # -- elementwise arithmetic ---------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor._result(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)),
        )

    __radd__ = __add__

    def __neg__(self):
        return Tensor._result(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor._result(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)),
        )

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        return Tensor._result(
            x * y,
            (self, other),
            lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        return Tensor._result(
            x / y,
            (self, other),
            lambda g: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * x / (y * y), y.shape)),
        )

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, p: float):
        if isinstance(p, Tensor):
            raise ParameterError("only constant exponents are supported")
        x = self.data
        return Tensor._result(x**p, (self,), lambda g: (g * p * x ** (p - 1),))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        shape = self.shape
        parts = index if isinstance(index, tuple) else (index,)
        basic = all(isinstance(p, (slice, int)) or p is Ellipsis for p in parts)

        def backward(g):
            out = np.zeros(shape)
            if basic:
                out[index] = g
            else:
                np.add.at(out, index, g)
            return (out,)

        return Tensor._result(self.data[index], (self,), backward)

    # -- reductions and shape ops -------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._result(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._result(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = tuple(np.argsort(axes))
        return Tensor._result(
            self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),)
        )

    @property
    def T(self):
        return self.transpose()

    # -- elementwise functions ----------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return Tensor._result(out, (self,), lambda g: (g * out,))

    def log(self):
        x = self.data
        return Tensor._result(np.log(x), (self,), lambda g: (g / x,))

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor._result(out, (self,), lambda g: (g * 0.5 / out,))

    def abs(self):
        s = np.sign(self.data)
        return Tensor._result(np.abs(self.data), (self,), lambda g: (g * s,))

    def sigmoid(self):
        out = 1.0 / (1.0 + np.exp(-self.data))
        return Tensor._result(out, (self,), lambda g: (g * out * (1.0 - out),))

    def leaky_relu(self, slope: float = 0.1):
        return leaky_relu(self, slope)


# ---------------------------------------------------------------------------
# free-function ops
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product; leading dimensions broadcast like ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    x, y = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(y, -1, -2)
        gb = np.swapaxes(x, -1, -2) @ g
        return _unbroadcast(ga, x.shape), _unbroadcast(gb, y.shape)

    return Tensor._result(x @ y, (a, b), backward)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def take(x: Tensor, index: np.ndarray, axis: int = -1) -> Tensor:
    """Gather distinct positions along ``axis``; indices must not repeat."""
    x = as_tensor(x)
    index = np.asarray(index)
    axis = axis % x.ndim
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        sl = (slice(None),) * axis + (index,)
        out[sl] = g
        return (out,)

    return Tensor._result(np.take(x.data, index, axis=axis), (x,), backward)


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    x = as_tensor(x)
    pos = x.data >= 0
    scale = np.where(pos, 1.0, slope)
    return Tensor._result(x.data * scale, (x,), lambda g: (g * scale,))


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 2D cross-correlation of [N,C,H,W] with [K,C,h,w]."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise DimensionError(f"conv2d shape mismatch: input {x.shape}, kernel {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ParameterError(f"bad stride/padding: {stride}, {padding}")
    n, c, h, w = x.shape
    k, _, kh, kw = kernel.shape
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(
            f"kernel {kernel.shape[2:]} larger than padded input {(h + 2 * padding, w + 2 * padding)}"
        )
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = windows.shape[2], windows.shape[3]
    wk = kernel.data
    out = np.tensordot(windows, wk, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def backward(g):
        gk = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += np.einsum(
                    "nkhw,kc->nchw", g, wk[:, :, i, j]
                )
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gk

    return Tensor._result(np.ascontiguousarray(out), (x, kernel), backward)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    x = as_tensor(x)
    if factor < 1:
        raise ParameterError(f"upsample factor must be >= 1, got {factor}")
    if x.ndim != 4:
        raise DimensionError(f"upsample_nearest expects [N,C,H,W], got {x.shape}")
    if factor == 1:
        return Tensor._result(x.data.copy(), (x,), lambda g: (g,))
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return Tensor._result(out, (x,), backward)


class RunningStats:
    """Exponential moving averages of batch mean and variance."""

    def __init__(self, dim: int, momentum: float = 0.9):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.momentum = momentum

    def update(self, mean: np.ndarray, var: np.ndarray) -> None:
        m = self.momentum
        self.mean = m * self.mean + (1.0 - m) * mean
        self.var = m * self.var + (1.0 - m) * var


BN_EPS = 1e-5


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, mode: str = "train",
              running: RunningStats | None = None, eps: float = BN_EPS) -> Tensor:
    """Batch normalization over axis 0 of [N,D], or per channel of [N,C,H,W]."""
    x = as_tensor(x)
    if x.ndim == 4:
        n, c, h, w = x.shape
        flat = x.transpose(0, 2, 3, 1).reshape(n * h * w, c)
        out = batchnorm(flat, gamma, beta, mode, running, eps)
        return out.reshape(n, h, w, c).transpose(0, 3, 1, 2)
    if x.ndim != 2 or x.shape[1] != gamma.shape[0]:
        raise DimensionError(f"batchnorm shape mismatch: x {x.shape}, gamma {gamma.shape}")
    if mode == "train":
        if x.shape[0] < 2:
            raise DegenerateBatchError("batchnorm in train mode needs at least 2 rows")
        mu = x.mean(axis=0)
        centered = x - mu
        var = (centered * centered).mean(axis=0)
        if running is not None and _grad_enabled:
            running.update(mu.data, var.data)
        xhat = centered / (var + eps).sqrt()
    elif mode == "eval":
        if running is None:
            raise ParameterError("eval-mode batchnorm needs running statistics")
        xhat = (x - running.mean) * (1.0 / np.sqrt(running.var + eps))
    else:
        raise ParameterError(f"unknown batchnorm mode {mode!r}")
    return xhat * gamma + beta


def log_softmax(scores: Tensor) -> Tensor:
    """Row-wise log-softmax of [N,K] scores."""
    shift = scores.data.max(axis=1, keepdims=True)
    z = scores - shift
    return z - z.exp().sum(axis=1, keepdims=True).log()


def cross_entropy(scores: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of [N,K] scores against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = scores.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match scores {scores.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ParameterError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    return -(log_softmax(scores) * onehot).sum() / float(n)
