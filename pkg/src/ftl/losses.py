"""Reconstruction, regularization and classification objectives."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError
from .tensor import Tensor, as_tensor, conv2d, cross_entropy
from .transform import TransformFamily, invariant_signature


def _same_shape(x: Tensor, y: Tensor, what: str) -> None:
    if x.shape != y.shape:
        raise DimensionError(f"{what}: shapes differ, {x.shape} vs {y.shape}")


def l1_loss(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    _same_shape(x, y, "l1_loss")
    return (x - y).abs().mean()


@dataclass(frozen=True)
class SsimConfig:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ParameterError(f"SSIM window must be odd, got {self.window}")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2

    def kernel(self) -> np.ndarray:
        r = np.arange(self.window) - (self.window - 1) / 2.0
        g = np.exp(-(r**2) / (2.0 * self.sigma**2))
        w = np.outer(g, g)
        return w / w.sum()


def _as_planes(x: Tensor) -> Tensor:
    if x.ndim == 2:
        return x.reshape(1, 1, *x.shape)
    if x.ndim == 3:
        return x.reshape(x.shape[0], 1, x.shape[1], x.shape[2])
    if x.ndim == 4:
        return x.reshape(x.shape[0] * x.shape[1], 1, x.shape[2], x.shape[3])
    raise DimensionError(f"SSIM expects [H,W], [N,H,W] or [N,C,H,W], got {x.shape}")


def ssim_map(x, y, cfg: SsimConfig = SsimConfig()) -> Tensor:
    """Per-window SSIM over valid (unpadded) Gaussian windows."""
    x, y = as_tensor(x), as_tensor(y)
    _same_shape(x, y, "ssim")
    x, y = _as_planes(x), _as_planes(y)
    if x.shape[2] < cfg.window or x.shape[3] < cfg.window:
        raise DimensionError(f"image {x.shape[2:]} smaller than SSIM window {cfg.window}")
    w = Tensor(cfg.kernel().reshape(1, 1, cfg.window, cfg.window))
    mu_x, mu_y = conv2d(x, w), conv2d(y, w)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    var_x = conv2d(x * x, w) - mu_xx
    var_y = conv2d(y * y, w) - mu_yy
    cov = conv2d(x * y, w) - mu_xy
    c1, c2 = cfg.c1, cfg.c2
    num = (2.0 * mu_xy + c1) * (2.0 * cov + c2)
    den = (mu_xx + mu_yy + c1) * (var_x + var_y + c2)
    return num / den


def ssim(x, y, cfg: SsimConfig = SsimConfig()) -> Tensor:
    return ssim_map(x, y, cfg).mean()


def face_loss(x, y, alpha: float = 0.85, cfg: SsimConfig = SsimConfig()) -> Tensor:
    """Convex blend of the SSIM dissimilarity ``(1 - SSIM)/2`` and L1."""
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must lie in [0, 1], got {alpha}")
    structural = (1.0 - ssim_map(x, y, cfg)).mean() / 2.0
    return alpha * structural + (1.0 - alpha) * l1_loss(x, y)


@dataclass(frozen=True)
class BalancedBceConfig:
    gamma: float = 0.98
    rescale_targets: bool = True
    rescale_outputs: bool = True
    out_lo: float = 0.1
    out_hi: float = 0.9999
    target_lo: float = -1.0
    target_hi: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ParameterError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not 0.0 < self.out_lo < self.out_hi < 1.0:
            raise ParameterError(f"output range must sit strictly inside (0, 1), got [{self.out_lo}, {self.out_hi}]")


_UNSCALED_CLIP = 1e-12


def balanced_bce(output, target, cfg: BalancedBceConfig = BalancedBceConfig()) -> Tensor:
    """Weighted binary cross-entropy summed over voxels, averaged over the batch.

    Targets in {0, 1} are mapped affinely to ``[target_lo, target_hi]`` and
    outputs in [0, 1] to ``[out_lo, out_hi]``; either map can be switched off.
    """
    o, t = as_tensor(output), np.asarray(target, dtype=np.float64)
    if o.shape != t.shape:
        raise DimensionError(f"balanced_bce: output {o.shape} vs target {t.shape}")
    if not np.isin(t, (0.0, 1.0)).all():
        raise ParameterError("balanced_bce targets must be binary {0, 1}")
    if cfg.rescale_targets:
        t = cfg.target_lo + (cfg.target_hi - cfg.target_lo) * t
    if cfg.rescale_outputs:
        o = cfg.out_lo + (cfg.out_hi - cfg.out_lo) * o
    else:
        o = Tensor._result(
            np.clip(o.data, _UNSCALED_CLIP, 1.0 - _UNSCALED_CLIP), (o,),
            lambda g, d=o.data: (g * ((d >= _UNSCALED_CLIP) & (d <= 1.0 - _UNSCALED_CLIP)),),
        )
    g = cfg.gamma
    per_voxel = -g * t * o.log() - (1.0 - g) * (1.0 - t) * (1.0 - o).log()
    n = o.shape[0] if o.ndim else 1
    return per_voxel.sum() / float(n)


def invariance_regularizer(family: TransformFamily, e_x, e_xt) -> Tensor:
    """Squared distance between invariant signatures, averaged over rows."""
    e_x, e_xt = as_tensor(e_x), as_tensor(e_xt)
    _same_shape(e_x, e_xt, "invariance_regularizer")
    d = invariant_signature(family, e_x) - invariant_signature(family, e_xt)
    return (d * d).sum() / float(e_x.shape[0])


CLASSIFICATION_WEIGHT = 10.0


def combined_classification_loss(recon_loss, scores, labels, weight: float = CLASSIFICATION_WEIGHT) -> Tensor:
    return as_tensor(recon_loss) + weight * cross_entropy(as_tensor(scores), labels)


def reconstruction_loss(kind: str, alpha: float = 0.85, bce: BalancedBceConfig | None = None):
    """Return ``loss(pred, target)`` for a loss name from a run config."""
    if kind == "l1":
        return l1_loss
    if kind == "face":
        return lambda p, t: face_loss(p, t, alpha)
    if kind == "bce":
        cfg = bce or BalancedBceConfig()
        return lambda p, t: balanced_bce(p, (as_tensor(t).data > 0.5).astype(np.float64), cfg)
    raise ParameterError(f"unknown loss kind {kind!r}; choose l1, face or bce")
