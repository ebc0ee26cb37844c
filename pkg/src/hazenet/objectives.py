"""Training objectives and image-quality metrics.

The total objective is an L1 triple over every output scale — pixel space,
Fourier space, and a structural (SSIM) term — plus a small dark-channel
sparsity penalty on the full-resolution prediction.  All loss functions
return scalar tensors attached to the gradient tape.

Target-side quantities (the target's spectrum, its local SSIM moments) are
pure functions of the target, so the trainer precomputes them once per
sample; the ``*_at`` entry points accept those precomputed stats and the
plain entry points derive them on the spot from the same code path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from hazenet import tensor as T
from hazenet.priors import PriorWindow, dark_channel

__all__ = [
    "LossWeights",
    "SSIMConfig",
    "SSIMTargetStats",
    "ssim_target_stats",
    "ssim_map",
    "mean_ssim",
    "psnr",
    "loss_spatial",
    "loss_frequency",
    "loss_frequency_at",
    "loss_ssim",
    "loss_ssim_at",
    "compose_total",
    "loss_total",
    "dark_channel_mean",
]


@dataclass(frozen=True)
class LossWeights:
    frequency: float = 0.5
    ssim: float = 1.0
    dark: float = 0.1

    def __post_init__(self):
        if self.frequency < 0 or self.ssim < 0 or self.dark < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class SSIMConfig:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    peak: float = 1.0

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"SSIM window must be odd and >= 1, got {self.window}")
        if self.sigma <= 0 or self.peak <= 0:
            raise ValueError("sigma and peak must be positive")


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    """1-D Gaussian tap weights, normalized to sum exactly 1."""
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


# constant separable blur kernels, keyed by (channels, window, sigma)
_BLUR_CACHE: dict[tuple[int, int, float], tuple[T.Tensor, T.Tensor, T.Tensor]] = {}


def _blur_kernels(c: int, cfg: SSIMConfig) -> tuple[T.Tensor, T.Tensor, T.Tensor]:
    key = (c, cfg.window, cfg.sigma)
    cached = _BLUR_CACHE.get(key)
    if cached is None:
        g = gaussian_window(cfg.window, cfg.sigma)
        kv = T.constant(np.tile(g.reshape(1, 1, cfg.window, 1), (c, 1, 1, 1)))
        kh = T.constant(np.tile(g.reshape(1, 1, 1, cfg.window), (c, 1, 1, 1)))
        zb = T.constant(np.zeros(c))
        cached = (kv, kh, zb)
        _BLUR_CACHE[key] = cached
    return cached


def _blur(x: T.Tensor, cfg: SSIMConfig) -> T.Tensor:
    """Separable Gaussian smoothing, same-size with reflect padding."""
    kv, kh, zb = _blur_kernels(x.shape[1], cfg)
    return T.dwconv2d(T.dwconv2d(x, kv, zb), kh, zb)


@dataclass(frozen=True)
class SSIMTargetStats:
    """The pieces of the SSIM map that depend only on the reference image."""

    ref: T.Tensor
    mu: T.Tensor
    sq_blur: T.Tensor


def ssim_target_stats(b: T.Tensor, cfg: SSIMConfig) -> SSIMTargetStats:
    ref = b if isinstance(b, T.Tensor) else T.constant(b)
    with T.no_grad():
        mu = _blur(ref, cfg)
        sq_blur = _blur(T.mul(ref, ref), cfg)
    return SSIMTargetStats(ref, T.constant(mu.data), T.constant(sq_blur.data))


def ssim_map_at(a: T.Tensor, stats: SSIMTargetStats, cfg: SSIMConfig) -> T.Tensor:
    if a.shape != stats.ref.shape:
        raise T.ShapeError(f"ssim: shapes {a.shape} vs {stats.ref.shape}")
    c1 = (cfg.k1 * cfg.peak) ** 2
    c2 = (cfg.k2 * cfg.peak) ** 2
    mu_a = _blur(a, cfg)
    mu_b = stats.mu
    var_a = T.sub(_blur(T.mul(a, a), cfg), T.mul(mu_a, mu_a))
    var_b = T.sub(stats.sq_blur, T.mul(mu_b, mu_b))
    cov = T.sub(_blur(T.mul(a, stats.ref), cfg), T.mul(mu_a, mu_b))
    lum = T.div(
        T.add(T.mul(T.mul(mu_a, mu_b), 2.0), c1),
        T.add(T.add(T.mul(mu_a, mu_a), T.mul(mu_b, mu_b)), c1),
    )
    struct = T.div(T.add(T.mul(cov, 2.0), c2), T.add(T.add(var_a, var_b), c2))
    return T.mul(lum, struct)


def ssim_map(a: T.Tensor, b: T.Tensor, cfg: SSIMConfig = SSIMConfig()) -> T.Tensor:
    """Per-position SSIM of two equal-shape images, same size as the inputs."""
    return ssim_map_at(a, ssim_target_stats(b, cfg), cfg)


def mean_ssim(a: T.Tensor, b: T.Tensor, cfg: SSIMConfig = SSIMConfig()) -> T.Tensor:
    """Mean of the SSIM map; exactly 1 for identical inputs."""
    return T.mean_all(ssim_map(a, b, cfg))


def psnr(a, b, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE), capped at 100 dB so identical pairs stay finite."""
    ad = a.data if isinstance(a, T.Tensor) else np.asarray(a, dtype=np.float64)
    bd = b.data if isinstance(b, T.Tensor) else np.asarray(b, dtype=np.float64)
    if ad.shape != bd.shape:
        raise T.ShapeError(f"psnr: shapes {ad.shape} vs {bd.shape}")
    mse = float(np.mean((ad - bd) ** 2))
    if mse == 0.0:
        return 100.0
    return min(10.0 * math.log10(peak * peak / mse), 100.0)


def _check_pairs(preds: Sequence[T.Tensor], gts: Sequence) -> None:
    if len(preds) != len(gts):
        raise T.ShapeError(f"{len(preds)} predictions vs {len(gts)} targets")
    if not preds:
        raise ValueError("empty prediction list")


def loss_spatial(preds: Sequence[T.Tensor], gts: Sequence[T.Tensor]) -> T.Tensor:
    """Sum over scales of the mean absolute pixel error."""
    _check_pairs(preds, gts)
    total = T.l1_mean(preds[0], gts[0])
    for p, g in zip(preds[1:], gts[1:]):
        total = T.add(total, T.l1_mean(p, g))
    return total


def loss_frequency_at(
    preds: Sequence[T.Tensor], gt_ffts: Sequence[tuple[T.Tensor, T.Tensor]]
) -> T.Tensor:
    """Sum over scales of mean |Re dF| + mean |Im dF| against cached spectra."""
    _check_pairs(preds, gt_ffts)
    total: Optional[T.Tensor] = None
    for p, (gre, gim) in zip(preds, gt_ffts):
        re, im = T.fft2d(p)
        term = T.add(T.l1_mean(re, gre), T.l1_mean(im, gim))
        total = term if total is None else T.add(total, term)
    return total


def loss_frequency(preds: Sequence[T.Tensor], gts: Sequence[T.Tensor]) -> T.Tensor:
    """As loss_frequency_at, deriving the target spectra on the spot."""
    _check_pairs(preds, gts)
    with T.no_grad():
        ffts = [T.fft2d(g) for g in gts]
    return loss_frequency_at(preds, [(T.constant(r.data), T.constant(i.data)) for r, i in ffts])


def loss_ssim_at(
    preds: Sequence[T.Tensor], stats: Sequence[SSIMTargetStats], cfg: SSIMConfig
) -> T.Tensor:
    """Sum over scales of 1 - mean SSIM against cached reference moments."""
    _check_pairs(preds, stats)
    total: Optional[T.Tensor] = None
    for p, st in zip(preds, stats):
        term = T.add(T.neg(T.mean_all(ssim_map_at(p, st, cfg))), 1.0)
        total = term if total is None else T.add(total, term)
    return total


def loss_ssim(
    preds: Sequence[T.Tensor], gts: Sequence[T.Tensor], cfg: SSIMConfig = SSIMConfig()
) -> T.Tensor:
    _check_pairs(preds, gts)
    return loss_ssim_at(preds, [ssim_target_stats(g, cfg) for g in gts], cfg)


def dark_channel_mean(pred: T.Tensor, window: PriorWindow = PriorWindow(3)) -> T.Tensor:
    """Mean dark channel of a predicted image; the sparsity regularizer term."""
    return T.mean_all(dark_channel(pred, window))


def compose_total(
    spatial: T.Tensor, frequency: T.Tensor, ssim_term: T.Tensor, dark: T.Tensor, w: LossWeights
) -> T.Tensor:
    """The one canonical weighting: spatial + wf*freq + ws*ssim + wd*dark."""
    total = T.add(spatial, T.mul(frequency, w.frequency))
    total = T.add(total, T.mul(ssim_term, w.ssim))
    return T.add(total, T.mul(dark, w.dark))


def loss_total(
    preds: Sequence[T.Tensor],
    gts: Sequence[T.Tensor],
    w: LossWeights,
    pred_dark_mean: T.Tensor,
    cfg: SSIMConfig = SSIMConfig(),
) -> T.Tensor:
    """Full training objective over multi-scale predictions."""
    return compose_total(
        loss_spatial(preds, gts),
        loss_frequency(preds, gts),
        loss_ssim(preds, gts, cfg),
        pred_dark_mean,
        w,
    )
