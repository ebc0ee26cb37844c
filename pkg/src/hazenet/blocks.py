"""The five feature-processing blocks the dehazing network is built from.

Three run inside every stage in cascade order — spatial harmonization,
prior aggregation, channel harmonization — and two form the bottleneck:
the sandwich module and the histogram-guided gate.  Each block is a pure
function of (input, parameters) and preserves the (n,c,h,w) shape.

The two harmonization blocks carry per-channel scaling factors that start
at exactly zero, so a freshly initialized block is transparent: SH reduces
to GELU of its 1x1 conv and CH's recalibration is the identity.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from hazenet import priors
from hazenet import tensor as T

__all__ = [
    "SHParams",
    "PAParams",
    "CHParams",
    "SMParams",
    "spatial_harmonization",
    "prior_aggregation",
    "channel_harmonization",
    "sandwich_module",
    "hegm_scores",
    "hegm_weights",
    "hegm_apply",
    "hegm",
]


@dataclass
class SHParams:
    conv_w: T.Tensor  # (c,c,1,1)
    conv_b: T.Tensor  # (c,)
    gamma: T.Tensor  # (c,), init 0


@dataclass
class PAParams:
    dw_w: T.Tensor  # (c,1,5,5)
    dw_b: T.Tensor  # (c,)
    ctx_w: T.Tensor  # (c,c+2,1,1) over [bright, dark, feature]
    ctx_b: T.Tensor  # (c,)
    gate_w: Optional[T.Tensor]  # (c,c,1,1); None when the gating branch is off
    gate_b: Optional[T.Tensor]  # (c,)


@dataclass
class CHParams:
    norm_scale: T.Tensor  # (c,)
    norm_shift: T.Tensor  # (c,)
    pre_w: T.Tensor  # (c,c,1,1)
    pre_b: T.Tensor  # (c,)
    dw_w: T.Tensor  # (c,1,3,3)
    dw_b: T.Tensor  # (c,)
    reduce_w: T.Tensor  # (1,c,1,1) channel-reducing projection, no bias
    gamma: T.Tensor  # (c,), init 0
    post_w: T.Tensor  # (c,c,1,1)
    post_b: T.Tensor  # (c,)


@dataclass
class SMParams:
    dw_w: T.Tensor  # (c,1,3,3)
    dw_b: T.Tensor  # (c,)
    bright_w: T.Tensor  # (c,2,3,3) over [bright map, channel mean]
    bright_b: T.Tensor  # (c,)
    dark_w: T.Tensor  # (c,2,3,3)
    dark_b: T.Tensor  # (c,)


def spatial_harmonization(x: T.Tensor, p: SHParams) -> T.Tensor:
    """GELU(y + gamma*(y - GAP(y))) of the 1x1-projected input.

    The recalibration contrasts each position against the channel's global
    mean; with gamma = 0 it degenerates to GELU(conv(x)) exactly.
    """
    y = T.conv2d(x, p.conv_w, p.conv_b)
    return T.gelu(T.center_scale(y, p.gamma))


def prior_aggregation(x: T.Tensor, p: PAParams, window: priors.PriorWindow) -> T.Tensor:
    """Fuse bright/dark-channel context with the feature through a SiLU gate.

    A 5x5 depthwise pass smooths the feature, its two channel-extreme maps
    are concatenated back onto it (c+2 channels), and a 1x1 conv restores c.
    When the gating branch is present the result is modulated by a second
    SiLU path computed from the unsmoothed input.
    """
    xd = T.dwconv2d(x, p.dw_w, p.dw_b)
    ctx = T.concat([priors.bright_channel(xd, window), priors.dark_channel(xd, window), xd])
    z = T.silu(T.conv2d(ctx, p.ctx_w, p.ctx_b))
    if p.gate_w is None:
        return z
    return T.mul(T.silu(T.conv2d(x, p.gate_w, p.gate_b)), z)


def channel_harmonization(x: T.Tensor, p: CHParams) -> T.Tensor:
    """Channel recalibration inside a residual: conv(CH(y)) + x.

    y is GELU(dw3x3(conv1x1(norm(x)))); CH(y) = y + gamma*(y - GELU(y.Wr))
    where Wr projects channels down to one map that is broadcast back.
    With gamma = 0, CH is the identity.
    """
    y = T.gelu(T.dwconv2d(T.conv2d(T.channel_layer_norm(x, p.norm_scale, p.norm_shift), p.pre_w, p.pre_b), p.dw_w, p.dw_b))
    squeezed = T.gelu(T.conv2d(y, p.reduce_w, T.constant(np.zeros(1))))
    ch = T.residual_scale(y, squeezed, p.gamma)
    return T.add(T.conv2d(ch, p.post_w, p.post_b), x)


def sandwich_module(f: T.Tensor, p: SMParams, window: priors.PriorWindow) -> T.Tensor:
    """dw(f) * (F_B + F_D) + dw(f): prior-located modulation of the feature.

    F_B and F_D each fuse one channel-extreme map with the channel-mean map
    (two single-channel planes) back up to c channels through a 3x3 conv;
    zeroing them leaves the plain depthwise path.
    """
    m = T.channel_mean(f)
    fb = T.conv2d(T.concat([priors.bright_channel(f, window), m]), p.bright_w, p.bright_b)
    fd = T.conv2d(T.concat([priors.dark_channel(f, window), m]), p.dark_w, p.dark_b)
    dw = T.dwconv2d(f, p.dw_w, p.dw_b)
    return T.add(T.mul(dw, T.add(fb, fd)), dw)


def hegm_scores(f: T.Tensor, levels: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel distribution-match scores against the equalized target.

    For each sample, all channel values are pooled, quantized over the
    sample's min-max range, and histogram-equalized; each channel's own
    histogram (same quantization) is then scored by cosine similarity to
    the equalized distribution.  Returns (scores, degenerate) where the
    flag marks constant samples.  This path carries no gradient.
    """
    fd = f.data if isinstance(f, T.Tensor) else np.asarray(f, dtype=np.float64)
    if fd.ndim != 4:
        raise T.ShapeError(f"hegm: expected (n,c,h,w), got {fd.shape}")
    n, c = fd.shape[0], fd.shape[1]
    scores = np.zeros((n, c))
    degenerate = np.zeros(n, dtype=bool)
    for i in range(n):
        sample = fd[i]
        res = priors.equalize(sample, levels)
        if res.degenerate:
            degenerate[i] = True
            continue
        lo, hi = float(sample.min()), float(sample.max())
        for ci in range(c):
            pc = priors.histogram(sample[ci], levels, lo, hi)
            scores[i, ci] = priors.cosine_similarity(pc, res.dist)
    return scores, degenerate


def hegm_weights(scores: np.ndarray, degenerate: np.ndarray) -> np.ndarray:
    """Normalize scores to channel weights: softmax scaled by c.

    Scaling by c makes the weights average ~1, so the gate is mean-neutral;
    higher-scoring channels never get smaller weights (softmax is monotone).
    Degenerate samples get exact unit weights.
    """
    n, c = scores.shape
    w = np.ones_like(scores)
    for i in range(n):
        if degenerate[i]:
            continue
        e = np.exp(scores[i] - scores[i].max())
        w[i] = e / e.sum() * c
    return w


def hegm_apply(f: T.Tensor, weights: np.ndarray) -> T.Tensor:
    """f * (weights x sigmoid(GAP(f))) + f; the GAP path carries gradient."""
    n, c = f.shape[0], f.shape[1]
    if weights.shape != (n, c):
        raise T.ShapeError(f"hegm weights {weights.shape} do not match feature {f.shape}")
    gate = T.mul(T.constant(weights.reshape(n, c, 1, 1)), T.sigmoid(T.gap(f)))
    return T.add(T.mul(f, gate), f)


def hegm(f: T.Tensor, levels: int) -> T.Tensor:
    """Histogram-guided channel gating with a residual connection."""
    scores, degenerate = hegm_scores(f, levels)
    return hegm_apply(f, hegm_weights(scores, degenerate))
