"""Statistical image priors: bright/dark channel maps, histograms, equalization.

The channel maps are thin wrappers over the windowed min/max tensor ops and
participate in the gradient tape.  Everything histogram-shaped is plain
numpy on purpose: bin counts have zero (or undefined) derivatives, so these
functions act as stop-gradient statistics wherever they feed the network.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hazenet import tensor as T

__all__ = [
    "PriorWindow",
    "Distribution",
    "EqualizeResult",
    "dark_channel",
    "bright_channel",
    "histogram",
    "histogram_counts",
    "cdf",
    "equalize",
    "equalize_image",
    "cosine_similarity",
]


@dataclass(frozen=True)
class PriorWindow:
    """Side length of the square patch each map value is pooled over."""

    size: int = 3

    def __post_init__(self):
        if self.size < 1 or self.size % 2 == 0:
            raise ValueError(f"window size must be odd and >= 1, got {self.size}")


@dataclass(frozen=True)
class Distribution:
    """A normalized histogram over ``levels`` equal-width bins."""

    levels: int
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "probs", probs)
        if probs.shape != (self.levels,):
            raise ValueError(f"probs shape {probs.shape} != levels {self.levels}")
        if np.any(probs < 0.0):
            raise ValueError("probabilities must be nonnegative")
        if abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {probs.sum()}, expected 1")


def dark_channel(f: T.Tensor, window: PriorWindow) -> T.Tensor:
    """Min over channels and a window around each position; (n,1,h,w) output."""
    return T.window_min(f, window.size)


def bright_channel(f: T.Tensor, window: PriorWindow) -> T.Tensor:
    """Max over channels and a window around each position; (n,1,h,w) output."""
    return T.window_max(f, window.size)


def _as_array(values) -> np.ndarray:
    if isinstance(values, T.Tensor):
        return values.data
    return np.asarray(values, dtype=np.float64)


def histogram_counts(values, levels: int, lo: float, hi: float) -> np.ndarray:
    """Integer bin counts of ``values`` over ``levels`` equal bins of [lo, hi].

    Values are clamped into the range first; the top edge lands in the last
    bin.  Summed counts equal the element count exactly.
    """
    v = _as_array(values).reshape(-1)
    if v.size == 0:
        raise ValueError("histogram of an empty slice")
    if not hi > lo:
        raise ValueError(f"histogram range [{lo}, {hi}] is empty")
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    scaled = (np.clip(v, lo, hi) - lo) * (levels / (hi - lo))
    idx = np.minimum(scaled.astype(np.int64), levels - 1)
    return np.bincount(idx, minlength=levels)


def histogram(values, levels: int, lo: float, hi: float) -> Distribution:
    """Occurrence ratios of ``values`` over ``levels`` bins spanning [lo, hi]."""
    counts = histogram_counts(values, levels, lo, hi)
    return Distribution(levels, counts / counts.sum())


def cdf(d: Distribution) -> np.ndarray:
    """Cumulative distribution; nondecreasing, last entry 1."""
    return np.cumsum(d.probs)


@dataclass(frozen=True)
class EqualizeResult:
    """Equalized values in level units plus the distribution they follow.

    ``values`` holds integer levels in [0, levels-1] as float64, shaped like
    the input.  ``degenerate`` marks a constant input, where the remap is the
    identity on the single occupied level.
    """

    values: np.ndarray
    dist: Distribution
    degenerate: bool


def _round_half_up(x: np.ndarray) -> np.ndarray:
    # deterministic .5 handling; numpy's round() would go to even
    return np.floor(x + 0.5)


def equalize(values, levels: int) -> EqualizeResult:
    """Histogram-equalize ``values`` after quantizing to ``levels`` levels.

    Quantization spans the input's own min-max range.  Each occupied level i
    is remapped to round((cdf(i) - cdf_min) / (1 - cdf_min) * (levels - 1))
    with cdf_min the smallest nonzero CDF entry; the remap is monotone.
    """
    v = _as_array(values)
    if v.size == 0:
        raise ValueError("equalize of an empty slice")
    lo = float(v.min())
    hi = float(v.max())
    if not hi > lo:
        probs = np.zeros(levels)
        probs[0] = 1.0
        return EqualizeResult(np.zeros_like(v), Distribution(levels, probs), True)
    scaled = (v - lo) * (levels / (hi - lo))
    q = np.minimum(scaled.astype(np.int64), levels - 1)
    counts = np.bincount(q.reshape(-1), minlength=levels)
    c = np.cumsum(counts / counts.sum())
    cdf_min = c[np.flatnonzero(counts)[0]]
    remap = _round_half_up((c - cdf_min) / (1.0 - cdf_min) * (levels - 1))
    remap = np.clip(remap, 0.0, levels - 1)
    out = remap[q]
    out_counts = np.zeros(levels)
    np.add.at(out_counts, remap.astype(np.int64), counts)
    return EqualizeResult(out, Distribution(levels, out_counts / counts.sum()), False)


def equalize_image(img, levels: int = 256) -> np.ndarray:
    """Equalize an image's values and rescale the levels onto [0, 1].

    Constant images pass through unchanged (the remap denominator is zero).
    """
    v = _as_array(img)
    res = equalize(v, levels)
    if res.degenerate:
        return v.copy()
    return res.values / (levels - 1)


def cosine_similarity(a: Distribution, b: Distribution) -> float:
    """cos of the angle between two histograms; 1 iff proportional."""
    if a.levels != b.levels:
        raise ValueError(f"level mismatch: {a.levels} vs {b.levels}")
    na = float(np.linalg.norm(a.probs))
    nb = float(np.linalg.norm(b.probs))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity of a zero-norm distribution")
    return float(np.dot(a.probs, b.probs) / (na * nb))
