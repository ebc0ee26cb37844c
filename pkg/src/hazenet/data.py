"""Synthetic training data: procedural clean images plus scattering-model haze.

A hazy observation is clean*t + A*(1-t) with transmission t = exp(-beta*d)
over a smooth random depth field, which is the standard single-scattering
image formation model.  Everything is a pure function of integer seeds so
runs are reproducible bit for bit.

Images travel as (1,3,h,w) float tensors in [0,1] and interchange on disk
as binary PPM (P6, maxval 255).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from hazenet import tensor as T

__all__ = [
    "HazeParams",
    "ImageSample",
    "generate_clean",
    "make_depth",
    "synthesize",
    "make_sample",
    "hflip",
    "augment",
    "random_crop",
    "load_ppm",
    "save_ppm",
    "load_manifest",
]


@dataclass(frozen=True)
class HazeParams:
    """Atmospheric scattering parameters for one synthesized pair."""

    airlight: np.ndarray  # (3,) per-channel A
    beta: float
    depth: np.ndarray  # (h,w) in [0,1]

    def __post_init__(self):
        airlight = np.asarray(self.airlight, dtype=np.float64)
        depth = np.asarray(self.depth, dtype=np.float64)
        object.__setattr__(self, "airlight", airlight)
        object.__setattr__(self, "depth", depth)
        if airlight.shape != (3,):
            raise ValueError(f"airlight must be (3,), got {airlight.shape}")
        if self.beta <= 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if depth.ndim != 2:
            raise ValueError(f"depth must be 2-D, got shape {depth.shape}")


@dataclass(frozen=True)
class ImageSample:
    clean: T.Tensor  # (1,3,h,w) in [0,1]
    hazy: T.Tensor
    params: HazeParams
    seed: int


def _bilinear_upsample(grid: np.ndarray, h: int, w: int) -> np.ndarray:
    """Stretch a small grid to (h,w); grid corners map to image corners."""
    gh, gw = grid.shape
    ys = np.linspace(0.0, gh - 1.0, h)
    xs = np.linspace(0.0, gw - 1.0, w)
    y0 = np.minimum(ys.astype(np.int64), gh - 2) if gh > 1 else np.zeros(h, np.int64)
    x0 = np.minimum(xs.astype(np.int64), gw - 2) if gw > 1 else np.zeros(w, np.int64)
    fy = (ys - y0).reshape(-1, 1)
    fx = (xs - x0).reshape(1, -1)
    y1 = np.minimum(y0 + 1, gh - 1)
    x1 = np.minimum(x0 + 1, gw - 1)
    top = grid[np.ix_(y0, x0)] * (1 - fx) + grid[np.ix_(y0, x1)] * fx
    bot = grid[np.ix_(y1, x0)] * (1 - fx) + grid[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def make_depth(rng: np.random.Generator, h: int, w: int, grid: int = 4) -> np.ndarray:
    """Smooth depth field in [0,1] from a bilinearly stretched random grid."""
    coarse = rng.random((grid, grid))
    d = _bilinear_upsample(coarse, h, w)
    lo, hi = d.min(), d.max()
    if hi > lo:
        d = (d - lo) / (hi - lo)
    else:
        d = np.zeros_like(d)
    return d


def generate_clean(seed, h: int, w: int) -> T.Tensor:
    """Procedural clean image: gradients, random rectangles/disks, texture.

    The layering is chosen to spread values across most of the 8-bit range;
    flat cartoon images would make histogram statistics degenerate.
    """
    rng = np.random.default_rng(seed)
    yy = np.linspace(0.0, 1.0, h).reshape(-1, 1)
    xx = np.linspace(0.0, 1.0, w).reshape(1, -1)
    img = np.empty((3, h, w))
    for c in range(3):
        a, b = rng.uniform(-1.0, 1.0, size=2)
        base = a * xx + b * yy
        lo, hi = base.min(), base.max()
        span = hi - lo if hi > lo else 1.0
        img[c] = 0.15 + 0.7 * (base - lo) / span

    cy, cx = np.arange(h).reshape(-1, 1), np.arange(w).reshape(1, -1)
    for _ in range(int(rng.integers(6, 13))):
        color = rng.uniform(0.0, 1.0, size=3).reshape(3, 1, 1)
        alpha = rng.uniform(0.35, 1.0)
        if rng.random() < 0.5:
            y0, x0 = rng.integers(0, h), rng.integers(0, w)
            hh = int(rng.integers(max(2, h // 8), max(3, h // 2)))
            ww = int(rng.integers(max(2, w // 8), max(3, w // 2)))
            mask = (cy >= y0) & (cy < y0 + hh) & (cx >= x0) & (cx < x0 + ww)
        else:
            y0, x0 = rng.integers(0, h), rng.integers(0, w)
            r = int(rng.integers(max(2, min(h, w) // 10), max(3, min(h, w) // 3)))
            mask = (cy - y0) ** 2 + (cx - x0) ** 2 <= r * r
        img = np.where(mask, (1 - alpha) * img + alpha * color, img)

    coarse = rng.normal(0.0, 1.0, size=(8, 8))
    img += 0.1 * _bilinear_upsample(coarse, h, w)
    img += rng.normal(0.0, 0.02, size=(3, h, w))
    return T.constant(np.clip(img, 0.0, 1.0)[None])


def synthesize(clean: T.Tensor, p: HazeParams) -> T.Tensor:
    """hazy = clean*t + A*(1-t) with t = exp(-beta*depth), exact (no clipping)."""
    cd = clean.data if isinstance(clean, T.Tensor) else np.asarray(clean, dtype=np.float64)
    if cd.ndim != 4 or cd.shape[1] != 3:
        raise T.ShapeError(f"synthesize: expected (n,3,h,w), got {cd.shape}")
    if p.depth.shape != cd.shape[2:]:
        raise T.ShapeError(f"depth {p.depth.shape} does not match image {cd.shape[2:]}")
    t = np.exp(-p.beta * p.depth)[None, None]
    hazy = cd * t + p.airlight.reshape(1, 3, 1, 1) * (1.0 - t)
    return T.constant(hazy)


def make_sample(
    seed,
    h: int,
    w: int,
    airlight_range: tuple[float, float] = (0.7, 1.0),
    beta_range: tuple[float, float] = (0.4, 1.6),
) -> ImageSample:
    """Deterministically synthesize one clean/hazy training pair."""
    clean = generate_clean(seed, h, w)
    rng = np.random.default_rng([9, *_seed_list(seed)])
    airlight = rng.uniform(*airlight_range, size=3)
    beta = float(rng.uniform(*beta_range))
    depth = make_depth(rng, h, w)
    params = HazeParams(airlight, beta, depth)
    tag = _seed_list(seed)[-1]
    return ImageSample(clean, synthesize(clean, params), params, int(tag))


def _seed_list(seed) -> list[int]:
    if isinstance(seed, (int, np.integer)):
        return [int(seed)]
    return [int(s) for s in seed]


def hflip(sample: ImageSample) -> ImageSample:
    """Mirror both images (and the depth field) left-right."""
    params = replace(sample.params, depth=sample.params.depth[:, ::-1].copy())
    return ImageSample(
        T.constant(sample.clean.data[..., ::-1].copy()),
        T.constant(sample.hazy.data[..., ::-1].copy()),
        params,
        sample.seed,
    )


def augment(sample: ImageSample, seed) -> ImageSample:
    """Horizontal flip with probability 0.5; the only augmentation used."""
    rng = np.random.default_rng(seed)
    if rng.random() < 0.5:
        return hflip(sample)
    return sample


def random_crop(sample: ImageSample, size: int, seed) -> ImageSample:
    """Crop the same size x size window from both images."""
    _, _, h, w = sample.clean.shape
    if size > h or size > w:
        raise ValueError(f"crop {size} exceeds image {h}x{w}")
    rng = np.random.default_rng(seed)
    y0 = int(rng.integers(0, h - size + 1))
    x0 = int(rng.integers(0, w - size + 1))
    params = replace(sample.params, depth=sample.params.depth[y0 : y0 + size, x0 : x0 + size].copy())
    return ImageSample(
        T.constant(sample.clean.data[..., y0 : y0 + size, x0 : x0 + size].copy()),
        T.constant(sample.hazy.data[..., y0 : y0 + size, x0 : x0 + size].copy()),
        params,
        sample.seed,
    )


# ---------------------------------------------------------------------------
# PPM (P6) interchange
# ---------------------------------------------------------------------------


def _next_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos : pos + 1]
        if c == b"#":
            while pos < n and buf[pos : pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ValueError("malformed PPM header: missing token")
    return buf[start:pos], pos


def load_ppm(path) -> T.Tensor:
    """Read a binary P6 file into a (1,3,h,w) tensor of [0,1] floats."""
    with open(path, "rb") as f:
        buf = f.read()
    magic, pos = _next_token(buf, 0)
    if magic != b"P6":
        raise ValueError(f"{path}: not a binary PPM (magic {magic!r})")
    wtok, pos = _next_token(buf, pos)
    htok, pos = _next_token(buf, pos)
    mtok, pos = _next_token(buf, pos)
    try:
        w, h, maxval = int(wtok), int(htok), int(mtok)
    except ValueError:
        raise ValueError(f"{path}: malformed PPM header") from None
    if w < 1 or h < 1:
        raise ValueError(f"{path}: bad dimensions {w}x{h}")
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
    pos += 1  # single whitespace after maxval
    payload = buf[pos : pos + 3 * h * w]
    if len(payload) < 3 * h * w:
        raise ValueError(f"{path}: truncated pixel data")
    raw = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return T.constant(raw.transpose(2, 0, 1)[None] / 255.0)


def save_ppm(img, path) -> None:
    """Write a (1,3,h,w) or (3,h,w) tensor as binary P6, rounding half up."""
    data = img.data if isinstance(img, T.Tensor) else np.asarray(img, dtype=np.float64)
    if data.ndim == 4:
        if data.shape[0] != 1:
            raise T.ShapeError(f"save_ppm: expected batch 1, got {data.shape}")
        data = data[0]
    if data.ndim != 3 or data.shape[0] != 3:
        raise T.ShapeError(f"save_ppm: expected (3,h,w), got {data.shape}")
    q = np.floor(np.clip(data, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w = q.shape[1], q.shape[2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(q.transpose(1, 2, 0).tobytes())


def load_manifest(path) -> list[tuple[str, str]]:
    """Read 'clean_path hazy_path' pairs, one per line; paths may be relative."""
    base = os.path.dirname(os.path.abspath(path))
    pairs = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'clean hazy', got {line!r}")
            pairs.append(tuple(os.path.join(base, p) if not os.path.isabs(p) else p for p in parts))
    if not pairs:
        raise ValueError(f"{path}: empty manifest")
    return pairs
