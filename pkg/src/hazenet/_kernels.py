"""JIT-compiled inner loops for the bandwidth-bound tensor ops.

Pure-numpy formulations of depthwise convolution and windowed min/max walk
the array once per kernel tap and dominate the training-step budget on one
core.  These kernels keep x innermost so the compiler can vectorize each
output row; accumulation order over taps matches the numpy tap loop, so
results are bitwise identical to the straightforward formulation.

fastmath stays off everywhere: reproducibility beats the last 2x.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

__all__ = [
    "dw_forward",
    "dw_grad_input",
    "dw_grad_weight",
    "im2col",
    "col2im_add",
    "window_extreme",
    "scatter_window_grad",
    "gelu_forward",
    "silu_backward",
    "norm_forward",
    "norm_backward",
    "fft_rows_inplace",
]


@njit(cache=True)
def im2col(xp: np.ndarray, kh: int, kw: int, stride: int, col: np.ndarray) -> None:
    """Unfold padded input (n,ci,Hp,Wp) into col (ci*kh*kw, n*oh*ow)."""
    n, ci, hp, wp = xp.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    for c in range(ci):
        for i in range(kh):
            for j in range(kw):
                r = (c * kh + i) * kw + j
                crow = col[r]
                for ni in range(n):
                    base = ni * oh * ow
                    for y in range(oh):
                        xrow = xp[ni, c, y * stride + i]
                        o = base + y * ow
                        for x in range(ow):
                            crow[o + x] = xrow[x * stride + j]


@njit(cache=True)
def col2im_add(cols: np.ndarray, kh: int, kw: int, stride: int, gxp: np.ndarray) -> None:
    """Fold col-layout grads (ci*kh*kw, n*oh*ow) back onto the padded input grad."""
    n, ci, hp, wp = gxp.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    gxp[:] = 0.0
    for c in range(ci):
        for i in range(kh):
            for j in range(kw):
                r = (c * kh + i) * kw + j
                crow = cols[r]
                for ni in range(n):
                    base = ni * oh * ow
                    for y in range(oh):
                        xrow = gxp[ni, c, y * stride + i]
                        o = base + y * ow
                        if stride == 1:
                            for x in range(ow):
                                xrow[x + j] += crow[o + x]
                        else:
                            for x in range(ow):
                                xrow[x * stride + j] += crow[o + x]


@njit(cache=True)
def dw_forward(xp: np.ndarray, wd: np.ndarray, out: np.ndarray) -> None:
    """Depthwise valid correlation of padded input xp (n,c,Hp,Wp) with wd (c,kh,kw)."""
    n, c, hp, wp = xp.shape
    kh, kw = wd.shape[1], wd.shape[2]
    h = hp - kh + 1
    w = wp - kw + 1
    for ni in range(n):
        for ci in range(c):
            for y in range(h):
                orow = out[ni, ci, y]
                orow[:] = 0.0
                for i in range(kh):
                    xrow = xp[ni, ci, y + i]
                    for j in range(kw):
                        kij = wd[ci, i, j]
                        for x in range(w):
                            orow[x] += xrow[x + j] * kij


@njit(cache=True)
def dw_grad_input(g: np.ndarray, wd: np.ndarray, gxp: np.ndarray) -> None:
    """Scatter output grads g (n,c,h,w) back onto the padded input grad gxp."""
    n, c, h, w = g.shape
    kh, kw = wd.shape[1], wd.shape[2]
    gxp[:] = 0.0
    for ni in range(n):
        for ci in range(c):
            for y in range(h):
                grow = g[ni, ci, y]
                for i in range(kh):
                    xrow = gxp[ni, ci, y + i]
                    for j in range(kw):
                        kij = wd[ci, i, j]
                        for x in range(w):
                            xrow[x + j] += grow[x] * kij


@njit(cache=True)
def dw_grad_weight(xp: np.ndarray, g: np.ndarray, gw: np.ndarray) -> None:
    """Per-tap correlation of output grads with the padded input.

    Four-lane partial sums break the serial dependence of a single
    accumulator so the row reduction can vectorize; the lane-combine order
    is fixed, keeping results reproducible.
    """
    n, c, h, w = g.shape
    kh, kw = gw.shape[1], gw.shape[2]
    w4 = w - (w % 4)
    gw[:] = 0.0
    for ni in range(n):
        for ci in range(c):
            for y in range(h):
                grow = g[ni, ci, y]
                for i in range(kh):
                    xrow = xp[ni, ci, y + i]
                    for j in range(kw):
                        s0 = 0.0
                        s1 = 0.0
                        s2 = 0.0
                        s3 = 0.0
                        for x in range(0, w4, 4):
                            s0 += grow[x] * xrow[x + j]
                            s1 += grow[x + 1] * xrow[x + 1 + j]
                            s2 += grow[x + 2] * xrow[x + 2 + j]
                            s3 += grow[x + 3] * xrow[x + 3 + j]
                        s = (s0 + s1) + (s2 + s3)
                        for x in range(w4, w):
                            s += grow[x] * xrow[x + j]
                        gw[ci, i, j] += s


@njit(cache=True)
def window_extreme(
    mp: np.ndarray,
    ridx_h: np.ndarray,
    ridx_w: np.ndarray,
    window: int,
    use_min: bool,
    out: np.ndarray,
    src_y: np.ndarray,
    src_x: np.ndarray,
) -> None:
    """Windowed min or max over padded per-pixel extremes mp (n,Hp,Wp).

    Ties resolve to the first attaining position in row-major window order;
    src_y/src_x record the winner's unpadded source pixel for the backward
    scatter (ridx_* map padded positions back through the reflection).
    """
    n, hp, wp = mp.shape
    h = hp - window + 1
    w = wp - window + 1
    for ni in range(n):
        for y in range(h):
            for x in range(w):
                best = mp[ni, y, x]
                by = 0
                bx = 0
                for i in range(window):
                    row = mp[ni, y + i]
                    for j in range(window):
                        v = row[x + j]
                        if (use_min and v < best) or (not use_min and v > best):
                            best = v
                            by = i
                            bx = j
                out[ni, 0, y, x] = best
                src_y[ni, y, x] = ridx_h[y + by]
                src_x[ni, y, x] = ridx_w[x + bx]


@njit(cache=True)
def scatter_window_grad(
    g: np.ndarray, cstar: np.ndarray, src_y: np.ndarray, src_x: np.ndarray, gx: np.ndarray
) -> None:
    """Accumulate window-extreme output grads onto the winning input elements."""
    n, h, w = g.shape
    for ni in range(n):
        for y in range(h):
            for x in range(w):
                sy = src_y[ni, y, x]
                sx = src_x[ni, y, x]
                gx[ni, cstar[ni, sy, sx], sy, sx] += g[ni, y, x]


@njit(cache=True)
def gelu_forward(x: np.ndarray, out: np.ndarray, cdf: np.ndarray) -> None:
    """Exact GELU x*Phi(x); also stores Phi(x) for reuse in the backward pass."""
    xf = x.reshape(-1)
    of = out.reshape(-1)
    cf = cdf.reshape(-1)
    inv_sqrt2 = 0.7071067811865476
    for i in range(xf.size):
        v = xf[i]
        ph = 0.5 * (1.0 + math.erf(v * inv_sqrt2))
        cf[i] = ph
        of[i] = v * ph


@njit(cache=True)
def silu_backward(g: np.ndarray, x: np.ndarray, s: np.ndarray, out: np.ndarray) -> None:
    """d(x*sigmoid(x)) folded into one pass: out = g * s * (1 + x * (1 - s))."""
    gf = g.reshape(-1)
    xf = x.reshape(-1)
    sf = s.reshape(-1)
    of = out.reshape(-1)
    for i in range(xf.size):
        si = sf[i]
        of[i] = gf[i] * si * (1.0 + xf[i] * (1.0 - si))


@njit(cache=True)
def norm_forward(
    x: np.ndarray,
    scale: np.ndarray,
    shift: np.ndarray,
    eps: float,
    out: np.ndarray,
    xhat: np.ndarray,
    inv_std: np.ndarray,
) -> None:
    """Channel-axis layer norm of (n,c,h,w) with per-channel affine.

    The channel axis has stride h*w, so the reduction runs as c sweeps over
    each contiguous w-row instead of a strided per-position loop.  Variance
    is the two-pass centered form (matches the straightforward formulation
    to rounding, no cancellation).
    """
    n, c, h, w = x.shape
    mu = np.empty(w)
    var = np.empty(w)
    for ni in range(n):
        for y in range(h):
            for j in range(w):
                mu[j] = 0.0
            for ci in range(c):
                row = x[ni, ci, y]
                for j in range(w):
                    mu[j] += row[j]
            for j in range(w):
                mu[j] /= c
                var[j] = 0.0
            for ci in range(c):
                row = x[ni, ci, y]
                for j in range(w):
                    d = row[j] - mu[j]
                    var[j] += d * d
            irow = inv_std[ni, y]
            for j in range(w):
                irow[j] = 1.0 / math.sqrt(var[j] / c + eps)
            for ci in range(c):
                row = x[ni, ci, y]
                s = scale[ci]
                b = shift[ci]
                xrow = xhat[ni, ci, y]
                orow = out[ni, ci, y]
                for j in range(w):
                    xh = (row[j] - mu[j]) * irow[j]
                    xrow[j] = xh
                    orow[j] = s * xh + b


@njit(cache=True)
def norm_backward(
    g: np.ndarray,
    xhat: np.ndarray,
    inv_std: np.ndarray,
    scale: np.ndarray,
    gx: np.ndarray,
    gscale: np.ndarray,
    gshift: np.ndarray,
) -> None:
    """Input/scale/shift gradients of norm_forward in two sweeps per row."""
    n, c, h, w = g.shape
    m1 = np.empty(w)
    m2 = np.empty(w)
    for ci in range(c):
        gscale[ci] = 0.0
        gshift[ci] = 0.0
    for ni in range(n):
        for y in range(h):
            for j in range(w):
                m1[j] = 0.0
                m2[j] = 0.0
            for ci in range(c):
                grow = g[ni, ci, y]
                xrow = xhat[ni, ci, y]
                s = scale[ci]
                accs = 0.0
                accb = 0.0
                for j in range(w):
                    gv = grow[j]
                    xh = xrow[j]
                    gy = gv * s
                    m1[j] += gy
                    m2[j] += gy * xh
                    accs += gv * xh
                    accb += gv
                gscale[ci] += accs
                gshift[ci] += accb
            irow = inv_std[ni, y]
            for j in range(w):
                m1[j] /= c
                m2[j] /= c
            for ci in range(c):
                grow = g[ni, ci, y]
                xrow = xhat[ni, ci, y]
                orow = gx[ni, ci, y]
                s = scale[ci]
                for j in range(w):
                    orow[j] = irow[j] * (grow[j] * s - m1[j] - xrow[j] * m2[j])


@njit(cache=True)
def fft_rows_inplace(a: np.ndarray, rev: np.ndarray, tw: np.ndarray) -> None:
    """Radix-2 decimation-in-time FFT of every row of a (rows, n) complex array.

    rev is the bit-reversal permutation, tw the length-n/2 twiddle table
    exp(-2*pi*i*k/n).  Each row (<= a few KB) stays cache-resident through
    all log2(n) stages.
    """
    rows, n = a.shape
    for b in range(rows):
        row = a[b]
        for i in range(n):
            j = rev[i]
            if j > i:
                t = row[i]
                row[i] = row[j]
                row[j] = t
        size = 2
        while size <= n:
            half = size >> 1
            step = n // size
            for start in range(0, n, size):
                for k in range(half):
                    w = tw[k * step]
                    u = row[start + k]
                    v = row[start + k + half] * w
                    row[start + k] = u + v
                    row[start + k + half] = u - v
            size <<= 1
