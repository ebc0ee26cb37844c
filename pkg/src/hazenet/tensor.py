"""Dense rank-4 tensors with reverse-mode automatic differentiation.

Feature maps are stored as (batch, channel, height, width) arrays of 64-bit
floats.  Every operation builds its piece of the gradient tape on the fly
(define-by-run): the tape is an ordered record of nodes, rebuilt on every
forward pass, and ``backward`` walks it once in reverse to produce exactly
one gradient per leaf parameter.

Design notes:
  * float64 everywhere; finite-difference gradient checks need the headroom.
  * Shape-preserving convolutions default to reflect padding; zero padding
    is reserved for the network stem.
  * GELU uses the exact Gaussian-CDF form (erf), not the tanh approximation.
  * Tensors are immutable once produced by an op; only an optimizer mutates
    leaf ``data`` in place, between forward passes.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from hazenet import _kernels

__all__ = [
    "Tensor",
    "GradTape",
    "ShapeError",
    "constant",
    "parameter",
    "no_grad",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "reshape",
    "concat",
    "gap",
    "channel_mean",
    "gelu",
    "silu",
    "sigmoid",
    "absolute",
    "sum_all",
    "mean_all",
    "conv2d",
    "dwconv2d",
    "channel_layer_norm",
    "center_scale",
    "residual_scale",
    "l1_mean",
    "window_min",
    "window_max",
    "upsample_nearest2x",
    "downsample_area2x",
    "fft2d",
]

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation-only forwards)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array plus its position in the gradient tape.

    ``requires_grad`` tensors are either leaves (parameters) or results of
    ops with at least one grad-requiring input.  Do not mutate ``data`` of
    non-leaf tensors; optimizers may update leaf data between passes.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def is_leaf(self) -> bool:
        return self.requires_grad and self._backward is None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; scalars take a cheap path that skips broadcasting.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)


def constant(data) -> Tensor:
    """Wrap data as a constant (no gradient flows into it)."""
    return Tensor(data)


def parameter(data) -> Tensor:
    """Wrap data as a learnable leaf."""
    return Tensor(data, requires_grad=True)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out._op = op
    return out


class GradTape:
    """Topologically ordered record of the ops reachable from one output.

    ``nodes`` lists every tensor in an order where inputs precede the ops
    that consume them; ``leaves`` are the grad-requiring tensors with no
    recorded producer (the parameters).
    """

    __slots__ = ("nodes", "leaves")

    def __init__(self, nodes: list[Tensor], leaves: list[Tensor]):
        self.nodes = nodes
        self.leaves = leaves

    @classmethod
    def trace(cls, output: Tensor) -> "GradTape":
        nodes: list[Tensor] = []
        leaves: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                nodes.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t.is_leaf():
                leaves.append(t)
            stack.append((t, True))
            for p in t._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(nodes, leaves)


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode pass from a scalar loss.

    Returns one gradient array per leaf reachable from ``loss``, keyed by
    the leaf tensor itself and shaped exactly like it.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is detached from the gradient tape (no grad-requiring inputs)")
    tape = GradTape.trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape.nodes):
        g = grads.pop(id(t), None)
        if g is None or t._backward is None:
            if g is not None and t.is_leaf():
                grads[id(t)] = g  # keep leaf grads
            continue
        parts = t._backward(g)
        for p, pg in zip(t._parents, parts):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.data.shape:
                raise ShapeError(
                    f"internal: gradient shape {pg.shape} != tensor shape {p.data.shape} in op {t._op}"
                )
            acc = grads.get(id(p))
            grads[id(p)] = pg if acc is None else acc + pg
    return {leaf: grads[id(leaf)] for leaf in tape.leaves if id(leaf) in grads}


# ---------------------------------------------------------------------------
# elementwise ops with (restricted numpy) broadcasting
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum the broadcast axes of ``g`` back down to ``shape``."""
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    out = g.sum(axis=axes, keepdims=True) if axes else g
    if out.shape != shape:
        raise ShapeError(f"cannot reduce gradient {g.shape} to {shape}")
    return out


def _binary_data(a: Tensor, b: Tensor, opname: str) -> None:
    if a.data.ndim != b.data.ndim:
        raise ShapeError(f"{opname}: rank mismatch {a.shape} vs {b.shape}")
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: incompatible shapes {a.shape} vs {b.shape}") from None


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        return _make(a.data + s, (a,), lambda g: (g,), "add_s")
    if not isinstance(a, Tensor):
        return add(b, a)
    _binary_data(a, b, "add")
    out = a.data + b.data

    def bwd(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), bwd, "add")


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        return _make(a.data - s, (a,), lambda g: (g,), "sub_s")
    _binary_data(a, b, "sub")
    out = a.data - b.data

    def bwd(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), bwd, "sub")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        return _make(a.data * s, (a,), lambda g: (g * s,), "mul_s")
    if not isinstance(a, Tensor):
        return mul(b, a)
    _binary_data(a, b, "mul")
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return (ga, gb)

    return _make(out, (a, b), bwd, "mul")


def div(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / float(b))
    _binary_data(a, b, "div")
    out = a.data / b.data
    ad, bd = a.data, b.data

    def bwd(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None
        return (ga, gb)

    return _make(out, (a, b), bwd, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    orig = a.data.shape
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(orig),), "reshape")


def concat(parts: Iterable[Tensor], axis: int = 1) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat of zero tensors")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        sl = [slice(None)] * g.ndim
        grads = []
        for i, p in enumerate(parts):
            if p.requires_grad:
                sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
                grads.append(g[tuple(sl)])
            else:
                grads.append(None)
        return grads

    return _make(out, tuple(parts), bwd, "concat")


# ---------------------------------------------------------------------------
# reductions and pooling
# ---------------------------------------------------------------------------


def gap(x: Tensor) -> Tensor:
    """Global average pooling: spatial mean per channel, (n,c,h,w) -> (n,c,1,1)."""
    _require_nchw(x, "gap")
    n, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def bwd(g):
        return (np.broadcast_to(g / (h * w), (n, c, h, w)),)

    return _make(out, (x,), bwd, "gap")


def channel_mean(x: Tensor) -> Tensor:
    """Mean over channels, (n,c,h,w) -> (n,1,h,w)."""
    _require_nchw(x, "channel_mean")
    c = x.data.shape[1]
    out = x.data.mean(axis=1, keepdims=True)

    def bwd(g):
        return (np.broadcast_to(g / c, x.data.shape),)

    return _make(out, (x,), bwd, "channel_mean")


def sum_all(x: Tensor) -> Tensor:
    """Full reduction to a (1,1,1,1) scalar tensor."""
    out = np.full((1, 1, 1, 1), x.data.sum())

    def bwd(g):
        return (np.broadcast_to(g.reshape(1, 1, 1, 1), x.data.shape),)

    return _make(out, (x,), bwd, "sum_all")


def mean_all(x: Tensor) -> Tensor:
    out = np.full((1, 1, 1, 1), x.data.mean())
    inv = 1.0 / x.data.size

    def bwd(g):
        return (np.broadcast_to(g.reshape(1, 1, 1, 1) * inv, x.data.shape),)

    return _make(out, (x,), bwd, "mean_all")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x) with the Gaussian CDF via erf."""
    xd = np.ascontiguousarray(x.data)
    out = np.empty_like(xd)
    phi_cdf = np.empty_like(xd)
    _kernels.gelu_forward(xd, out, phi_cdf)

    def bwd(g):
        # d/dx x*Phi(x) = Phi(x) + x*pdf(x), built in place to avoid temporaries
        t = xd * xd
        t *= -0.5
        np.exp(t, out=t)
        t *= _INV_SQRT_2PI
        t *= xd
        t += phi_cdf
        t *= g
        return (t,)

    return _make(out, (x,), bwd, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def bwd(g):
        return (g * s * (1.0 - s),)

    return _make(s, (x,), bwd, "sigmoid")


def silu(x: Tensor) -> Tensor:
    """SiLU, x * sigmoid(x)."""
    xd = np.ascontiguousarray(x.data)
    s = _sigmoid(xd)
    out = xd * s

    def bwd(g):
        gx = np.empty_like(xd)
        _kernels.silu_backward(np.ascontiguousarray(g), xd, s, gx)
        return (gx,)

    return _make(out, (x,), bwd, "silu")


def absolute(x: Tensor) -> Tensor:
    out = np.abs(x.data)
    sgn = np.sign(x.data)

    def bwd(g):
        return (g * sgn,)

    return _make(out, (x,), bwd, "abs")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # float64 exp saturates cleanly: exp(large) -> inf -> 1/(1+inf) = 0
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


# ---------------------------------------------------------------------------
# padding helpers (shared by convolutions and windowed min/max)
# ---------------------------------------------------------------------------


def _reflect_index(length: int, pad: int) -> np.ndarray:
    """Source index for each position of a reflect-padded axis (edge not repeated)."""
    idx = np.arange(-pad, length + pad)
    idx = np.abs(idx)
    idx = np.where(idx >= length, 2 * length - 2 - idx, idx)
    return idx


def _pad2d(x: np.ndarray, ph: int, pw: int, mode: str) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    width = [(0, 0)] * (x.ndim - 2) + [(ph, ph), (pw, pw)]
    if mode == "zero":
        return np.pad(x, width, mode="constant")
    if mode == "reflect":
        h, w = x.shape[-2], x.shape[-1]
        if ph > h - 1 or pw > w - 1:
            raise ShapeError(f"reflect pad ({ph},{pw}) too large for spatial size ({h},{w})")
        return np.pad(x, width, mode="reflect")
    raise ValueError(f"unknown padding mode {mode!r}")


def _fold_pad2d_grad(g: np.ndarray, ph: int, pw: int, mode: str) -> np.ndarray:
    """Gradient of _pad2d: fold padded-border gradients back onto their sources."""
    if ph == 0 and pw == 0:
        return g
    h = g.shape[-2] - 2 * ph
    w = g.shape[-1] - 2 * pw
    if mode == "zero":
        return g[..., ph : ph + h, pw : pw + w]
    # reflect: the two axis maps are independent, so fold rows first, then columns;
    # padded row p-k reflects source row k, padded row h+p-1+k reflects row h-1-k
    core = g[..., ph : ph + h, :].copy()
    if ph:
        core[..., 1 : ph + 1, :] += g[..., ph - 1 :: -1, :]
        core[..., h - ph - 1 : h - 1, :] += g[..., : h + ph - 1 : -1, :]
    if pw == 0:
        return core
    out = core[..., :, pw : pw + w].copy()
    out[..., :, 1 : pw + 1] += core[..., :, pw - 1 :: -1]
    out[..., :, w - pw - 1 : w - 1] += core[..., :, : w + pw - 1 : -1]
    return out


def _require_nchw(x: Tensor, opname: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{opname}: expected a rank-4 (n,c,h,w) tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: str = "reflect") -> Tensor:
    """2-D cross-correlation with (co,ci,kh,kw) weights and a per-output bias.

    ``padding`` is one of "zero" / "reflect" (shape-preserving for stride 1)
    or "valid" (no padding).  Output spatial size is
    floor((h + 2p - k) / stride) + 1 per axis.
    """
    _require_nchw(x, "conv2d")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d: weight must be rank-4 (co,ci,kh,kw), got {weight.shape}")
    n, ci, h, w = x.data.shape
    co, wci, kh, kw = weight.data.shape
    if wci != ci:
        raise ShapeError(f"conv2d: input channels {x.shape} do not match weight {weight.shape}")
    if bias.data.shape != (co,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} must be ({co},)")
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    if padding == "valid":
        ph = pw = 0
        mode = "zero"
    elif padding in ("zero", "reflect"):
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"conv2d: same padding needs odd kernels, got ({kh},{kw})")
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
        mode = padding
    else:
        raise ValueError(f"conv2d: unknown padding {padding!r}")
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise ShapeError(f"conv2d: kernel ({kh},{kw}) larger than padded input ({h + 2 * ph},{w + 2 * pw})")

    xp = _pad2d(x.data, ph, pw, mode)
    oh = (h + 2 * ph - kh) // stride + 1
    ow = (w + 2 * pw - kw) // stride + 1

    if kh == 1 and kw == 1 and stride == 1:
        # pointwise conv is a batched channel matmul
        w2 = weight.data[:, :, 0, 0]
        x3 = np.ascontiguousarray(xp).reshape(n, ci, h * w)
        out = np.matmul(w2, x3).reshape(n, co, h, w)
        out += bias.data.reshape(1, co, 1, 1)

        def bwd_pw(g):
            gw = gx = gb = None
            g3 = np.ascontiguousarray(g).reshape(n, co, h * w)
            if weight.requires_grad:
                gw = np.matmul(g3, x3.swapaxes(1, 2)).sum(axis=0).reshape(co, ci, 1, 1)
            if x.requires_grad:
                gx = np.matmul(w2.T, g3).reshape(n, ci, h, w)
            if bias.requires_grad:
                gb = g3.sum(axis=(0, 2))
            return (gx, gw, gb)

        return _make(out, (x, weight, bias), bwd_pw, "conv1x1")

    # im2col once; forward and both weight/input grads are then single GEMMs
    xp = np.ascontiguousarray(xp)
    col = np.empty((ci * kh * kw, n * oh * ow))
    _kernels.im2col(xp, kh, kw, stride, col)
    wf = weight.data.reshape(co, ci * kh * kw)
    out = np.matmul(wf, col).reshape(co, n, oh, ow).transpose(1, 0, 2, 3)
    out = out + bias.data.reshape(1, co, 1, 1)  # binary add also makes the output contiguous

    def bwd(g):
        gx = gw = gb = None
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(co, n * oh * ow)
        if weight.requires_grad:
            gw = np.matmul(g2, col.T).reshape(co, ci, kh, kw)
        if x.requires_grad:
            gcol = np.matmul(wf.T, g2)
            gxp = np.empty_like(xp)
            _kernels.col2im_add(gcol, kh, kw, stride, gxp)
            gx = _fold_pad2d_grad(gxp, ph, pw, mode)
        return (gx, gw, gb)

    return _make(out, (x, weight, bias), bwd, "conv2d")


def dwconv2d(x: Tensor, weight: Tensor, bias: Tensor, padding: str = "reflect") -> Tensor:
    """Depthwise convolution: channel i of the output depends only on channel i.

    ``weight`` has shape (c, 1, kh, kw); padding is always shape-preserving.
    Rectangular kernels are allowed (used for separable filters).
    """
    _require_nchw(x, "dwconv2d")
    n, c, h, w = x.data.shape
    if weight.data.ndim != 4 or weight.data.shape[1] != 1:
        raise ShapeError(f"dwconv2d: weight must be (c,1,kh,kw), got {weight.shape}")
    wc, _, kh, kw = weight.data.shape
    if wc != c:
        raise ShapeError(f"dwconv2d: weight channels {weight.shape} do not match input {x.shape}")
    if bias.data.shape != (c,):
        raise ShapeError(f"dwconv2d: bias shape {bias.shape} must be ({c},)")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"dwconv2d: kernels must be odd, got ({kh},{kw})")
    if padding not in ("zero", "reflect"):
        raise ValueError(f"dwconv2d: unknown padding {padding!r}")
    ph, pw = (kh - 1) // 2, (kw - 1) // 2

    xp = np.ascontiguousarray(_pad2d(x.data, ph, pw, padding))
    wd = np.ascontiguousarray(weight.data[:, 0])
    out = np.empty((n, c, h, w))
    _kernels.dw_forward(xp, wd, out)
    out += bias.data.reshape(1, c, 1, 1)

    def bwd(g):
        gx = gw = gb = None
        g = np.ascontiguousarray(g)
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if weight.requires_grad:
            gw = np.empty((c, kh, kw))
            _kernels.dw_grad_weight(xp, g, gw)
            gw = gw[:, None]
        if x.requires_grad:
            gxp = np.empty_like(xp)
            _kernels.dw_grad_input(g, wd, gxp)
            gx = _fold_pad2d_grad(gxp, ph, pw, padding)
        return (gx, gw, gb)

    return _make(out, (x, weight, bias), bwd, "dwconv2d")


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def channel_layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize across channels at each (n,h,w) position, then affine scale/shift."""
    _require_nchw(x, "channel_layer_norm")
    n, c, h, w = x.data.shape
    if scale.data.shape != (c,) or shift.data.shape != (c,):
        raise ShapeError(f"channel_layer_norm: scale/shift must be ({c},)")
    if eps <= 0:
        raise ValueError("channel_layer_norm: eps must be positive")
    xd = np.ascontiguousarray(x.data)
    out = np.empty_like(xd)
    xhat = np.empty_like(xd)
    inv_std = np.empty((n, h, w))
    _kernels.norm_forward(xd, scale.data, shift.data, eps, out, xhat, inv_std)

    def bwd(g):
        gx = np.empty_like(xd)
        gscale = np.empty(c)
        gshift = np.empty(c)
        _kernels.norm_backward(np.ascontiguousarray(g), xhat, inv_std, scale.data, gx, gscale, gshift)
        return (
            gx if x.requires_grad else None,
            gscale if scale.requires_grad else None,
            gshift if shift.requires_grad else None,
        )

    return _make(out, (x, scale, shift), bwd, "channel_layer_norm")


def residual_scale(y: Tensor, inner: Tensor, gamma: Tensor) -> Tensor:
    """y + gamma*(y - inner) with a per-channel gamma; identity at gamma = 0.

    ``inner`` either matches ``y`` or is a single-channel map (n,1,h,w)
    broadcast across channels.
    """
    _require_nchw(y, "residual_scale")
    n, c, h, w = y.data.shape
    if inner.data.shape not in ((n, c, h, w), (n, 1, h, w)):
        raise ShapeError(f"residual_scale: shapes {y.shape} vs {inner.shape}")
    if gamma.data.shape != (c,):
        raise ShapeError(f"residual_scale: gamma must be ({c},), got {gamma.shape}")
    gam = gamma.data.reshape(1, c, 1, 1)
    diff = y.data - inner.data
    out = y.data + gam * diff

    def bwd(g):
        gy = gin = ggamma = None
        if gamma.requires_grad:
            ggamma = (g * diff).sum(axis=(0, 2, 3))
        if y.requires_grad:
            gy = (1.0 + gam) * g
        if inner.requires_grad:
            gin = _unbroadcast(-gam * g, inner.data.shape)
        return (gy, gin, ggamma)

    return _make(out, (y, inner, gamma), bwd, "residual_scale")


def l1_mean(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference as a (1,1,1,1) scalar tensor."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"l1_mean: shapes {a.shape} vs {b.shape}")
    diff = a.data - b.data
    sgn = np.sign(diff)
    out = np.full((1, 1, 1, 1), np.abs(diff).mean())
    inv = 1.0 / diff.size

    def bwd(g):
        ga = gb = None
        scale = g.reshape(()) * inv
        if a.requires_grad:
            ga = sgn * scale
        if b.requires_grad:
            gb = sgn * (-scale)
        return (ga, gb)

    return _make(out, (a, b), bwd, "l1_mean")


def center_scale(x: Tensor, gamma: Tensor) -> Tensor:
    """Recalibrate each channel against its spatial mean: x + gamma*(x - GAP(x)).

    With gamma = 0 this is the identity, which is what makes zero-initialized
    recalibration branches start transparent.
    """
    _require_nchw(x, "center_scale")
    n, c, h, w = x.data.shape
    if gamma.data.shape != (c,):
        raise ShapeError(f"center_scale: gamma must be ({c},), got {gamma.shape}")
    m = x.data.mean(axis=(2, 3), keepdims=True)
    gam = gamma.data.reshape(1, c, 1, 1)
    centered = x.data - m
    out = x.data + gam * centered

    def bwd(g):
        gx = ggamma = None
        if gamma.requires_grad:
            ggamma = (g * centered).sum(axis=(0, 2, 3))
        if x.requires_grad:
            gx = (1.0 + gam) * g - gam * g.mean(axis=(2, 3), keepdims=True)
        return (gx, ggamma)

    return _make(out, (x, gamma), bwd, "center_scale")


# ---------------------------------------------------------------------------
# windowed channel min / max (dark and bright channel primitives)
# ---------------------------------------------------------------------------


def _window_extreme(x: Tensor, window: int, mode: str) -> Tensor:
    _require_nchw(x, f"window_{mode}")
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window size must be odd and >= 1, got {window}")
    n, c, h, w = x.data.shape
    p = (window - 1) // 2
    if mode == "min":
        m = x.data.min(axis=1)
        cstar = x.data.argmin(axis=1)
    else:
        m = x.data.max(axis=1)
        cstar = x.data.argmax(axis=1)
    if p == 0:
        out = m[:, None]

        def bwd_p0(g):
            gx = np.zeros_like(x.data)
            nn = np.arange(n)[:, None, None]
            yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
            np.add.at(gx, (nn, cstar, yy[None], xx[None]), g[:, 0])
            return (gx,)

        return _make(out, (x,), bwd_p0, f"window_{mode}")

    ridx_h = _reflect_index(h, p)
    ridx_w = _reflect_index(w, p)
    mp = np.ascontiguousarray(_pad2d(m, p, p, "reflect"))
    out = np.empty((n, 1, h, w))
    src_y = np.empty((n, h, w), dtype=np.int64)
    src_x = np.empty((n, h, w), dtype=np.int64)
    # ties resolve to the first window position in row-major scan order;
    # src indices already point back through the reflection to real pixels
    _kernels.window_extreme(mp, ridx_h, ridx_w, window, mode == "min", out, src_y, src_x)

    def bwd(g):
        gx = np.zeros_like(x.data)
        _kernels.scatter_window_grad(np.ascontiguousarray(g[:, 0]), cstar, src_y, src_x, gx)
        return (gx,)

    return _make(out, (x,), bwd, f"window_{mode}")


def window_min(x: Tensor, window: int) -> Tensor:
    """Min over channels then over a reflect-padded window: (n,c,h,w) -> (n,1,h,w)."""
    return _window_extreme(x, window, "min")


def window_max(x: Tensor, window: int) -> Tensor:
    """Max over channels then over a reflect-padded window: (n,c,h,w) -> (n,1,h,w)."""
    return _window_extreme(x, window, "max")


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Repeat every pixel 2x2."""
    _require_nchw(x, "upsample_nearest2x")
    n, c, h, w = x.data.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bwd(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), bwd, "upsample_nearest2x")


def downsample_area2x(x: Tensor) -> Tensor:
    """Average every 2x2 block; spatial dims must be even."""
    _require_nchw(x, "downsample_area2x")
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"downsample_area2x: odd spatial dims {x.shape}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bwd(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _make(out, (x,), bwd, "downsample_area2x")


# ---------------------------------------------------------------------------
# 2-D discrete Fourier transform (radix-2)
# ---------------------------------------------------------------------------


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


_fft_tables: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _fft_table(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Bit-reversal permutation and twiddle factors for a length-n transform."""
    cached = _fft_tables.get(n)
    if cached is not None:
        return cached
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for _ in range(bits):
        rev = (rev << 1) | (idx & 1)
        idx >>= 1
    tw = np.exp(-2j * np.pi * np.arange(max(n // 2, 1)) / n)
    _fft_tables[n] = (rev, tw)
    return rev, tw


def _fft1d_last(a: np.ndarray) -> np.ndarray:
    """Iterative radix-2 Cooley-Tukey along the last axis (length a power of two)."""
    n = a.shape[-1]
    out = np.ascontiguousarray(a, dtype=np.complex128)
    if out is a:
        out = a.copy()
    if n == 1:
        return out
    rev, tw = _fft_table(n)
    _kernels.fft_rows_inplace(out.reshape(-1, n), rev, tw)
    return out


def _fft2_core(a: np.ndarray) -> np.ndarray:
    """Unnormalized forward 2-D DFT over the last two axes."""
    a = _fft1d_last(a)
    a = _fft1d_last(a.swapaxes(-1, -2)).swapaxes(-1, -2)
    return a


def fft2d(x: Tensor) -> tuple[Tensor, Tensor]:
    """Forward unnormalized 2-D DFT over (h,w); returns (real, imag) tensors.

    Both spatial dims must be powers of two.  Satisfies Parseval:
    ||x||^2 == ||F(x)||^2 / (h*w).
    """
    _require_nchw(x, "fft2d")
    n, c, h, w = x.data.shape
    if not (_is_pow2(h) and _is_pow2(w)):
        raise ShapeError(f"fft2d: spatial dims must be powers of two, got ({h},{w})")
    spec = _fft2_core(x.data)

    def bwd_re(g):
        # d Re(F)[u,v] / d x[y,x] = cos(2pi(uy/H + vx/W)): fold back via a forward DFT
        return (_fft2_core(g).real,)

    def bwd_im(g):
        return (_fft2_core(g).imag,)

    re = _make(np.ascontiguousarray(spec.real), (x,), bwd_re, "fft2d_re")
    im = _make(np.ascontiguousarray(spec.imag), (x,), bwd_im, "fft2d_im")
    return re, im
