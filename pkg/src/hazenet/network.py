"""Three-scale encoder-decoder assembly of the dehazing blocks.

Layout: a 3x3 stem, three encoder scales of [SH -> PA -> CH] block
cascades with stride-2 downsampling between them, a bottleneck where the
sandwich module and the histogram gate run as parallel branches summed
with the feature, and a mirrored decoder with skip fusion.  Each scale
ends in a zero-initialized 3x3 head predicting a residual over the
area-downsampled input, so an untrained network is an identity restorer.

Parameters live in one ordered path->tensor map; the checkpoint format is
a small self-describing binary (magic "PGH2") holding the config and raw
float64 records, so save/load round-trips are bitwise exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from hazenet import blocks, priors
from hazenet import tensor as T

__all__ = [
    "ArchConfig",
    "ModelState",
    "CheckpointError",
    "build",
    "forward",
    "save",
    "load",
]

MAGIC = b"PGH2"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """A checkpoint file is malformed or does not match the model."""


@dataclass(frozen=True)
class ArchConfig:
    """Shape of the network; widths double per scale from ``base_width``."""

    base_width: int = 16
    enc_blocks: tuple[int, int, int] = (2, 2, 2)
    dec_blocks: tuple[int, int] = (2, 2)
    window: int = 3
    levels: int = 64
    gating: bool = True
    pa: bool = True
    sh: bool = True
    ch: bool = True
    sm: bool = True
    hegm: bool = True
    parallel_bottleneck: bool = True

    def __post_init__(self):
        object.__setattr__(self, "enc_blocks", tuple(int(b) for b in self.enc_blocks))
        object.__setattr__(self, "dec_blocks", tuple(int(b) for b in self.dec_blocks))
        if self.base_width < 1:
            raise ValueError(f"base_width must be >= 1, got {self.base_width}")
        if len(self.enc_blocks) != 3 or len(self.dec_blocks) != 2:
            raise ValueError("expected 3 encoder stages and 2 decoder stages")
        if any(b < 1 for b in self.enc_blocks + self.dec_blocks):
            raise ValueError("every stage needs at least one block")
        if self.levels < 2:
            raise ValueError(f"levels must be >= 2, got {self.levels}")
        w = self.widths
        if not (w[0] < w[1] < w[2]):
            raise ValueError(f"widths must strictly increase, got {w}")

    @property
    def widths(self) -> tuple[int, int, int]:
        c = self.base_width
        return (c, 2 * c, 4 * c)

    @property
    def prior_window(self) -> priors.PriorWindow:
        return priors.PriorWindow(self.window)


class ModelState:
    """Ordered path->parameter map plus the config that shaped it."""

    def __init__(self, cfg: ArchConfig, params: dict[str, T.Tensor]):
        self.cfg = cfg
        self.params = params

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def __getitem__(self, path: str) -> T.Tensor:
        return self.params[path]


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def _conv_init(rng: np.random.Generator, co: int, ci: int, kh: int, kw: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / np.sqrt(ci * kh * kw), size=(co, ci, kh, kw))


def _dw_init(rng: np.random.Generator, c: int, kh: int, kw: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / np.sqrt(kh * kw), size=(c, 1, kh, kw))


def build(cfg: ArchConfig, seed) -> ModelState:
    """Create a fresh parameter set; same (cfg, seed) gives identical tensors."""
    rng = np.random.default_rng(seed)
    params: dict[str, T.Tensor] = {}

    def add(path: str, data: np.ndarray) -> None:
        if path in params:
            raise ValueError(f"duplicate parameter path {path}")
        params[path] = T.parameter(data)

    def add_conv(prefix: str, co: int, ci: int, k: int) -> None:
        add(prefix + ".weight", _conv_init(rng, co, ci, k, k))
        add(prefix + ".bias", np.zeros(co))

    def add_block(prefix: str, c: int) -> None:
        if cfg.sh:
            add_conv(prefix + ".sh.conv", c, c, 1)
            add(prefix + ".sh.gamma", np.zeros(c))
        if cfg.pa:
            add(prefix + ".pa.dw.weight", _dw_init(rng, c, 5, 5))
            add(prefix + ".pa.dw.bias", np.zeros(c))
            add_conv(prefix + ".pa.ctx", c, c + 2, 1)
            if cfg.gating:
                add_conv(prefix + ".pa.gate", c, c, 1)
        if cfg.ch:
            add(prefix + ".ch.norm.scale", np.ones(c))
            add(prefix + ".ch.norm.shift", np.zeros(c))
            add_conv(prefix + ".ch.pre", c, c, 1)
            add(prefix + ".ch.dw.weight", _dw_init(rng, c, 3, 3))
            add(prefix + ".ch.dw.bias", np.zeros(c))
            add(prefix + ".ch.reduce.weight", _conv_init(rng, 1, c, 1, 1))
            add(prefix + ".ch.gamma", np.zeros(c))
            add_conv(prefix + ".ch.post", c, c, 1)

    widths = cfg.widths
    add_conv("stem", widths[0], 3, 3)
    for s in range(3):
        for b in range(cfg.enc_blocks[s]):
            add_block(f"enc.{s}.{b}", widths[s])
        if s < 2:
            add_conv(f"down.{s}", widths[s + 1], widths[s], 3)
    if cfg.sm:
        c3 = widths[2]
        add("bottleneck.sm.dw.weight", _dw_init(rng, c3, 3, 3))
        add("bottleneck.sm.dw.bias", np.zeros(c3))
        add_conv("bottleneck.sm.bright", c3, 2, 3)
        add_conv("bottleneck.sm.dark", c3, 2, 3)
    for i, s in enumerate((1, 0)):  # decoder stages at scale 2 then scale 1
        add_conv(f"up.{i}", widths[s], widths[s + 1], 3)
        add_conv(f"fuse.{i}", widths[s], 2 * widths[s], 1)
        for b in range(cfg.dec_blocks[i]):
            add_block(f"dec.{i}.{b}", widths[s])
    for i in range(3):
        add(f"head.{i}.weight", np.zeros((3, widths[i], 3, 3)))
        add(f"head.{i}.bias", np.zeros(3))
    return ModelState(cfg, params)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def _run_blocks(x: T.Tensor, state: ModelState, prefix: str, count: int) -> T.Tensor:
    cfg = state.cfg
    p = state.params
    window = cfg.prior_window
    for b in range(count):
        pre = f"{prefix}.{b}"
        if cfg.sh:
            x = blocks.spatial_harmonization(
                x, blocks.SHParams(p[pre + ".sh.conv.weight"], p[pre + ".sh.conv.bias"], p[pre + ".sh.gamma"])
            )
        if cfg.pa:
            x = blocks.prior_aggregation(
                x,
                blocks.PAParams(
                    p[pre + ".pa.dw.weight"],
                    p[pre + ".pa.dw.bias"],
                    p[pre + ".pa.ctx.weight"],
                    p[pre + ".pa.ctx.bias"],
                    p[pre + ".pa.gate.weight"] if cfg.gating else None,
                    p[pre + ".pa.gate.bias"] if cfg.gating else None,
                ),
                window,
            )
        if cfg.ch:
            x = blocks.channel_harmonization(
                x,
                blocks.CHParams(
                    p[pre + ".ch.norm.scale"],
                    p[pre + ".ch.norm.shift"],
                    p[pre + ".ch.pre.weight"],
                    p[pre + ".ch.pre.bias"],
                    p[pre + ".ch.dw.weight"],
                    p[pre + ".ch.dw.bias"],
                    p[pre + ".ch.reduce.weight"],
                    p[pre + ".ch.gamma"],
                    p[pre + ".ch.post.weight"],
                    p[pre + ".ch.post.bias"],
                ),
            )
    return x


def _bottleneck(f: T.Tensor, state: ModelState) -> T.Tensor:
    cfg = state.cfg
    p = state.params
    def sm_fn(t: T.Tensor) -> T.Tensor:
        return blocks.sandwich_module(
            t,
            blocks.SMParams(
                p["bottleneck.sm.dw.weight"],
                p["bottleneck.sm.dw.bias"],
                p["bottleneck.sm.bright.weight"],
                p["bottleneck.sm.bright.bias"],
                p["bottleneck.sm.dark.weight"],
                p["bottleneck.sm.dark.bias"],
            ),
            cfg.prior_window,
        )
    if cfg.parallel_bottleneck:
        out = f
        if cfg.sm:
            out = T.add(out, sm_fn(f))
        if cfg.hegm:
            out = T.add(out, blocks.hegm(f, cfg.levels))
        return out
    out = f
    if cfg.sm:
        out = sm_fn(out)
    if cfg.hegm:
        out = blocks.hegm(out, cfg.levels)
    return out


def forward(state: ModelState, hazy: T.Tensor) -> list[T.Tensor]:
    """Run the network; returns [full, half, quarter] scale predictions."""
    T._require_nchw(hazy, "forward")
    n, c, h, w = hazy.shape
    if c != 3:
        raise T.ShapeError(f"forward: expected 3 input channels, got {c}")
    if h % 4 or w % 4:
        raise T.ShapeError(f"forward: spatial dims must be divisible by 4, got {h}x{w}")
    cfg = state.cfg
    p = state.params

    x = T.conv2d(hazy, p["stem.weight"], p["stem.bias"], padding="zero")
    skips = []
    for s in range(3):
        x = _run_blocks(x, state, f"enc.{s}", cfg.enc_blocks[s])
        if s < 2:
            skips.append(x)
            x = T.conv2d(x, p[f"down.{s}.weight"], p[f"down.{s}.bias"], stride=2)

    feats = {2: _bottleneck(x, state)}
    d = feats[2]
    for i, s in enumerate((1, 0)):
        d = T.conv2d(T.upsample_nearest2x(d), p[f"up.{i}.weight"], p[f"up.{i}.bias"])
        d = T.conv2d(T.concat([d, skips[s]]), p[f"fuse.{i}.weight"], p[f"fuse.{i}.bias"])
        d = _run_blocks(d, state, f"dec.{i}", cfg.dec_blocks[i])
        feats[s] = d

    half = T.downsample_area2x(hazy)
    quarter = T.downsample_area2x(half)
    bases = [hazy, half, quarter]
    outs = []
    for i in range(3):
        res = T.conv2d(feats[i], p[f"head.{i}.weight"], p[f"head.{i}.bias"])
        outs.append(T.add(bases[i], res))
    return outs


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------


def _read_exact(f, count: int) -> bytes:
    buf = f.read(count)
    if len(buf) != count:
        raise CheckpointError("truncated checkpoint")
    return buf


def save(state: ModelState, path) -> None:
    cfg_json = json.dumps(asdict(state.cfg), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<I", len(cfg_json)))
        f.write(cfg_json)
        f.write(struct.pack("<I", len(state.params)))
        for name, tensor in state.params.items():
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            shape = tensor.data.shape
            f.write(struct.pack("<B", len(shape)))
            for dim in shape:
                f.write(struct.pack("<I", dim))
            f.write(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())


def load(path) -> ModelState:
    """Rebuild a saved model; bitwise identical to the state that was saved."""
    with open(path, "rb") as f:
        if _read_exact(f, 4) != MAGIC:
            raise CheckpointError(f"{path}: not a model checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        (cfg_len,) = struct.unpack("<I", _read_exact(f, 4))
        try:
            cfg_dict = json.loads(_read_exact(f, cfg_len).decode("utf-8"))
            cfg = ArchConfig(**cfg_dict)
        except (ValueError, TypeError) as e:
            raise CheckpointError(f"{path}: bad embedded config: {e}") from None
        state = build(cfg, seed=0)
        (n_records,) = struct.unpack("<I", _read_exact(f, 4))
        filled = set()
        for _ in range(n_records):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2))
            name = _read_exact(f, name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(f, 1))
            shape = tuple(struct.unpack("<I", _read_exact(f, 4))[0] for _ in range(ndim))
            count = int(np.prod(shape)) if shape else 1
            raw = _read_exact(f, 8 * count)
            if name not in state.params:
                raise CheckpointError(f"{path}: unknown parameter {name}")
            expected = state.params[name].data.shape
            if shape != expected:
                raise CheckpointError(
                    f"{path}: parameter {name}: checkpoint shape {shape} != model shape {expected}"
                )
            state.params[name].data = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
            filled.add(name)
        for name in state.params:
            if name not in filled:
                raise CheckpointError(f"{path}: missing parameter {name}")
    return state
