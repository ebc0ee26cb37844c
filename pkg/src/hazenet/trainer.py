"""Adam training loop with cosine learning-rate annealing.

Determinism contract: every stochastic decision in iteration i is drawn
from a generator seeded by (seed, i), never from a carried-over stream, so
a run resumed from a checkpoint continues bit-for-bit like the
uninterrupted one.  Target-side loss statistics (spectra, SSIM moments)
are pure functions of the dataset and are memoized per (sample, flip).
"""

from __future__ import annotations

import math
import os
import struct
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from hazenet import data, network, objectives
from hazenet import tensor as T
from hazenet.priors import PriorWindow

__all__ = [
    "TrainConfig",
    "AdamState",
    "TrainingDiverged",
    "TrainResult",
    "cosine_lr",
    "adam_step",
    "clip_global_norm",
    "train",
    "evaluate",
    "save_optimizer",
    "load_optimizer",
]

OPT_MAGIC = b"PGHO"
REG_WINDOW = PriorWindow(3)  # image-domain dark channel for the sparsity term


class TrainingDiverged(RuntimeError):
    """The loss became non-finite; message names the iteration and terms."""


@dataclass
class TrainConfig:
    # optimization
    iters: int = 2000
    batch: int = 8
    lr_init: float = 8e-4
    lr_final: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    # data
    patch: int = 64
    pairs: int = 64
    flip_prob: float = 0.5
    seed: int = 0
    # loss weights
    w_frequency: float = 0.5
    w_ssim: float = 1.0
    w_dark: float = 0.1
    # bookkeeping
    checkpoint_every: int = 500
    out_dir: str = "runs/desk"
    # architecture
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
        if self.iters < 1:
            raise ValueError(f"iters must be >= 1, got {self.iters}")
        if not self.lr_final < self.lr_init:
            raise ValueError(f"lr_final {self.lr_final} must be < lr_init {self.lr_init}")
        if self.batch < 1 or self.pairs < self.batch:
            raise ValueError(f"need 1 <= batch <= pairs, got batch {self.batch}, pairs {self.pairs}")
        if self.patch % 4:
            raise ValueError(f"patch must be divisible by 4, got {self.patch}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError(f"flip_prob must be in [0,1], got {self.flip_prob}")
        if self.checkpoint_every < 1:
            raise ValueError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")

    def arch(self) -> network.ArchConfig:
        return network.ArchConfig(
            base_width=self.base_width,
            enc_blocks=self.enc_blocks,
            dec_blocks=self.dec_blocks,
            window=self.window,
            levels=self.levels,
            gating=self.gating,
            pa=self.pa,
            sh=self.sh,
            ch=self.ch,
            sm=self.sm,
            hegm=self.hegm,
            parallel_bottleneck=self.parallel_bottleneck,
        )

    def weights(self) -> objectives.LossWeights:
        return objectives.LossWeights(self.w_frequency, self.w_ssim, self.w_dark)


def cosine_lr(step: int, cfg: TrainConfig) -> float:
    """lr_final + (lr_init - lr_final) * (1 + cos(pi*s/total)) / 2."""
    frac = min(max(step / cfg.iters, 0.0), 1.0)
    return cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + math.cos(math.pi * frac))


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, T.Tensor]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(t.data) for k, t in params.items()},
            v={k: np.zeros_like(t.data) for k, t in params.items()},
        )


def adam_step(
    params: dict[str, T.Tensor],
    grads: dict[str, np.ndarray],
    opt: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Standard bias-corrected Adam update, in place on the parameter data."""
    if grads.keys() != params.keys():
        missing = sorted(params.keys() - grads.keys())
        extra = sorted(grads.keys() - params.keys())
        raise KeyError(f"gradient keys do not match parameters (missing {missing}, extra {extra})")
    opt.step += 1
    bc1 = 1.0 - beta1**opt.step
    bc2 = 1.0 - beta2**opt.step
    for path, p in params.items():
        g = grads[path]
        m = opt.m[path]
        v = opt.v[path]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = math.sqrt(sum(float(np.dot(g.reshape(-1), g.reshape(-1))) for g in grads.values()))
    if total > max_norm and total > 0.0:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


# ---------------------------------------------------------------------------
# optimizer sidecar (moments + progress next to the model checkpoint)
# ---------------------------------------------------------------------------


def save_optimizer(path, opt: AdamState, next_iter: int, best_psnr: float) -> None:
    with open(path, "wb") as f:
        f.write(OPT_MAGIC)
        f.write(struct.pack("<I", 1))
        f.write(struct.pack("<IId", opt.step, next_iter, best_psnr))
        f.write(struct.pack("<I", len(opt.m)))
        for name in opt.m:
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            for moments in (opt.m[name], opt.v[name]):
                f.write(struct.pack("<I", moments.size))
                f.write(np.ascontiguousarray(moments, dtype="<f8").tobytes())


def load_optimizer(path, params: dict[str, T.Tensor]) -> tuple[AdamState, int, float]:
    def read(f, count):
        buf = f.read(count)
        if len(buf) != count:
            raise ValueError(f"{path}: truncated optimizer state")
        return buf

    with open(path, "rb") as f:
        if read(f, 4) != OPT_MAGIC:
            raise ValueError(f"{path}: not an optimizer state file")
        (version,) = struct.unpack("<I", read(f, 4))
        if version != 1:
            raise ValueError(f"{path}: unsupported optimizer format {version}")
        step, next_iter, best_psnr = struct.unpack("<IId", read(f, 16))
        (count,) = struct.unpack("<I", read(f, 4))
        opt = AdamState({}, {}, step)
        for _ in range(count):
            (name_len,) = struct.unpack("<H", read(f, 2))
            name = read(f, name_len).decode("utf-8")
            if name not in params:
                raise ValueError(f"{path}: optimizer entry {name} has no matching parameter")
            shape = params[name].data.shape
            for store in (opt.m, opt.v):
                (size,) = struct.unpack("<I", read(f, 4))
                if size != params[name].size:
                    raise ValueError(f"{path}: moment size mismatch for {name}")
                store[name] = np.frombuffer(read(f, 8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    if opt.m.keys() != params.keys():
        missing = sorted(params.keys() - opt.m.keys())
        raise ValueError(f"{path}: optimizer state missing parameters {missing}")
    return opt, next_iter, best_psnr


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class LogRow:
    iteration: int
    lr: float
    total: float
    spatial: float
    frequency: float
    ssim: float
    dark: float
    grad_norm: float


@dataclass
class TrainResult:
    state: network.ModelState
    log: list[LogRow]
    best_psnr: float
    seconds: float


@dataclass
class _TargetPack:
    """Per-(sample, flip) loss constants: images, spectra, SSIM moments."""

    hazy: np.ndarray
    scales: list[np.ndarray]
    ffts: list[tuple[np.ndarray, np.ndarray]]
    mus: list[np.ndarray]
    sq_blurs: list[np.ndarray]


def _pack_target(sample: data.ImageSample, flip: bool, sscfg: objectives.SSIMConfig) -> _TargetPack:
    s = data.hflip(sample) if flip else sample
    scales = [s.clean.data]
    for _ in range(2):
        scales.append(T.downsample_area2x(T.constant(scales[-1])).data)
    ffts = []
    mus = []
    sq_blurs = []
    with T.no_grad():
        for arr in scales:
            t = T.constant(arr)
            re, im = T.fft2d(t)
            ffts.append((re.data, im.data))
            stats = objectives.ssim_target_stats(t, sscfg)
            mus.append(stats.mu.data)
            sq_blurs.append(stats.sq_blur.data)
    return _TargetPack(s.hazy.data, scales, ffts, mus, sq_blurs)


def _make_samples(cfg: TrainConfig) -> list[data.ImageSample]:
    return [data.make_sample([cfg.seed, 2, k], cfg.patch, cfg.patch) for k in range(cfg.pairs)]


def train(
    cfg: TrainConfig,
    resume_from: Optional[str] = None,
    on_log: Optional[Callable[[LogRow], None]] = None,
) -> TrainResult:
    """Run the full loop; writes periodic and final checkpoints to out_dir.

    ``resume_from`` names a checkpoint stem written by a previous run (the
    model file; its .opt sidecar must sit next to it); iterations continue
    where that run stopped and match its uninterrupted continuation bitwise.
    """
    started = time.monotonic()
    os.makedirs(cfg.out_dir, exist_ok=True)
    arch = cfg.arch()
    weights = cfg.weights()
    sscfg = objectives.SSIMConfig()

    if resume_from is not None:
        state = network.load(resume_from)
        opt, start_iter, best_psnr = load_optimizer(str(resume_from) + ".opt", state.params)
    else:
        state = network.build(arch, [cfg.seed, 1])
        opt = AdamState.zeros_like(state.params)
        start_iter = 0
        best_psnr = -math.inf

    samples = _make_samples(cfg)
    cache: dict[tuple[int, bool], _TargetPack] = {}

    def pack(k: int, flip: bool) -> _TargetPack:
        key = (k, flip)
        if key not in cache:
            cache[key] = _pack_target(samples[k], flip, sscfg)
        return cache[key]

    log: list[LogRow] = []
    for it in range(start_iter, cfg.iters):
        lr = cosine_lr(it, cfg)
        rng = np.random.default_rng([cfg.seed, 3, it])
        idx = rng.choice(cfg.pairs, size=cfg.batch, replace=False)
        flips = rng.random(cfg.batch) < cfg.flip_prob
        packs = [pack(int(k), bool(fl)) for k, fl in zip(idx, flips)]

        hazy = T.constant(np.concatenate([q.hazy for q in packs]))
        targets = [T.constant(np.concatenate([q.scales[s] for q in packs])) for s in range(3)]
        ffts = [
            (
                T.constant(np.concatenate([q.ffts[s][0] for q in packs])),
                T.constant(np.concatenate([q.ffts[s][1] for q in packs])),
            )
            for s in range(3)
        ]
        stats = [
            objectives.SSIMTargetStats(
                targets[s],
                T.constant(np.concatenate([q.mus[s] for q in packs])),
                T.constant(np.concatenate([q.sq_blurs[s] for q in packs])),
            )
            for s in range(3)
        ]

        preds = network.forward(state, hazy)
        sp = objectives.loss_spatial(preds, targets)
        fq = objectives.loss_frequency_at(preds, ffts)
        ss = objectives.loss_ssim_at(preds, stats, sscfg)
        dk = objectives.dark_channel_mean(preds[0], REG_WINDOW)
        total = objectives.compose_total(sp, fq, ss, dk, weights)

        vals = (total.item(), sp.item(), fq.item(), ss.item(), dk.item())
        if not all(math.isfinite(v) for v in vals):
            raise TrainingDiverged(
                f"non-finite loss at iteration {it}: total={vals[0]} spatial={vals[1]} "
                f"frequency={vals[2]} ssim={vals[3]} dark={vals[4]}"
            )

        tensor_grads = T.backward(total)
        grads = {
            path: tensor_grads[t] if t in tensor_grads else np.zeros_like(t.data)
            for path, t in state.params.items()
        }
        norm = clip_global_norm(grads, cfg.clip_norm)
        adam_step(state.params, grads, opt, lr, cfg.beta1, cfg.beta2, cfg.eps)

        row = LogRow(it, lr, *vals, norm)
        log.append(row)
        if on_log is not None:
            on_log(row)

        if (it + 1) % cfg.checkpoint_every == 0 or it + 1 == cfg.iters:
            stem = os.path.join(cfg.out_dir, f"ckpt_{it + 1:06d}.pgh2")
            network.save(state, stem)
            save_optimizer(stem + ".opt", opt, it + 1, best_psnr)
            psnr_now = _mean_train_psnr(state, samples, cfg.batch)
            if psnr_now > best_psnr:
                best_psnr = psnr_now
                network.save(state, os.path.join(cfg.out_dir, "best.pgh2"))

    final = os.path.join(cfg.out_dir, "final.pgh2")
    network.save(state, final)
    save_optimizer(final + ".opt", opt, cfg.iters, best_psnr)
    _write_log(os.path.join(cfg.out_dir, "train_log.csv"), log)
    return TrainResult(state, log, best_psnr, time.monotonic() - started)


def _write_log(path, log: list[LogRow]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("iteration,lr,total,spatial,frequency,ssim,dark,grad_norm\n")
        for r in log:
            f.write(
                f"{r.iteration},{r.lr!r},{r.total!r},{r.spatial!r},{r.frequency!r},"
                f"{r.ssim!r},{r.dark!r},{r.grad_norm!r}\n"
            )


def _forward_batched(state: network.ModelState, images: list[np.ndarray], batch: int) -> list[np.ndarray]:
    outs: list[np.ndarray] = []
    with T.no_grad():
        for i in range(0, len(images), batch):
            chunk = np.concatenate(images[i : i + batch])
            pred = network.forward(state, T.constant(chunk))[0]
            outs.extend(pred.data[j : j + 1] for j in range(pred.shape[0]))
    return outs


def _mean_train_psnr(state: network.ModelState, samples: list[data.ImageSample], batch: int) -> float:
    preds = _forward_batched(state, [s.hazy.data for s in samples], batch)
    scores = [objectives.psnr(np.clip(p, 0.0, 1.0), s.clean.data) for p, s in zip(preds, samples)]
    return float(np.mean(scores))


def evaluate(
    state: network.ModelState, items: list[tuple[str, T.Tensor, T.Tensor]]
) -> tuple[list[tuple[str, float, float]], float, float]:
    """Score full-resolution restorations; returns per-image rows and means.

    ``items`` holds (name, clean, hazy) triples; restored outputs are
    clamped to [0,1] before scoring.
    """
    if not items:
        raise ValueError("nothing to evaluate")
    rows = []
    with T.no_grad():
        for name, clean, hazy in items:
            pred = network.forward(state, hazy)[0]
            restored = T.constant(np.clip(pred.data, 0.0, 1.0))
            p = objectives.psnr(restored, clean)
            s = objectives.mean_ssim(restored, clean).item()
            rows.append((name, p, s))
    mean_p = float(np.mean([r[1] for r in rows]))
    mean_s = float(np.mean([r[2] for r in rows]))
    return rows, mean_p, mean_s
