"""Network assembly tests: parameter accounting against an independent
shape-arithmetic oracle, exact identity at initialization, a full-forward
recomposition oracle, checkpoint round-trips, and corruption handling."""

import numpy as np
import pytest

import hazenet.tensor as T
from hazenet import blocks as B
from hazenet import network as N
from hazenet import priors as P


SEED = 20240505

SMALL = N.ArchConfig(base_width=4, enc_blocks=(1, 1, 1), dec_blocks=(1, 1))


def count_oracle(cfg):
    """Per-layer parameter arithmetic, written independently of build()."""
    w1, w2, w3 = cfg.base_width, 2 * cfg.base_width, 4 * cfg.base_width

    def conv(co, ci, k):
        return co * ci * k * k + co

    def block(c):
        n = 0
        if cfg.sh:
            n += conv(c, c, 1) + c  # projection + per-channel factor
        if cfg.pa:
            n += c * 25 + c  # depthwise 5x5
            n += conv(c, c + 2, 1)
            if cfg.gating:
                n += conv(c, c, 1)
        if cfg.ch:
            n += 2 * c  # norm affine
            n += conv(c, c, 1)  # pre
            n += c * 9 + c  # depthwise 3x3
            n += c  # channel-reducing projection, no bias
            n += c  # per-channel factor
            n += conv(c, c, 1)  # post
        return n

    total = conv(w1, 3, 3)  # stem
    widths = (w1, w2, w3)
    for s in range(3):
        total += cfg.enc_blocks[s] * block(widths[s])
        if s < 2:
            total += conv(widths[s + 1], widths[s], 3)
    if cfg.sm:
        total += w3 * 9 + w3 + 2 * conv(w3, 2, 3)
    for i, s in enumerate((1, 0)):
        total += conv(widths[s], widths[s + 1], 3)  # up
        total += conv(widths[s], 2 * widths[s], 1)  # skip fuse
        total += cfg.dec_blocks[i] * block(widths[s])
    for i in range(3):
        total += conv(3, widths[i], 3)  # heads
    return total


def randomize(state, seed):
    rng = np.random.default_rng(seed)
    for t in state.params.values():
        t.data = rng.normal(0.0, 0.25, t.data.shape)
    return state


# ---------------------------------------------------------------------------
# configuration and construction
# ---------------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        N.ArchConfig(base_width=0)
    with pytest.raises(ValueError):
        N.ArchConfig(enc_blocks=(1, 1))
    with pytest.raises(ValueError):
        N.ArchConfig(enc_blocks=(1, 0, 1))
    with pytest.raises(ValueError):
        N.ArchConfig(levels=1)
    assert N.ArchConfig(base_width=16).widths == (16, 32, 64)


def test_param_count_matches_shape_arithmetic_oracle():
    for cfg in (
        N.ArchConfig(),
        SMALL,
        N.ArchConfig(base_width=8, enc_blocks=(2, 1, 3), dec_blocks=(1, 2)),
        N.ArchConfig(gating=False),
        N.ArchConfig(sm=False, hegm=False),
    ):
        state = N.build(cfg, seed=0)
        assert state.param_count() == count_oracle(cfg)


def test_default_config_param_count_pinned():
    # two independent derivations agree on this figure; freeze it
    assert N.build(N.ArchConfig(), seed=0).param_count() == 137305
    assert count_oracle(N.ArchConfig()) == 137305


def test_build_is_seed_deterministic():
    a = N.build(SMALL, seed=11)
    b = N.build(SMALL, seed=11)
    c = N.build(SMALL, seed=12)
    assert sorted(a.params) == sorted(b.params)
    for k in a.params:
        assert np.array_equal(a.params[k].data, b.params[k].data)
    assert any(not np.array_equal(a.params[k].data, c.params[k].data) for k in a.params)


def test_enable_flags_and_param_counts():
    base = N.build(N.ArchConfig(), 0).param_count()
    for flag in ("gating", "pa", "sh", "ch", "sm"):
        off = N.build(N.ArchConfig(**{flag: False}), 0).param_count()
        assert off < base, f"disabling {flag} must drop parameters"
    # the histogram-guided gate is parameterless, so its flag cannot move
    # the count; it must still change the forward computation
    assert N.build(N.ArchConfig(hegm=False), 0).param_count() == base

    rng = np.random.default_rng(SEED)
    x = T.constant(rng.uniform(0.0, 1.0, (1, 3, 16, 16)))
    with_gate = N.forward(randomize(N.build(SMALL, 0), 3), x)[0].data
    cfg_off = N.ArchConfig(base_width=4, enc_blocks=(1, 1, 1), dec_blocks=(1, 1), hegm=False)
    without = N.forward(randomize(N.build(cfg_off, 0), 3), x)[0].data
    assert not np.array_equal(with_gate, without)


# ---------------------------------------------------------------------------
# forward behavior
# ---------------------------------------------------------------------------


def test_identity_at_initialization_exact():
    rng = np.random.default_rng(SEED + 1)
    state = N.build(SMALL, seed=5)
    hazy = T.constant(rng.uniform(0.0, 1.0, (2, 3, 16, 16)))
    outs = N.forward(state, hazy)
    half = T.downsample_area2x(hazy)
    quarter = T.downsample_area2x(half)
    assert np.array_equal(outs[0].data, hazy.data)
    assert np.array_equal(outs[1].data, half.data)
    assert np.array_equal(outs[2].data, quarter.data)


def test_forward_output_shapes():
    state = N.build(SMALL, seed=0)
    rng = np.random.default_rng(SEED + 2)
    outs = N.forward(state, T.constant(rng.uniform(0.0, 1.0, (1, 3, 64, 64))))
    assert [o.shape for o in outs] == [(1, 3, 64, 64), (1, 3, 32, 32), (1, 3, 16, 16)]


def test_forward_input_validation():
    state = N.build(SMALL, seed=0)
    with pytest.raises(T.ShapeError):
        N.forward(state, T.constant(np.zeros((1, 4, 16, 16))))
    with pytest.raises(T.ShapeError):
        N.forward(state, T.constant(np.zeros((1, 3, 18, 18))))


def test_forward_matches_block_recomposition_oracle():
    rng = np.random.default_rng(SEED + 3)
    state = randomize(N.build(SMALL, 0), SEED + 4)
    cfg, p = state.cfg, state.params
    win = P.PriorWindow(cfg.window)
    hazy = T.constant(rng.uniform(0.0, 1.0, (1, 3, 16, 16)))

    def run_block(x, pre):
        x = B.spatial_harmonization(
            x, B.SHParams(p[pre + ".sh.conv.weight"], p[pre + ".sh.conv.bias"], p[pre + ".sh.gamma"])
        )
        x = B.prior_aggregation(
            x,
            B.PAParams(
                p[pre + ".pa.dw.weight"], p[pre + ".pa.dw.bias"],
                p[pre + ".pa.ctx.weight"], p[pre + ".pa.ctx.bias"],
                p[pre + ".pa.gate.weight"], p[pre + ".pa.gate.bias"],
            ),
            win,
        )
        return B.channel_harmonization(
            x,
            B.CHParams(
                p[pre + ".ch.norm.scale"], p[pre + ".ch.norm.shift"],
                p[pre + ".ch.pre.weight"], p[pre + ".ch.pre.bias"],
                p[pre + ".ch.dw.weight"], p[pre + ".ch.dw.bias"],
                p[pre + ".ch.reduce.weight"], p[pre + ".ch.gamma"],
                p[pre + ".ch.post.weight"], p[pre + ".ch.post.bias"],
            ),
        )

    x = T.conv2d(hazy, p["stem.weight"], p["stem.bias"], padding="zero")
    skips = []
    for s in range(3):
        x = run_block(x, f"enc.{s}.0")
        if s < 2:
            skips.append(x)
            x = T.conv2d(x, p[f"down.{s}.weight"], p[f"down.{s}.bias"], stride=2)

    sm_out = B.sandwich_module(
        x,
        B.SMParams(
            p["bottleneck.sm.dw.weight"], p["bottleneck.sm.dw.bias"],
            p["bottleneck.sm.bright.weight"], p["bottleneck.sm.bright.bias"],
            p["bottleneck.sm.dark.weight"], p["bottleneck.sm.dark.bias"],
        ),
        win,
    )
    d = T.add(T.add(x, sm_out), B.hegm(x, cfg.levels))
    feat2 = d

    feat1 = None
    for i, s in enumerate((1, 0)):
        d = T.conv2d(T.upsample_nearest2x(d), p[f"up.{i}.weight"], p[f"up.{i}.bias"])
        d = T.conv2d(T.concat([d, skips[s]]), p[f"fuse.{i}.weight"], p[f"fuse.{i}.bias"])
        d = run_block(d, f"dec.{i}.0")
        if s == 1:
            feat1 = d
    feat0 = d

    half = T.downsample_area2x(hazy)
    quarter = T.downsample_area2x(half)
    want = [
        T.add(hazy, T.conv2d(feat0, p["head.0.weight"], p["head.0.bias"])).data,
        T.add(half, T.conv2d(feat1, p["head.1.weight"], p["head.1.bias"])).data,
        T.add(quarter, T.conv2d(feat2, p["head.2.weight"], p["head.2.bias"])).data,
    ]
    got = [o.data for o in N.forward(state, hazy)]
    for g, w in zip(got, want):
        assert np.array_equal(g, w)


def test_every_parameter_receives_gradient():
    rng = np.random.default_rng(SEED + 5)
    state = randomize(N.build(SMALL, 0), SEED + 6)
    hazy = T.constant(rng.uniform(0.0, 1.0, (1, 3, 16, 16)))
    outs = N.forward(state, hazy)
    loss = None
    for o in outs:
        target = T.constant(rng.uniform(0.0, 1.0, o.shape))
        term = T.l1_mean(o, target)
        loss = term if loss is None else T.add(loss, term)
    grads = T.backward(loss)
    dead = [
        path
        for path, tensor in state.params.items()
        if tensor not in grads or not np.any(grads[tensor] != 0.0)
    ]
    assert dead == [], f"parameters with no gradient: {dead}"


def test_ablation_flags_preserve_shapes():
    rng = np.random.default_rng(SEED + 7)
    hazy = T.constant(rng.uniform(0.0, 1.0, (1, 3, 16, 16)))
    for kw in (
        {"gating": False},
        {"pa": False},
        {"sh": False},
        {"ch": False},
        {"sm": False},
        {"hegm": False},
        {"parallel_bottleneck": False},
    ):
        cfg = N.ArchConfig(base_width=4, enc_blocks=(1, 1, 1), dec_blocks=(1, 1), **kw)
        outs = N.forward(N.build(cfg, 0), hazy)
        assert [o.shape for o in outs] == [(1, 3, 16, 16), (1, 3, 8, 8), (1, 3, 4, 4)]


def test_multi_output_scale_consistency():
    rng = np.random.default_rng(SEED + 8)
    state = N.build(SMALL, 0)
    outs = N.forward(state, T.constant(rng.uniform(0.0, 1.0, (1, 3, 16, 16))))
    assert T.downsample_area2x(outs[0]).shape == outs[1].shape
    assert T.downsample_area2x(outs[1]).shape == outs[2].shape


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def test_save_load_roundtrip_bitwise(tmp_path):
    state = randomize(N.build(SMALL, 0), SEED + 9)
    path = tmp_path / "model.pgh2"
    N.save(state, path)
    loaded = N.load(path)
    assert loaded.cfg == state.cfg
    assert sorted(loaded.params) == sorted(state.params)
    for k, t in state.params.items():
        assert np.array_equal(loaded.params[k].data, t.data)


def test_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "model.pgh2"
    N.save(N.build(SMALL, 0), path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(N.CheckpointError, match="magic"):
        N.load(path)


def test_load_rejects_unsupported_version(tmp_path):
    import struct

    path = tmp_path / "model.pgh2"
    N.save(N.build(SMALL, 0), path)
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(N.CheckpointError, match="version"):
        N.load(path)


def test_load_rejects_truncation(tmp_path):
    path = tmp_path / "model.pgh2"
    N.save(N.build(SMALL, 0), path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(N.CheckpointError, match="truncated"):
        N.load(path)


def test_load_names_first_mismatching_parameter(tmp_path):
    path = tmp_path / "model.pgh2"
    N.save(N.build(SMALL, 0), path)
    doctored = path.read_bytes().replace(b'"base_width": 4', b'"base_width": 8', 1)
    path.write_bytes(doctored)
    with pytest.raises(N.CheckpointError, match="stem.weight"):
        N.load(path)


def test_load_rejects_unknown_parameter_name(tmp_path):
    path = tmp_path / "model.pgh2"
    N.save(N.build(SMALL, 0), path)
    doctored = path.read_bytes().replace(b"stem.", b"stam.")
    path.write_bytes(doctored)
    with pytest.raises(N.CheckpointError, match="unknown parameter"):
        N.load(path)
