"""Tests for synthetic data generation, augmentation, and PPM interchange.

The scattering model hazy = clean*t + A*(1-t) has exact closed-form
consequences (fixed points, invertibility, elementwise brightening) that we
check directly rather than against stored arrays.
"""

import math
import os

import numpy as np
import pytest

from hazenet import data
from hazenet import tensor as T

SEED = 20240606


# ---------------------------------------------------------------------------
# parameter validation
# ---------------------------------------------------------------------------


class TestHazeParams:
    def test_valid(self):
        p = data.HazeParams(np.array([0.8, 0.9, 1.0]), 0.7, np.zeros((4, 5)))
        assert p.airlight.shape == (3,)
        assert p.depth.shape == (4, 5)

    def test_airlight_shape(self):
        with pytest.raises(ValueError, match="airlight"):
            data.HazeParams(np.ones(4), 0.7, np.zeros((4, 4)))

    def test_beta_positive(self):
        for beta in (0.0, -0.3):
            with pytest.raises(ValueError, match="beta"):
                data.HazeParams(np.ones(3), beta, np.zeros((4, 4)))

    def test_depth_rank(self):
        with pytest.raises(ValueError, match="depth"):
            data.HazeParams(np.ones(3), 0.7, np.zeros((2, 4, 4)))


# ---------------------------------------------------------------------------
# scattering model
# ---------------------------------------------------------------------------


class TestSynthesize:
    def test_zero_depth_is_identity(self):
        # t = exp(0) = 1 everywhere, so the haze term vanishes.
        rng = np.random.default_rng(SEED)
        clean = T.constant(rng.random((1, 3, 6, 7)))
        p = data.HazeParams(np.array([0.9, 0.8, 0.7]), 1.2, np.zeros((6, 7)))
        hazy = data.synthesize(clean, p)
        assert np.array_equal(hazy.data, clean.data)

    def test_airlight_fixed_point(self):
        # If clean already equals A per channel, haze changes nothing.
        airlight = np.array([0.75, 0.85, 0.95])
        clean = T.constant(np.broadcast_to(airlight.reshape(1, 3, 1, 1), (1, 3, 5, 5)).copy())
        rng = np.random.default_rng(SEED + 1)
        p = data.HazeParams(airlight, 0.9, rng.random((5, 5)))
        hazy = data.synthesize(clean, p)
        assert np.max(np.abs(hazy.data - clean.data)) <= 1e-15

    def test_half_transmission(self):
        # beta = ln 2 and depth 1 give t = 0.5; black clean under unit
        # airlight comes out mid-grey.
        clean = T.constant(np.zeros((1, 3, 4, 4)))
        p = data.HazeParams(np.ones(3), math.log(2.0), np.ones((4, 4)))
        hazy = data.synthesize(clean, p)
        assert np.max(np.abs(hazy.data - 0.5)) <= 1e-15

    def test_formula_oracle(self):
        rng = np.random.default_rng(SEED + 2)
        clean = rng.random((2, 3, 5, 6))
        airlight = rng.uniform(0.7, 1.0, size=3)
        beta = 1.1
        depth = rng.random((5, 6))
        hazy = data.synthesize(T.constant(clean), data.HazeParams(airlight, beta, depth))
        expect = np.empty_like(clean)
        for n in range(2):
            for c in range(3):
                for y in range(5):
                    for x in range(6):
                        t = math.exp(-beta * depth[y, x])
                        expect[n, c, y, x] = clean[n, c, y, x] * t + airlight[c] * (1.0 - t)
        assert np.max(np.abs(hazy.data - expect)) <= 1e-15

    def test_invertible(self):
        # Within the default beta range, t >= exp(-1.6) ~ 0.2, so the clean
        # image is recoverable to near machine precision.
        rng = np.random.default_rng(SEED + 3)
        clean = rng.random((1, 3, 8, 8))
        airlight = rng.uniform(0.7, 1.0, size=3)
        beta = 1.6
        depth = rng.random((8, 8))
        hazy = data.synthesize(T.constant(clean), data.HazeParams(airlight, beta, depth))
        t = np.exp(-beta * depth)[None, None]
        recovered = (hazy.data - airlight.reshape(1, 3, 1, 1) * (1.0 - t)) / t
        assert np.max(np.abs(recovered - clean)) <= 1e-12

    def test_brightening(self):
        # hazy - clean = (1-t)(A - clean) >= 0 elementwise when A dominates.
        rng = np.random.default_rng(SEED + 4)
        clean = rng.random((1, 3, 8, 8))
        p = data.HazeParams(np.ones(3), 0.8, rng.random((8, 8)))
        hazy = data.synthesize(T.constant(clean), p)
        assert np.all(hazy.data - clean >= -1e-15)

    def test_shape_errors(self):
        p = data.HazeParams(np.ones(3), 0.8, np.zeros((4, 4)))
        with pytest.raises(T.ShapeError):
            data.synthesize(T.constant(np.zeros((1, 4, 4, 4))), p)
        with pytest.raises(T.ShapeError):
            data.synthesize(T.constant(np.zeros((1, 3, 5, 4))), p)


# ---------------------------------------------------------------------------
# procedural generation
# ---------------------------------------------------------------------------


class TestGeneration:
    def test_depth_normalized(self):
        rng = np.random.default_rng(SEED)
        d = data.make_depth(rng, 32, 48)
        assert d.shape == (32, 48)
        assert d.min() == 0.0 and d.max() == 1.0

    def test_depth_deterministic(self):
        a = data.make_depth(np.random.default_rng(7), 16, 16)
        b = data.make_depth(np.random.default_rng(7), 16, 16)
        assert np.array_equal(a, b)

    def test_clean_shape_and_range(self):
        img = data.generate_clean(3, 24, 40)
        assert img.shape == (1, 3, 24, 40)
        assert img.data.min() >= 0.0 and img.data.max() <= 1.0

    def test_clean_deterministic(self):
        a = data.generate_clean(11, 32, 32)
        b = data.generate_clean(11, 32, 32)
        assert np.array_equal(a.data, b.data)
        c = data.generate_clean(12, 32, 32)
        assert not np.array_equal(a.data, c.data)

    def test_clean_histogram_occupancy(self):
        # Training relies on clean images spreading over the 8-bit range;
        # quantize and count distinct occupied levels.
        for seed in range(6):
            img = data.generate_clean(seed, 64, 64).data
            levels = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.int64)
            counts = np.zeros(256, dtype=np.int64)
            for v in levels.ravel():
                counts[v] += 1
            assert counts.sum() == levels.size
            assert int(np.count_nonzero(counts)) >= 128

    def test_make_sample_deterministic(self):
        a = data.make_sample(5, 16, 16)
        b = data.make_sample(5, 16, 16)
        assert np.array_equal(a.clean.data, b.clean.data)
        assert np.array_equal(a.hazy.data, b.hazy.data)
        assert np.array_equal(a.params.depth, b.params.depth)
        assert a.params.beta == b.params.beta

    def test_make_sample_consistent(self):
        s = data.make_sample(6, 16, 16)
        assert 0.7 <= s.params.airlight.min() and s.params.airlight.max() <= 1.0
        assert 0.4 <= s.params.beta <= 1.6
        rebuilt = data.synthesize(s.clean, s.params)
        assert np.array_equal(rebuilt.data, s.hazy.data)
        assert s.seed == 6


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


class TestAugment:
    def test_hflip_involution(self):
        s = data.make_sample(8, 12, 10)
        ss = data.hflip(data.hflip(s))
        assert np.array_equal(ss.clean.data, s.clean.data)
        assert np.array_equal(ss.hazy.data, s.hazy.data)
        assert np.array_equal(ss.params.depth, s.params.depth)

    def test_hflip_values_preserved(self):
        s = data.make_sample(9, 12, 10)
        f = data.hflip(s)
        assert np.array_equal(np.sort(f.clean.data.ravel()), np.sort(s.clean.data.ravel()))
        assert np.array_equal(f.clean.data[..., ::-1], s.clean.data)

    def test_hflip_stays_aligned(self):
        # Flipping clean, hazy, and depth together commutes with synthesis.
        s = data.make_sample(10, 12, 10)
        f = data.hflip(s)
        assert np.array_equal(data.synthesize(f.clean, f.params).data, f.hazy.data)

    def test_augment_deterministic_and_balanced(self):
        s = data.make_sample(11, 8, 8)
        flipped = unchanged = 0
        for seed in range(40):
            a = data.augment(s, seed)
            b = data.augment(s, seed)
            assert np.array_equal(a.clean.data, b.clean.data)
            if np.array_equal(a.clean.data, s.clean.data):
                unchanged += 1
            else:
                assert np.array_equal(a.clean.data, data.hflip(s).clean.data)
                flipped += 1
        assert flipped > 0 and unchanged > 0

    def test_crop_window(self):
        # Encode coordinates into pixel values, then locate the window the
        # crop actually took and verify every plane agrees with it.
        h, w, size = 11, 13, 5
        coords = np.arange(h * w, dtype=np.float64).reshape(h, w) / (h * w)
        clean = np.broadcast_to(coords, (1, 3, h, w)).copy()
        depth = coords.copy()
        p = data.HazeParams(np.ones(3), 0.9, depth)
        s = data.ImageSample(T.constant(clean), data.synthesize(T.constant(clean), p), p, 0)
        c = data.random_crop(s, size, seed=SEED)
        assert c.clean.shape == (1, 3, size, size)
        flat = round(c.clean.data[0, 0, 0, 0] * h * w)
        y0, x0 = divmod(flat, w)
        assert np.array_equal(c.clean.data, clean[..., y0 : y0 + size, x0 : x0 + size])
        assert np.array_equal(c.hazy.data, s.hazy.data[..., y0 : y0 + size, x0 : x0 + size])
        assert np.array_equal(c.params.depth, depth[y0 : y0 + size, x0 : x0 + size])

    def test_crop_full_size_identity(self):
        s = data.make_sample(12, 9, 9)
        c = data.random_crop(s, 9, seed=0)
        assert np.array_equal(c.clean.data, s.clean.data)
        assert np.array_equal(c.hazy.data, s.hazy.data)

    def test_crop_deterministic(self):
        s = data.make_sample(13, 16, 16)
        a = data.random_crop(s, 8, seed=3)
        b = data.random_crop(s, 8, seed=3)
        assert np.array_equal(a.clean.data, b.clean.data)

    def test_crop_oversize(self):
        s = data.make_sample(14, 8, 8)
        with pytest.raises(ValueError, match="crop"):
            data.random_crop(s, 9, seed=0)


# ---------------------------------------------------------------------------
# PPM interchange
# ---------------------------------------------------------------------------


class TestPPM:
    def test_load_known_bytes(self, tmp_path):
        path = tmp_path / "white.ppm"
        path.write_bytes(b"P6\n2 2\n255\n" + b"\xff" * 12)
        img = data.load_ppm(path)
        assert img.shape == (1, 3, 2, 2)
        assert np.array_equal(img.data, np.ones((1, 3, 2, 2)))

    def test_load_channel_order(self, tmp_path):
        # One pixel, payload bytes are R G B in that order.
        path = tmp_path / "px.ppm"
        path.write_bytes(b"P6\n1 1\n255\n" + bytes([255, 0, 51]))
        img = data.load_ppm(path)
        assert np.array_equal(img.data[0, :, 0, 0], np.array([1.0, 0.0, 51.0 / 255.0]))

    def test_header_comments(self, tmp_path):
        path = tmp_path / "c.ppm"
        path.write_bytes(b"P6\n# a comment\n2 1 # trailing\n255\n" + b"\x00" * 6)
        img = data.load_ppm(path)
        assert img.shape == (1, 3, 1, 2)

    def test_roundtrip_quantized_exact(self, tmp_path):
        # Multiples of 1/255 survive the byte roundtrip bit for bit.
        rng = np.random.default_rng(SEED)
        img = rng.integers(0, 256, size=(1, 3, 6, 5)).astype(np.float64) / 255.0
        path = tmp_path / "q.ppm"
        data.save_ppm(T.constant(img), path)
        back = data.load_ppm(path)
        assert np.array_equal(back.data, img)

    def test_roundtrip_quantization_error(self, tmp_path):
        rng = np.random.default_rng(SEED + 1)
        img = rng.random((1, 3, 7, 4))
        path = tmp_path / "r.ppm"
        data.save_ppm(T.constant(img), path)
        back = data.load_ppm(path)
        assert np.max(np.abs(back.data - img)) <= 0.5 / 255.0 + 1e-12

    def test_save_rounds_half_up(self, tmp_path):
        img = np.zeros((1, 3, 1, 2))
        img[0, :, 0, 0] = 0.5 / 255.0  # exactly half a level
        img[0, :, 0, 1] = 1.49 / 255.0
        path = tmp_path / "h.ppm"
        data.save_ppm(T.constant(img), path)
        payload = path.read_bytes().split(b"255\n", 1)[1]
        assert list(payload) == [1, 1, 1, 1, 1, 1]

    def test_save_clips(self, tmp_path):
        img = np.array([[-0.5, 1.5]]).reshape(1, 1, 1, 2)
        img = np.broadcast_to(img, (1, 3, 1, 2)).copy()
        path = tmp_path / "clip.ppm"
        data.save_ppm(T.constant(img), path)
        back = data.load_ppm(path)
        assert np.array_equal(back.data[0, :, 0, 0], np.zeros(3))
        assert np.array_equal(back.data[0, :, 0, 1], np.ones(3))

    def test_load_errors(self, tmp_path):
        bad_magic = tmp_path / "a.ppm"
        bad_magic.write_bytes(b"P5\n2 2\n255\n" + b"\x00" * 12)
        with pytest.raises(ValueError, match="magic"):
            data.load_ppm(bad_magic)

        bad_maxval = tmp_path / "b.ppm"
        bad_maxval.write_bytes(b"P6\n2 2\n65535\n" + b"\x00" * 24)
        with pytest.raises(ValueError, match="maxval"):
            data.load_ppm(bad_maxval)

        truncated = tmp_path / "c.ppm"
        truncated.write_bytes(b"P6\n2 2\n255\n" + b"\x00" * 5)
        with pytest.raises(ValueError, match="truncated"):
            data.load_ppm(truncated)

        no_header = tmp_path / "d.ppm"
        no_header.write_bytes(b"P6\n2")
        with pytest.raises(ValueError):
            data.load_ppm(no_header)

        zero_dim = tmp_path / "e.ppm"
        zero_dim.write_bytes(b"P6\n0 2\n255\n")
        with pytest.raises(ValueError, match="dimensions"):
            data.load_ppm(zero_dim)

        non_numeric = tmp_path / "f.ppm"
        non_numeric.write_bytes(b"P6\nxx 2\n255\n")
        with pytest.raises(ValueError, match="malformed"):
            data.load_ppm(non_numeric)

    def test_save_shape_errors(self, tmp_path):
        with pytest.raises(T.ShapeError):
            data.save_ppm(T.constant(np.zeros((2, 3, 4, 4))), tmp_path / "x.ppm")
        with pytest.raises(T.ShapeError):
            data.save_ppm(T.constant(np.zeros((4, 4, 4))), tmp_path / "y.ppm")


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


class TestManifest:
    def test_parse(self, tmp_path):
        mf = tmp_path / "pairs.txt"
        mf.write_text(
            "# comment line\n"
            "\n"
            "clean_0.ppm hazy_0.ppm\n"
            "/abs/clean_1.ppm sub/hazy_1.ppm\n"
        )
        pairs = data.load_manifest(mf)
        assert len(pairs) == 2
        assert pairs[0] == (str(tmp_path / "clean_0.ppm"), str(tmp_path / "hazy_0.ppm"))
        assert pairs[1][0] == "/abs/clean_1.ppm"
        assert pairs[1][1] == str(tmp_path / "sub" / "hazy_1.ppm")

    def test_bad_line(self, tmp_path):
        mf = tmp_path / "pairs.txt"
        mf.write_text("a.ppm b.ppm c.ppm\n")
        with pytest.raises(ValueError, match=":1:"):
            data.load_manifest(mf)

    def test_empty(self, tmp_path):
        mf = tmp_path / "pairs.txt"
        mf.write_text("# nothing here\n")
        with pytest.raises(ValueError, match="empty"):
            data.load_manifest(mf)
