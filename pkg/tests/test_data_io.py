"""netpbm codec, resize, augmentation, morphology, synthesis, checkpoints."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from ssformer import data
from ssformer.errors import FormatError, InvalidShape, InvalidTarget
from ssformer.rng import Rng


class ScriptedRng:
    """Replays fixed uniform/randint draws; lets tests force augment branches."""

    def __init__(self, uniforms=(), randints=()):
        self.uniforms = list(uniforms)
        self.randints = list(randints)

    def uniform(self, n=None):
        assert n is None
        return self.uniforms.pop(0)

    def randint(self, lo, hi):
        v = self.randints.pop(0)
        assert lo <= v < hi
        return v


def _sample(size=8, seed=0):
    return data.synth_dataset(1, max(32, size), seed)[0]


# ---------------------------------------------------------------------- netpbm

def test_p5_known_bytes(tmp_path):
    p = tmp_path / "t.pgm"
    p.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 255, 255, 0]))
    arr = data.load_netpbm(p)
    np.testing.assert_array_equal(arr, [[[0.0, 1.0], [1.0, 0.0]]])


def test_p6_comments_parse_identically(tmp_path):
    raster = bytes(range(6))
    plain = tmp_path / "a.ppm"
    plain.write_bytes(b"P6\n2 1\n255\n" + raster)
    commented = tmp_path / "b.ppm"
    commented.write_bytes(b"P6\n# made by hand\n2 1\n# twice\n255\n" + raster)
    np.testing.assert_array_equal(data.load_netpbm(plain),
                                  data.load_netpbm(commented))


def test_roundtrip_quantization_bound(tmp_path):
    img = Rng(1).uniform(3 * 6 * 5).reshape(3, 6, 5).astype(np.float32)
    path = tmp_path / "rt.ppm"
    data.save_netpbm(img, path)
    back = data.load_netpbm(path)
    assert np.abs(back - img).max() <= 1.0 / 255.0 + 1e-7


def test_roundtrip_gray(tmp_path):
    img = Rng(2).uniform(7 * 7).reshape(1, 7, 7).astype(np.float32)
    path = tmp_path / "rt.pgm"
    data.save_netpbm(img, path)
    assert np.abs(data.load_netpbm(path) - img).max() <= 1.0 / 255.0 + 1e-7


def test_binarize_threshold(tmp_path):
    path = tmp_path / "m.pgm"
    path.write_bytes(b"P5\n4 1\n255\n" + bytes([0, 127, 128, 255]))
    arr = data.load_netpbm(path, binarize=True)
    np.testing.assert_array_equal(arr[0, 0], [0.0, 0.0, 1.0, 1.0])


def test_bad_magic(tmp_path):
    path = tmp_path / "x.pgm"
    path.write_bytes(b"P7\n2 2\n255\n" + bytes(4))
    with pytest.raises(FormatError):
        data.load_netpbm(path)


def test_bad_maxval(tmp_path):
    path = tmp_path / "x.pgm"
    path.write_bytes(b"P5\n2 2\n65535\n" + bytes(8))
    with pytest.raises(FormatError):
        data.load_netpbm(path)


def test_truncated_header_names_byte_offset(tmp_path):
    path = tmp_path / "x.pgm"
    path.write_bytes(b"P5\n2 ")
    with pytest.raises(FormatError) as exc:
        data.load_netpbm(path)
    assert "byte" in str(exc.value)


def test_truncated_raster_names_byte_offset(tmp_path):
    path = tmp_path / "x.pgm"
    path.write_bytes(b"P5\n4 4\n255\n" + bytes(7))
    with pytest.raises(FormatError) as exc:
        data.load_netpbm(path)
    assert "byte" in str(exc.value)


def test_save_rejects_other_channel_counts(tmp_path):
    with pytest.raises(InvalidShape):
        data.save_netpbm(np.zeros((2, 4, 4), dtype=np.float32), tmp_path / "x.pgm")


# ---------------------------------------------------------------------- resize

def test_resize_identity():
    img = Rng(3).uniform(3 * 5 * 5).reshape(3, 5, 5).astype(np.float32)
    np.testing.assert_array_equal(data.resize(img, (5, 5)), img)


def test_resize_constant_stays_constant():
    img = np.full((1, 4, 4), 0.3, dtype=np.float32)
    np.testing.assert_allclose(data.resize(img, (9, 7)), 0.3, atol=1e-6)


def test_resize_mask_nearest_stays_binary():
    mask = (Rng(4).uniform(16).reshape(1, 4, 4) < 0.5).astype(np.float32)
    for size in ((8, 8), (3, 5), (13, 2)):
        out = data.resize(mask, size, method="nearest")
        assert set(np.unique(out)) <= {0.0, 1.0}


def test_resize_bilinear_matches_nn_path():
    img = Rng(5).uniform(1 * 4 * 6).reshape(1, 4, 6).astype(np.float32)
    got = data.resize(img, (7, 5))
    want = oracles.bilinear_naive(img[None].astype(np.float64), 7, 5)[0]
    np.testing.assert_allclose(got, want, atol=1e-5)


# ------------------------------------------------------------------ morphology

def test_dilate_center_pixel_makes_plus():
    m = np.zeros((5, 5), dtype=np.float32)
    m[2, 2] = 1.0
    out = data.dilate(m)
    want = np.zeros((5, 5), dtype=np.float32)
    want[2, 1:4] = 1.0
    want[1:4, 2] = 1.0
    np.testing.assert_array_equal(out, want)


def test_erode_border_always_erodes():
    out = data.erode(np.ones((4, 4), dtype=np.float32))
    assert out[0].sum() == 0 and out[:, 0].sum() == 0
    assert out[1:3, 1:3].min() == 1.0


def test_morphology_matches_naive_oracle():
    for seed in range(30):
        m = (Rng(seed).uniform(49).reshape(7, 7) < 0.45).astype(np.float32)
        for iters in (1, 2):
            np.testing.assert_array_equal(data.dilate(m, iters=iters),
                                          oracles.dilate_naive(m, iters))
            np.testing.assert_array_equal(data.erode(m, iters=iters),
                                          oracles.erode_naive(m, iters))


def test_closing_opening_laws():
    m = (Rng(77).uniform(64).reshape(8, 8) < 0.4).astype(np.float32)
    opened = data.dilate(data.erode(m))
    assert np.all(opened <= m)   # opening is anti-extensive, border included
    # zero padding always erodes the outer ring, so the closing law only
    # holds where the mask keeps off the border
    m[0, :] = m[-1, :] = m[:, 0] = m[:, -1] = 0.0
    closed = data.erode(data.dilate(m))
    assert np.all(closed >= m)   # closing is extensive on interior support


def test_iterated_equals_repeated():
    m = (Rng(78).uniform(36).reshape(6, 6) < 0.5).astype(np.float32)
    np.testing.assert_array_equal(data.dilate(m, iters=2),
                                  data.dilate(data.dilate(m)))
    np.testing.assert_array_equal(data.erode(m, iters=2),
                                  data.erode(data.erode(m)))


def test_morphology_rejects_nonbinary():
    with pytest.raises(InvalidTarget):
        data.dilate(np.full((3, 3), 0.5, dtype=np.float32))
    with pytest.raises(InvalidTarget):
        data.erode(np.full((3, 3), 2.0, dtype=np.float32))


def test_custom_element():
    m = np.zeros((5, 5), dtype=np.float32)
    m[2, 2] = 1.0
    out = data.dilate(m, element=np.ones((3, 3), dtype=bool))
    assert out[1:4, 1:4].min() == 1.0 and out.sum() == 9


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_morphology_monotone(seed):
    rng = Rng(seed)
    u = rng.uniform(49).reshape(7, 7)
    small = (u < 0.3).astype(np.float32)
    big = (u < 0.6).astype(np.float32)  # superset by construction
    assert np.all(data.dilate(small) <= data.dilate(big))
    assert np.all(data.erode(small) <= data.erode(big))


# ---------------------------------------------------------------- augmentation

def test_augment_noop_rng_keeps_sample():
    s = _sample(seed=10)
    out = data.augment(s, ScriptedRng(uniforms=[0.9] * 5))
    np.testing.assert_array_equal(out.image, s.image)
    np.testing.assert_array_equal(out.mask, s.mask)
    assert out.id == s.id


def test_double_hflip_is_identity():
    s = _sample(seed=11)
    flip = lambda smp: data.augment(
        smp, ScriptedRng(uniforms=[0.1, 0.9, 0.9, 0.9, 0.9]))
    twice = flip(flip(s))
    np.testing.assert_array_equal(twice.image, s.image)
    np.testing.assert_array_equal(twice.mask, s.mask)


def test_rotation_applied_to_both_image_and_mask():
    s = _sample(seed=12)
    out = data.augment(
        s, ScriptedRng(uniforms=[0.9, 0.9, 0.9, 0.1, 0.9], randints=[1]))
    np.testing.assert_array_equal(out.image, np.rot90(s.image, 1, axes=(1, 2)))
    np.testing.assert_array_equal(out.mask, np.rot90(s.mask, 1, axes=(1, 2)))


def test_morph_branch_only_touches_mask():
    s = _sample(seed=13)
    dilated = data.augment(
        s, ScriptedRng(uniforms=[0.9, 0.9, 0.9, 0.9, 0.1, 0.1], randints=[1]))
    np.testing.assert_array_equal(dilated.image, s.image)
    assert np.all(dilated.mask >= s.mask)  # dilation output contains the input

    eroded = data.augment(
        s, ScriptedRng(uniforms=[0.9, 0.9, 0.9, 0.9, 0.1, 0.9], randints=[1]))
    assert np.all(eroded.mask <= s.mask)


def test_augment_preserves_invariants():
    s = _sample(seed=14)
    for seed in range(12):
        out = data.augment(s, Rng(seed))
        assert set(np.unique(out.mask)) <= {0.0, 1.0}
        assert out.image.min() >= 0.0 and out.image.max() <= 1.0
        assert out.image.shape == s.image.shape
        assert out.mask.shape == s.mask.shape


def test_augment_deterministic_per_stream():
    s = _sample(seed=15)
    a = data.augment(s, Rng(99))
    b = data.augment(s, Rng(99))
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.mask, b.mask)


# ------------------------------------------------------------------- synthesis

def test_synth_deterministic():
    a = data.synth_dataset(4, 32, seed=5)
    b = data.synth_dataset(4, 32, seed=5)
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes()
        assert x.mask.tobytes() == y.mask.tobytes()
        assert x.id == y.id


def test_synth_coverage_and_binarity():
    for s in data.synth_dataset(12, 32, seed=6):
        cover = s.mask.mean()
        assert 0.01 <= cover <= 0.60
        assert set(np.unique(s.mask)) <= {0.0, 1.0}
        assert s.image.shape == (3, 32, 32)
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0


def test_synth_rejects_bad_size():
    with pytest.raises(InvalidShape):
        data.synth_dataset(1, 50, seed=0)


def test_synth_samples_differ():
    a, b = data.synth_dataset(2, 32, seed=7)
    assert a.image.tobytes() != b.image.tobytes()


# -------------------------------------------------------------- dataset layout

def test_dataset_roundtrip(tmp_path):
    samples = data.synth_dataset(3, 32, seed=8)
    data.save_dataset(samples, tmp_path)
    assert sorted(p.name for p in (tmp_path / "images").iterdir()) == [
        "0000.ppm", "0001.ppm", "0002.ppm"]
    back = data.load_dataset(tmp_path)
    assert [s.id for s in back] == ["0000", "0001", "0002"]
    for orig, got in zip(samples, back):
        assert np.abs(got.image - orig.image).max() <= 1.0 / 255.0 + 1e-7
        np.testing.assert_array_equal(got.mask, orig.mask)


def test_dataset_missing_mask(tmp_path):
    data.save_dataset(data.synth_dataset(2, 32, seed=9), tmp_path)
    (tmp_path / "masks" / "0001.pgm").unlink()
    with pytest.raises(FormatError):
        data.load_dataset(tmp_path)


# ----------------------------------------------------------------- checkpoints

def _params(seed=0):
    rng = Rng(seed)
    return {
        "a.w": rng.normal(12).reshape(3, 4).astype(np.float32),
        "b.bias": rng.normal(4).astype(np.float32),
        "c.k": rng.normal(8).reshape(2, 2, 2).astype(np.float32),
    }


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    params = _params()
    path = tmp_path / "m.ckpt"
    data.checkpoint_save(params, path)
    back = data.checkpoint_load(path)
    assert set(back) == set(params)
    for name in params:
        assert back[name].tobytes() == params[name].tobytes()
        assert back[name].shape == params[name].shape


def test_checkpoint_file_layout(tmp_path):
    path = tmp_path / "m.ckpt"
    data.checkpoint_save({"x": np.zeros((2,), dtype=np.float32)}, path)
    blob = path.read_bytes()
    assert blob[:4] == b"SSF1"
    version, count = struct.unpack_from("<II", blob, 4)
    assert (version, count) == (1, 1)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "m.ckpt"
    path.write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(FormatError):
        data.checkpoint_load(path)


def test_checkpoint_truncated_payload_names_entry(tmp_path):
    path = tmp_path / "m.ckpt"
    data.checkpoint_save(_params(), path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-5])
    with pytest.raises(FormatError) as exc:
        data.checkpoint_load(path)
    assert "c.k" in str(exc.value)


def test_checkpoint_duplicate_name(tmp_path):
    path = tmp_path / "m.ckpt"
    name = b"w"
    entry = struct.pack("<I", 1) + name + struct.pack("<II", 1, 1) + b"\0\0\0\0"
    path.write_bytes(b"SSF1" + struct.pack("<II", 1, 2) + entry + entry)
    with pytest.raises(FormatError):
        data.checkpoint_load(path)


def test_checkpoint_rejects_non_f32(tmp_path):
    with pytest.raises(FormatError):
        data.checkpoint_save({"x": np.zeros(2, dtype=np.float64)},
                             tmp_path / "m.ckpt")
