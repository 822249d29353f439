import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtbit.augment import (
    AugSpec,
    GeomTransform,
    apply_paired,
    make_sample,
    plain_sample,
    resize,
    sample_transform,
    tile_rng,
)
from mtbit.data_core import SynthSpec, synthesize_tile

H_SCALE = 35.0


@pytest.fixture(scope="module")
def tile():
    return synthesize_tile(SynthSpec(seed=5, n_tiles=1), 0)


def quiet(size=64):
    # geometry allowed, radiometry and noise off
    return AugSpec(target_size=size, radiometric_enabled=False, noise_enabled=False)


def test_resize_shapes_and_modes(tile):
    assert resize(tile.img1, 256).shape == (3, 256, 256)
    m = resize(tile.mask2d, 256, "nearest")
    assert m.shape == (256, 256) and set(np.unique(m)) <= {0, 1}
    with pytest.raises(ValueError):
        resize(tile.mask2d, 0)
    with pytest.raises(ValueError):
        resize(tile.mask2d, 8, "cubic")


@given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 40), st.floats(-1e3, 1e3))
def test_resize_constant_stays_constant(h, w, out, c):
    r = np.full((h, w), c)
    for mode in ("bilinear", "nearest"):
        assert np.all(resize(r, out, mode) == c)


def test_nearest_resize_keeps_values(tile):
    d = resize(tile.delta3d, 256, "nearest")
    assert set(np.unique(d)) <= set(np.unique(tile.delta3d))


def test_degenerate_spec_gives_identity():
    spec = AugSpec(p_hflip=0.0, shift=0.0, scale=(1.0, 1.0), rotation=0.0)
    g = sample_transform(spec, np.random.default_rng(0))
    assert g.is_identity


def test_sample_transform_deterministic_and_in_range():
    spec = AugSpec()
    a = [sample_transform(spec, np.random.default_rng(9)) for _ in range(2)]
    assert a[0] == a[1]
    rng = np.random.default_rng(1)
    for _ in range(500):
        g = sample_transform(spec, rng)
        assert abs(g.dx) <= spec.shift and abs(g.dy) <= spec.shift
        assert spec.scale[0] <= g.scale <= spec.scale[1]
        assert abs(g.angle) <= spec.rotation


def test_flip_rate_within_three_sigma():
    p, n = 0.5, 10_000
    rng = np.random.default_rng(2024)
    spec = AugSpec(p_hflip=p)
    flips = sum(sample_transform(spec, rng).flip for _ in range(n))
    sigma = np.sqrt(n * p * (1 - p))
    assert abs(flips - n * p) <= 3 * sigma


def test_identity_sample_equals_plain_resize(tile):
    spec = AugSpec.disabled(64)
    s = apply_paired(tile, GeomTransform(), spec, np.random.default_rng(0), H_SCALE)
    ref = plain_sample(tile, 64, H_SCALE)
    for a, b in zip((s.x1, s.x2, s.y2d, s.y3d), (ref.x1, ref.x2, ref.y2d, ref.y3d)):
        np.testing.assert_array_equal(a, b)


def test_flip_twice_is_identity_on_all_channels(tile):
    spec = quiet()
    once = apply_paired(tile, GeomTransform(flip=True), spec, np.random.default_rng(0), H_SCALE)
    ref = plain_sample(tile, 64, H_SCALE)
    for a, b in zip((once.x1, once.x2, once.y2d, once.y3d), (ref.x1, ref.x2, ref.y2d, ref.y3d)):
        np.testing.assert_array_equal(a[..., ::-1], b)
    assert once.y2d.sum() == ref.y2d.sum()


@settings(max_examples=25, deadline=None)
@given(st.booleans(), st.integers(-10, 10), st.integers(-10, 10))
def test_flip_shift_preserves_nonzero_multiset(tile, flip, dx, dy):
    spec = quiet(48)
    ref = plain_sample(tile, 48, H_SCALE)
    # shift only the inner canvas region so nothing leaves the frame
    s = apply_paired(tile, GeomTransform(flip=flip), spec, np.random.default_rng(0), H_SCALE)
    np.testing.assert_array_equal(np.sort(s.y3d[s.y3d != 0]), np.sort(ref.y3d[ref.y3d != 0]))
    g = GeomTransform(flip=flip, dx=dx, dy=dy)
    s = apply_paired(tile, g, spec, np.random.default_rng(0), H_SCALE)
    # values are relocated, never blended: every output value came from the input
    assert set(np.unique(s.y3d)) <= set(np.unique(ref.y3d)) | {0.0}
    assert set(np.unique(s.y2d)) <= {0, 1}
    # the surviving window is an exact copy
    n = 48
    src = ref.y3d[..., ::-1] if flip else ref.y3d
    ys, yd = slice(max(-dy, 0), n - max(dy, 0)), slice(max(dy, 0), n - max(-dy, 0))
    xs, xd = slice(max(-dx, 0), n - max(dx, 0)), slice(max(dx, 0), n - max(-dx, 0))
    np.testing.assert_array_equal(s.y3d[yd, xd], src[ys, xs])


def test_geometry_is_shared_by_images_and_targets(tile):
    spec = quiet(64)
    g = GeomTransform(flip=True, dx=3, dy=-2, scale=1.05, angle=7.0)
    s = apply_paired(tile, g, spec, np.random.default_rng(0), H_SCALE)
    assert s.y2d.dtype == np.uint8 and set(np.unique(s.y2d)) <= {0, 1}
    assert np.all(np.abs(s.y3d) <= 1)
    # changed-mask and nonzero-dH stay aligned after the shared transform
    np.testing.assert_array_equal(s.y2d.astype(bool), s.y3d != 0)


def test_radiometry_is_independent_per_image(tile):
    spec = AugSpec(target_size=32, flip_enabled=False, geometry_enabled=False)
    t2 = type(tile)(tile.meta, tile.img1, tile.img1.copy(), tile.dsm1, tile.dsm2, tile.mask2d, tile.delta3d)
    s = apply_paired(t2, GeomTransform(), spec, np.random.default_rng(3), H_SCALE)
    assert not np.array_equal(s.x1, s.x2)
    ref = plain_sample(t2, 32, H_SCALE)
    np.testing.assert_array_equal(s.y2d, ref.y2d)
    np.testing.assert_array_equal(s.y3d, ref.y3d)


def test_pipeline_reproducible_and_counter_based(tile):
    spec = AugSpec(target_size=32, seed=4)
    a = make_sample(tile, spec, H_SCALE, epoch=2)
    b = make_sample(tile, spec, H_SCALE, epoch=2)
    for u, v in zip((a.x1, a.x2, a.y2d, a.y3d), (b.x1, b.x2, b.y2d, b.y3d)):
        assert u.tobytes() == v.tobytes()
    c = make_sample(tile, spec, H_SCALE, epoch=3)
    assert not np.array_equal(a.x1, c.x1)
    assert tile_rng(4, "t", 2).random() == tile_rng(4, "t", 2).random()
    ev = make_sample(tile, spec, H_SCALE, train=False)
    np.testing.assert_array_equal(ev.x1, plain_sample(tile, 32, H_SCALE).x1)


def test_spec_validation():
    with pytest.raises(ValueError):
        AugSpec(p_hflip=1.5)
    with pytest.raises(ValueError):
        AugSpec(target_size=0)
    with pytest.raises(ValueError):
        AugSpec(scale=(1.2, 0.8))
    with pytest.raises(ValueError):
        AugSpec(shift=float("inf"))
