import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protuberseg.volume import (
    Mask,
    Volume,
    connected_components,
    count,
    crop,
    gaussian_blur,
    gaussian_kernel,
    intersection,
    read_pvol,
    resample,
    rotate_mask,
    scale_mask,
    translate_mask,
    union,
    write_pvol,
)


def sphere_mask(dims, center, radius, spacing=(1.0, 1.0, 1.0)):
    zz, yy, xx = np.meshgrid(*[np.arange(n) for n in dims], indexing="ij")
    d2 = ((zz - center[0]) ** 2 + (yy - center[1]) ** 2
          + (xx - center[2]) ** 2)
    return Mask((d2 <= radius ** 2).astype(np.uint8), spacing)


def random_mask(rng, dims, p=0.3):
    return Mask((rng.random(dims) < p).astype(np.uint8))


# ---------------------------------------------------------------------------
# rotation / scaling / translation

def test_rotate_identity():
    rng = np.random.default_rng(0)
    m = random_mask(rng, (8, 9, 10))
    out = rotate_mask(m, (0, 0, 0))
    np.testing.assert_array_equal(out.data, m.data)


def test_rotate_single_voxel_fixed_point():
    m = Mask(np.zeros((9, 9, 9), dtype=np.uint8))
    m.data[4, 4, 4] = 1
    for angles in [(37, 0, 0), (10, 20, 30), (90, 45, 180)]:
        out = rotate_mask(m, angles)
        np.testing.assert_array_equal(out.data, m.data)


def test_rotate_bar_90_about_z_matches_index_permutation():
    # bar symmetric about voxel (8, 8, 8) so the centroid is integral
    m = Mask(np.zeros((17, 17, 17), dtype=np.uint8))
    m.data[8, 7:10, 4:13] = 1  # extents: 3 along y, 9 along x
    out = rotate_mask(m, (90, 0, 0))

    # independent oracle: +90 deg about z maps output (y', x') to source
    # (y, x) = (c - (x' - c), c + (y' - c)) with c = 8
    expected = np.zeros_like(m.data)
    c = 8
    for z in range(17):
        for y in range(17):
            for x in range(17):
                sy, sx = c - (x - c), c + (y - c)
                if 0 <= sy < 17 and 0 <= sx < 17 and m.data[z, sy, sx]:
                    expected[z, y, x] = 1
    np.testing.assert_array_equal(out.data, expected)
    # in-plane extents swapped
    zz, yy, xx = np.nonzero(out.data)
    assert yy.max() - yy.min() == 8
    assert xx.max() - xx.min() == 2


def test_scale_identity():
    rng = np.random.default_rng(1)
    m = random_mask(rng, (10, 10, 10))
    np.testing.assert_array_equal(scale_mask(m, 1.0).data, m.data)


def test_scale_half_sphere_volume_ratio():
    m = sphere_mask((32, 32, 32), (16, 16, 16), 6.0)
    out = scale_mask(m, 0.5)
    ratio = count(out) / count(m)
    assert abs(ratio - 0.125) <= 0.2 * 0.125


def test_scale_clips_at_boundary():
    m = Mask(np.zeros((8, 8, 8), dtype=np.uint8))
    m.data[3:5, 3:5, 0:8] = 1  # bar touching the x edges
    out = scale_mask(m, 2.0)
    assert out.dims == m.dims
    assert count(out) > 0  # clipped, not an error


def test_scale_factor_out_of_range():
    m = sphere_mask((8, 8, 8), (4, 4, 4), 2.0)
    with pytest.raises(ValueError):
        scale_mask(m, 0.05)
    with pytest.raises(ValueError):
        scale_mask(m, 11.0)


def test_translate():
    m = Mask(np.zeros((5, 5, 5), dtype=np.uint8))
    m.data[1, 1, 1] = 1
    np.testing.assert_array_equal(translate_mask(m, (0, 0, 0)).data, m.data)
    out = translate_mask(m, (2, 0, 0))
    assert out.data[3, 1, 1] == 1 and count(out) == 1
    assert count(translate_mask(m, (10, 0, 0))) == 0


# ---------------------------------------------------------------------------
# boolean algebra

def test_union_intersection_count_basics():
    rng = np.random.default_rng(2)
    m = random_mask(rng, (6, 6, 6))
    empty = Mask(np.zeros((6, 6, 6), dtype=np.uint8))
    np.testing.assert_array_equal(union(m, empty).data, m.data)
    np.testing.assert_array_equal(intersection(m, m).data, m.data)
    assert count(intersection(m, m)) == count(m)

    a = Mask(np.zeros((4, 4, 4), dtype=np.uint8))
    b = Mask(np.zeros((4, 4, 4), dtype=np.uint8))
    a.data[0, 0, 0] = 1
    b.data[3, 3, 3] = 1
    assert count(union(a, b)) == 2
    assert count(intersection(a, b)) == 0


def test_dim_mismatch_raises():
    a = Mask(np.zeros((4, 4, 4), dtype=np.uint8))
    b = Mask(np.zeros((4, 4, 5), dtype=np.uint8))
    with pytest.raises(ValueError):
        union(a, b)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), p=st.floats(0.05, 0.8))
def test_inclusion_exclusion(seed, p):
    rng = np.random.default_rng(seed)
    a = random_mask(rng, (6, 6, 6), p)
    b = random_mask(rng, (6, 6, 6), p)
    assert (count(union(a, b)) + count(intersection(a, b))
            == count(a) + count(b))


# ---------------------------------------------------------------------------
# connected components

_OFFSETS_6 = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0),
              (0, 0, 1), (0, 0, -1)]
_OFFSETS_26 = [(dz, dy, dx) for dz in (-1, 0, 1) for dy in (-1, 0, 1)
               for dx in (-1, 0, 1) if (dz, dy, dx) != (0, 0, 0)]


def flood_fill_labels(data, connectivity):
    """Brute-force flood fill oracle."""
    offsets = _OFFSETS_6 if connectivity == 6 else _OFFSETS_26
    labels = np.zeros(data.shape, dtype=np.int32)
    nxt = 0
    for start in zip(*np.nonzero(data)):
        if labels[start]:
            continue
        nxt += 1
        stack = [start]
        labels[start] = nxt
        while stack:
            z, y, x = stack.pop()
            for dz, dy, dx in offsets:
                q = (z + dz, y + dy, x + dx)
                if all(0 <= q[i] < data.shape[i] for i in range(3)) \
                        and data[q] and not labels[q]:
                    labels[q] = nxt
                    stack.append(q)
    return labels, nxt


def labelings_equal(a, b):
    """Same partition up to label permutation."""
    fg = a > 0
    if not np.array_equal(fg, b > 0):
        return False
    pairs = set(zip(a[fg].tolist(), b[fg].tolist()))
    return (len({p[0] for p in pairs}) == len(pairs)
            == len({p[1] for p in pairs}))


def test_cc_empty_and_touching():
    empty = Mask(np.zeros((4, 4, 4), dtype=np.uint8))
    _, n = connected_components(empty)
    assert n == 0
    m = Mask(np.zeros((4, 4, 4), dtype=np.uint8))
    m.data[1, 1, 1] = 1
    m.data[1, 1, 2] = 1  # face neighbors
    _, n6 = connected_components(m, 6)
    assert n6 == 1


def test_cc_matches_flood_fill_oracle():
    rng = np.random.default_rng(7)
    for _ in range(100):
        m = Mask((rng.random((16, 16, 16)) < 0.2).astype(np.uint8))
        for conn in (6, 26):
            got, n_got = connected_components(m, conn)
            want, n_want = flood_fill_labels(m.data, conn)
            assert n_got == n_want
            assert labelings_equal(got, want)


# ---------------------------------------------------------------------------
# blur / resample / crop

def test_blur_sigma_zero_identity():
    rng = np.random.default_rng(3)
    v = Volume(rng.random((6, 6, 6)).astype(np.float32))
    np.testing.assert_array_equal(gaussian_blur(v, 0.0).data, v.data)


def test_blur_constant_preserved():
    v = Volume(np.full((12, 12, 12), 3.25, dtype=np.float32))
    out = gaussian_blur(v, 1.5)
    interior = out.data[5:7, 5:7, 5:7]
    np.testing.assert_allclose(interior, 3.25, rtol=1e-6)


def test_blur_impulse_center_matches_kernel():
    v = Volume(np.zeros((15, 15, 15), dtype=np.float32))
    v.data[7, 7, 7] = 1.0
    sigma = 1.0
    out = gaussian_blur(v, sigma)
    k = gaussian_kernel(sigma)
    c = k[len(k) // 2]
    np.testing.assert_allclose(out.data[7, 7, 7], c ** 3, rtol=1e-6)
    # kernel renormalization conserves the global sum (impulse far from edge)
    np.testing.assert_allclose(out.data.sum(), 1.0, rtol=1e-5)


def test_resample_noop_and_constant():
    v = Volume(np.arange(4 * 4 * 4, dtype=np.float32).reshape(4, 4, 4))
    out = resample(v, 1.0)
    assert out.dims == v.dims
    np.testing.assert_array_equal(out.data, v.data)

    c = Volume(np.full((5, 6, 7), 2.5, dtype=np.float32), (2.0, 2.0, 2.0))
    out = resample(c, 1.0)
    assert out.dims == (10, 12, 14)
    np.testing.assert_allclose(out.data, 2.5, rtol=1e-6)


def test_resample_linear_ramp_downsample():
    nx = 16
    ramp = np.broadcast_to(np.arange(nx, dtype=np.float32), (4, 4, nx))
    v = Volume(ramp.copy(), (1.0, 1.0, 1.0))
    out = resample(v, 2.0)
    # output voxel j sits at input coordinate 2*j; ramp value is 2*j
    expect = 2.0 * np.arange(out.dims[2])
    np.testing.assert_allclose(out.data[1, 1, :], expect, atol=1e-5)


def test_resample_round_trip_constant():
    c = Volume(np.full((6, 6, 6), -0.75, dtype=np.float32), (2.0, 2.0, 2.0))
    back = resample(resample(c, 1.0), 2.0)
    assert back.dims == c.dims
    np.testing.assert_array_equal(back.data, c.data)


def test_resample_mask_nearest():
    m = sphere_mask((16, 16, 16), (8, 8, 8), 5.0)
    out = resample(m, 2.0)
    assert isinstance(out, Mask)
    assert set(np.unique(out.data)) <= {0, 1}


def test_crop_identity_and_indexing():
    v = Volume(np.arange(8, dtype=np.float32).reshape(2, 2, 2))
    out = crop(v, (0, 0, 0), (2, 2, 2))
    np.testing.assert_array_equal(out.data, v.data)

    big = Volume(np.arange(4 ** 3, dtype=np.float32).reshape(4, 4, 4))
    sub = crop(big, (1, 2, 0), (2, 2, 2))
    np.testing.assert_array_equal(sub.data, big.data[1:3, 2:4, 0:2])


def test_crop_pads_with_zero():
    v = Volume(np.ones((4, 4, 4), dtype=np.float32))
    out = crop(v, (-1, 0, 0), (3, 4, 4))
    assert np.all(out.data[0] == 0)
    assert np.all(out.data[1:] == 1)


def test_crop_outside_grid_raises():
    v = Volume(np.ones((4, 4, 4), dtype=np.float32))
    with pytest.raises(ValueError):
        crop(v, (10, 0, 0), (2, 2, 2))


# ---------------------------------------------------------------------------
# PVOL format

def test_pvol_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    v = Volume(rng.random((3, 4, 5)).astype(np.float32), (1.0, 2.0, 3.0))
    p = tmp_path / "v.pvol"
    write_pvol(p, v)
    back = read_pvol(p)
    assert isinstance(back, Volume)
    assert back.dims == v.dims and back.spacing == v.spacing
    np.testing.assert_array_equal(back.data, v.data)

    m = random_mask(rng, (4, 4, 4))
    pm = tmp_path / "m.pvol"
    write_pvol(pm, m)
    backm = read_pvol(pm)
    assert isinstance(backm, Mask)
    np.testing.assert_array_equal(backm.data, m.data)


def test_pvol_rejects_bad_magic_and_version(tmp_path):
    p = tmp_path / "bad.pvol"
    p.write_bytes(b"NOPE" + b"\x00" * 40)
    with pytest.raises(ValueError):
        read_pvol(p)
    v = Volume(np.zeros((1, 1, 1), dtype=np.float32))
    p2 = tmp_path / "v.pvol"
    write_pvol(p2, v)
    raw = bytearray(p2.read_bytes())
    raw[4] = 99  # bump version
    p2.write_bytes(bytes(raw))
    with pytest.raises(ValueError):
        read_pvol(p2)
