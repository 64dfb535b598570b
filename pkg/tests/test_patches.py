import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vitgan_lab import patches as PT
from vitgan_lab import tensor as T
from vitgan_lab.tensor import Parameter, Tape


def _window_oracle(img, P, o):
    """Extended patches by direct enumeration of each window, zero outside."""
    H, W, C = img.shape
    K = P + 2 * o
    out = []
    for r in range(H // P):
        for c in range(W // P):
            win = np.zeros((K, K, C))
            for i in range(K):
                for j in range(K):
                    y, x = r * P - o + i, c * P - o + j
                    if 0 <= y < H and 0 <= x < W:
                        win[i, j] = img[y, x]
            out.append(win.reshape(-1))
    return np.stack(out)


def test_raster_patches(f64):
    img = np.arange(16.0).reshape(4, 4, 1)
    p = PT.patchify(PT.PatchGrid(4, 4, 1, 2, overlap=0), img).data
    assert p.shape == (4, 4)
    assert np.array_equal(p[0], [0, 1, 4, 5])


def test_overlap_matches_window_oracle(f64):
    img = np.arange(16.0).reshape(4, 4, 1)
    p = PT.patchify(PT.PatchGrid(4, 4, 1, 2, overlap=1), img).data
    assert np.array_equal(p, _window_oracle(img, 2, 1))
    assert np.array_equal(p[0].reshape(4, 4)[0], [0, 0, 0, 0])
    g = np.random.default_rng(0)
    for H, W, C, P, o in [(8, 8, 3, 4, 2), (6, 4, 2, 2, 1), (8, 8, 1, 2, 3)]:
        img = g.normal(size=(H, W, C))
        assert np.array_equal(PT.patchify(PT.PatchGrid(H, W, C, P, overlap=o), img).data,
                              _window_oracle(img, P, o))


def test_constant_image_patches(f64):
    img = np.full((8, 8, 1), 0.7)
    p = PT.patchify(PT.PatchGrid(8, 8, 1, 2), img).data.reshape(16, 4, 4)
    assert np.all(p[:, 1:3, 1:3] == 0.7)
    assert set(np.unique(p)) <= {0.0, 0.7}
    # interior windows never touch padding
    assert np.all(p[5] == 0.7)


def test_default_overlap_and_geometry():
    g = PT.PatchGrid(8, 8, 3, 4)
    assert g.overlap == 2 and g.seq_len == 4 and g.patch_dim == 8 * 8 * 3
    with pytest.raises(ValueError):
        PT.PatchGrid(8, 6, 1, 4)
    with pytest.raises(ValueError):
        PT.PatchGrid(8, 8, 1, 2, overlap=-1)


def test_depatchify_roundtrip_and_locality(f64):
    g = PT.PatchGrid(8, 8, 3, 4, overlap=0)
    img = np.random.default_rng(1).normal(size=(8, 8, 3))
    assert np.array_equal(PT.depatchify(g, PT.patchify(g, img)).data, img)
    assert np.all(PT.depatchify(g, np.zeros((4, 48))).data == 0)
    one = np.zeros((4, 48))
    one[2] = 1.0
    out = PT.depatchify(g, one).data
    mask = np.zeros((8, 8, 3), bool)
    mask[4:8, 0:4] = True
    assert np.all(out[mask] == 1) and np.all(out[~mask] == 0)


@given(st.integers(0, 10_000), st.sampled_from([(8, 8, 1, 2), (8, 8, 3, 4), (12, 8, 2, 4), (4, 4, 1, 1)]))
def test_partition_and_center_window(seed, geom):
    H, W, C, P = geom
    img = np.random.default_rng(seed).normal(size=(H, W, C)).astype(np.float32)
    g0 = PT.PatchGrid(H, W, C, P, overlap=0)
    small = PT.patchify(g0, img).data
    assert np.array_equal(PT.depatchify(g0, small).data, img)
    assert np.isclose(small.astype(np.float64).sum(), img.astype(np.float64).sum())
    o = max(P // 2, 1)
    big = PT.patchify(PT.PatchGrid(H, W, C, P, overlap=o), img).data
    K = P + 2 * o
    center = big.reshape(-1, K, K, C)[:, o : o + P, o : o + P]
    assert np.array_equal(center.reshape(small.shape), small)


def test_clamp_padding(f64):
    img = np.arange(16.0).reshape(4, 4, 1)
    p = PT.patchify(PT.PatchGrid(4, 4, 1, 2, overlap=1, padding="clamp"), img).data
    assert p[0].reshape(4, 4)[0, 0] == 0.0 and p[3].reshape(4, 4)[-1, -1] == 15.0


def test_patchify_gradient_counts_window_uses(f64):
    # each pixel's gradient equals the number of windows that see it
    x = Parameter(np.ones((1, 4, 4, 1)))
    with Tape() as tape:
        g = tape.backward(T.reduce_sum(PT.patchify(PT.PatchGrid(4, 4, 1, 2, overlap=1), x)))[x]
    assert g[0, 0, 0, 0] == 1 and g[0, 1, 1, 0] == 4


def test_positions():
    assert np.allclose(PT.patch_positions(PT.PatchGrid(4, 4, 1, 2, overlap=0)),
                       [(-0.5, -0.5), (-0.5, 0.5), (0.5, -0.5), (0.5, 0.5)])
    assert np.array_equal(PT.patch_positions(PT.PatchGrid(2, 2, 1, 2, overlap=0)), [[0.0, 0.0]])
    assert np.array_equal(PT.pixel_coords(1), [[0.0, 0.0]])
    assert np.allclose(PT.pixel_coords(2), [(-0.5, -0.5), (-0.5, 0.5), (0.5, -0.5), (0.5, 0.5)])


@given(st.integers(1, 9), st.integers(1, 9))
def test_coordinate_sets_symmetric(rows, P):
    pos = PT.patch_positions(PT.PatchGrid(rows * 2, rows * 2, 1, 2, overlap=0))
    for c in (pos, PT.pixel_coords(P)):
        assert np.all(np.abs(c) < 1)
        assert np.allclose(c.mean(0), 0.0, atol=1e-12)
        # 180 degree rotation of indices negates the coordinates
        assert np.allclose(c[::-1], -c)


def test_pnm_roundtrip_and_rounding(tmp_path):
    assert np.array_equal(PT.to_uint8(np.array([-1.0, 1.0, 0.0, 1 / 255.0])), [0, 255, 128, 128])
    # (x + 1) * 127.5 = 0.5 rounds half to even
    assert PT.to_uint8(np.array([0.5 / 127.5 - 1.0]))[0] == 0
    img = PT.from_uint8(np.random.default_rng(2).integers(0, 256, (5, 6, 3)))
    PT.write_pnm(tmp_path / "a.ppm", img, comment="config deadbeef")
    assert np.array_equal(PT.read_pnm(tmp_path / "a.ppm"), img)
    assert b"# config deadbeef" in (tmp_path / "a.ppm").read_bytes()


def test_tile_grid():
    imgs = np.zeros((16, 8, 8, 1))
    assert PT.tile_grid(imgs).shape == (32, 32, 1)
    assert PT.tile_grid(np.zeros((3, 2, 2, 1))).shape == (4, 4, 1)
