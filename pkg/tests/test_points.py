import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from pseudofuse.calib import Calibration
from pseudofuse.depth import DenseDepthMap
from pseudofuse.points import (
    RawPointCloud,
    ball_query,
    build_pseudo_cloud,
    farthest_point_sample,
    kernel_offsets,
    load_points,
    load_points_csv,
    save_points,
    voxel_query,
    voxelize,
)

from . import oracles

LINE = np.column_stack([np.arange(10.0), np.zeros(10), np.zeros(10)])


def ident(w, h):
    return Calibration(np.eye(3), np.eye(3), np.zeros(3), w, h)


# pseudo clouds


def test_pseudo_cloud_one_point_per_pixel():
    cloud = build_pseudo_cloud(np.zeros((2, 2, 3)), DenseDepthMap(np.ones((2, 2))), ident(2, 2))
    assert len(cloud) == 4


def test_pseudo_cloud_identity_pixel():
    depth = np.full((2, 2), 5.0)
    depth[0, 0] = 3.0
    cloud = build_pseudo_cloud(np.zeros((2, 2, 3)), DenseDepthMap(depth), ident(2, 2))
    np.testing.assert_array_equal(cloud.xyz[0], [0.0, 0.0, 3.0])


def test_pseudo_cloud_stride():
    cloud = build_pseudo_cloud(np.zeros((4, 4, 3)), DenseDepthMap(np.ones((4, 4))), ident(4, 4), stride=2)
    assert sorted(map(tuple, cloud.uv.astype(int).tolist())) == sorted([(0, 0), (2, 0), (0, 2), (2, 2)])


def test_pseudo_features_layout(rng):
    img = rng.random((3, 4, 3))
    cloud = build_pseudo_cloud(img, DenseDepthMap(np.full((3, 4), 2.0)), ident(4, 3))
    f = cloud.features()
    assert f.shape == (12, 8)
    np.testing.assert_array_equal(f[:, 3:6], img.reshape(-1, 3))
    assert f[:, 6].max() < 1 and f[:, 7].max() < 1
    np.testing.assert_array_equal(cloud.features(normalize_uv=False)[:, 6:], cloud.uv)


def test_raw_cloud_features():
    cloud = RawPointCloud(np.ones((3, 3)), np.array([0.1, 0.2, 0.3]))
    assert cloud.features().shape == (3, 4)
    assert RawPointCloud(np.ones((2, 3))).features()[:, 3].tolist() == [0.0, 0.0]
    with pytest.raises(ValueError):
        RawPointCloud(np.array([[np.inf, 0, 0]]))


# voxelization


def test_voxel_single_bin_mean():
    g = voxelize(np.array([[0.1, 0.1, 0.1], [0.3, 0.3, 0.3]]), 1.0, (0, 0, 0), (4, 4, 4))
    assert len(g) == 1 and g.counts.tolist() == [2]
    np.testing.assert_allclose(g.centroids[0], [0.2, 0.2, 0.2])


def test_voxel_floor_at_boundary():
    g = voxelize(np.array([[1.0, 0.5, 0.5]]), 1.0, (0, 0, 0), (4, 4, 4))
    assert g.indices.tolist() == [[1, 0, 0]]


def test_voxel_conservation_against_dict_oracle(rng):
    lo, hi, size = np.array([-2.0, -1, 0]), np.array([3.0, 2, 1.5]), np.array([0.5, 0.4, 0.3])
    pts = rng.uniform(lo - 0.5, hi + 0.5, (1000, 3))
    g = voxelize(pts, size, lo, hi)
    expect = oracles.voxel_counts(pts, size, lo, hi)
    assert {tuple(i): c for i, c in zip(g.indices.tolist(), g.counts.tolist())} == expect
    assert [tuple(r) for r in g.indices.tolist()] == sorted(expect)


def test_voxel_half_open_range():
    g = voxelize(np.array([[4.0, 1.0, 1.0], [0.0, 0.0, 0.0]]), 1.0, (0, 0, 0), (4, 4, 4))
    assert g.counts.sum() == 1 and g.point_voxel.tolist() == [-1, 0]


@given(hnp.arrays(np.float64, st.tuples(st.integers(0, 60), st.just(3)), elements=st.floats(-1, 5)))
def test_voxel_properties(pts):
    g = voxelize(pts, 0.7, (0, 0, 0), (4, 4, 4))
    inside = np.all((pts >= 0) & (pts < 4), axis=1)
    assert g.counts.sum() == inside.sum()
    if len(g):
        keys = g.linear_keys()
        assert np.all(np.diff(keys) > 0)
        assert np.all(g.centroids >= g.indices * 0.7 - 1e-12)
        assert np.all(g.centroids <= (g.indices + 1) * 0.7 + 1e-12)


# farthest point sampling


def test_fps_endpoints():
    assert farthest_point_sample(LINE, 2).indices.tolist() == [0, 9]


def test_fps_tie_lowest_index():
    assert farthest_point_sample(LINE, 3).indices.tolist() == [0, 9, 4]
    assert oracles.fps(LINE, 3) == [0, 9, 4]


def test_fps_exhaustion_and_overflow(rng):
    pts = rng.random((7, 3))
    assert sorted(farthest_point_sample(pts, 7).indices.tolist()) == list(range(7))
    assert len(farthest_point_sample(pts, 50)) == 7


def test_fps_matches_oracle(rng):
    for _ in range(20):
        pts = rng.random((rng.integers(1, 40), 3))
        m = int(rng.integers(1, 45))
        assert farthest_point_sample(pts, m).indices.tolist() == oracles.fps(pts, m)


def test_fps_duplicates_do_not_repeat():
    pts = np.zeros((5, 3))
    assert farthest_point_sample(pts, 5).indices.tolist() == [0, 1, 2, 3, 4]


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 30), st.just(3)), elements=st.floats(-10, 10)), st.integers(1, 40))
def test_fps_properties(pts, m):
    ks = farthest_point_sample(pts, m)
    assert len(ks) == min(m, len(pts))
    assert len(set(ks.indices.tolist())) == len(ks)
    np.testing.assert_array_equal(ks.positions, pts[ks.indices])


# ball query


def test_ball_query_hand_example():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
    assert ball_query(np.zeros((1, 3)), pts, 1.5, 4).tolist() == [[0, 1, 0, 0]]


def test_ball_query_empty_row():
    assert ball_query(np.zeros((1, 3)), np.array([[5.0, 0, 0]]), 1.0, 3).tolist() == [[-1, -1, -1]]


def test_ball_query_truncation():
    pts = np.array([[0.5, 0, 0], [0.1, 0, 0]])
    assert ball_query(np.zeros((1, 3)), pts, 1.0, 1).tolist() == [[0]]


def test_ball_query_matches_oracle(rng):
    for _ in range(10):
        pts = rng.random((int(rng.integers(1, 80)), 3))
        centers = rng.random((5, 3))
        np.testing.assert_array_equal(ball_query(centers, pts, 0.3, 6), oracles.ball_query(centers, pts, 0.3, 6))


@given(
    hnp.arrays(np.float64, st.tuples(st.integers(0, 40), st.just(3)), elements=st.floats(-2, 2)),
    st.floats(0.05, 2.0),
    st.integers(1, 8),
)
def test_ball_query_properties(pts, radius, k):
    centers = np.array([[0.0, 0.0, 0.0], [1.0, -1.0, 0.5]])
    out = ball_query(centers, pts, radius, k)
    assert out.shape == (2, k)
    for c, row in zip(centers, out):
        if row[0] == -1:
            assert np.all(row == -1)
            continue
        assert np.all(np.sum((pts[row] - c) ** 2, axis=1) <= radius * radius)


# voxel query


def brute_voxel_query(center, grid, k, kmax):
    home = np.floor((center - grid.range_min) / grid.voxel_size).astype(int)
    hits = [i for i, idx in enumerate(grid.indices) if np.max(np.abs(idx - home)) <= k][:kmax]
    return hits + [hits[0]] * (kmax - len(hits)) if hits else [-1] * kmax


def test_voxel_query_self_voxel():
    g = voxelize(np.array([[1.5, 1.5, 1.5]]), 1.0, (0, 0, 0), (4, 4, 4))
    assert voxel_query(np.array([[1.2, 1.7, 1.1]]), g, 1, 3).tolist() == [[0, 0, 0]]


def test_voxel_query_zero_kernel():
    g = voxelize(np.array([[1.5, 1.5, 1.5], [2.5, 1.5, 1.5]]), 1.0, (0, 0, 0), (4, 4, 4))
    assert voxel_query(np.array([[2.2, 1.2, 1.9]]), g, 0, 2).tolist() == [[1, 1]]
    assert voxel_query(np.array([[0.2, 0.2, 0.2]]), g, 0, 2).tolist() == [[-1, -1]]


def test_voxel_query_full_kernel_lexicographic():
    cells = kernel_offsets(1) + 1
    g = voxelize(cells + 0.5, 1.0, (0, 0, 0), (3, 3, 3))
    row = voxel_query(np.array([[1.5, 1.5, 1.5]]), g, 1, 27)[0]
    assert row.tolist() == list(range(27))
    assert [tuple(x) for x in g.indices[row].tolist()] == sorted(tuple(x) for x in cells.tolist())


def test_voxel_query_matches_brute_force(rng):
    pts = rng.uniform(0, 4, (150, 3))
    g = voxelize(pts, 0.5, (0, 0, 0), (4, 4, 4))
    centers = rng.uniform(0, 4, (25, 3))
    out = voxel_query(centers, g, 1, 10)
    for c, row in zip(centers, out):
        assert row.tolist() == brute_voxel_query(c, g, 1, 10)


# file formats


def test_points_binary_roundtrip(tmp_path, rng):
    rows = rng.random((9, 4)).astype(np.float32)
    save_points(tmp_path / "p.bin", rows)
    np.testing.assert_array_equal(load_points(tmp_path / "p.bin"), rows)


def test_points_bad_magic(tmp_path):
    (tmp_path / "p.bin").write_bytes(b"XXXX" + bytes(8))
    with pytest.raises(ValueError):
        load_points(tmp_path / "p.bin")


def test_points_csv(tmp_path):
    (tmp_path / "p.csv").write_text("# x,y,z\n1,2,3\n")
    np.testing.assert_array_equal(load_points_csv(tmp_path / "p.csv"), [[1.0, 2.0, 3.0]])
