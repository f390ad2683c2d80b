import numpy as np
import pytest

from pseudofuse.autograd import Linear, MLP, Tensor
from pseudofuse.points import voxelize
from pseudofuse.prconv import (
    SOURCES,
    KeypointQueries,
    aggregate_keypoint_features,
    build_hierarchy,
    empty_bev,
    flatten_to_bev,
    hierarchy_structure,
    level_kernel_radius,
    pre_mlp_layout,
)

LO, HI = (0.0, 0.0, 0.0), (8.0, 8.0, 8.0)


def identity_layers(width, n=4):
    return [Linear.from_arrays(np.eye(width), np.zeros(width), f"id{k}") for k in range(n)]


def test_single_voxel_every_level():
    g = voxelize(np.array([[1.1, 1.2, 1.3, 1.0]]), 0.5, LO, HI)
    hier = build_hierarchy(g, identity_layers(4))
    assert [len(level.grid) for level in hier.levels] == [1, 1, 1, 1]


def test_two_voxels_merge_to_mean():
    pts = np.array([[0.2, 0.2, 0.2], [0.7, 0.2, 0.2]])
    struct = hierarchy_structure(voxelize(pts, 0.5, LO, HI))
    assert len(struct[0][0]) == 2 and len(struct[1][0]) == 1
    np.testing.assert_allclose(struct[1][0].centroids[0], pts.mean(axis=0))
    assert struct[1][1].tolist() == [0, 0]


def test_identity_first_level_reproduces_voxel_features(rng):
    pts = np.column_stack([rng.uniform(0, 8, (40, 3)), rng.uniform(0, 1, 40)])
    g = voxelize(pts, 0.5, LO, HI)
    hier = build_hierarchy(g, identity_layers(4))
    np.testing.assert_allclose(hier[0].features.data, g.features)


def test_hierarchy_level_counts_never_grow(rng):
    g = voxelize(rng.uniform(0, 8, (300, 3)), 0.25, LO, HI)
    sizes = [len(s[0]) for s in hierarchy_structure(g)]
    assert sizes == sorted(sizes, reverse=True)
    assert all(np.array_equal(s[0].voxel_size, g.voxel_size * 2**k) for k, s in enumerate(hierarchy_structure(g)))


def test_kernel_radius():
    assert level_kernel_radius(0.8, np.array([0.2, 0.2, 0.2])) == 4
    assert level_kernel_radius(1.0, np.array([0.4, 0.4, 0.4])) == 3


def setup_single_source(point_feats, index, pool_mode, width_out=2):
    kp = np.zeros((len(index), 3))
    g = voxelize(np.array([[0.1, 0.1, 0.1]]), 1.0, LO, HI)
    hier = build_hierarchy(g, identity_layers(3))
    q = KeypointQueries(np.asarray(index), None, [np.full((len(index), 1), -1)] * 4, None)
    c = point_feats.shape[1]
    mlp = MLP.from_layers([Linear.from_arrays(np.eye(width_out, c), np.zeros(width_out))])
    return aggregate_keypoint_features(kp, q, hier, None, point_feats, None, mlp, pool_mode, ("point",))


def test_two_neighbours_max_and_avg():
    feats = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert setup_single_source(feats, [[0, 1]], "max").f_kp.data.tolist() == [[1.0, 1.0]]
    assert setup_single_source(feats, [[0, 1]], "avg").f_kp.data.tolist() == [[0.5, 0.5]]


def test_singleton_neighbourhood():
    feats = np.array([[3.0, -2.0], [7.0, 7.0]])
    assert setup_single_source(feats, [[1, 1]], "max").f_kp.data.tolist() == [[7.0, 7.0]]


def test_isolated_keypoint_gets_mlp_of_zero():
    feats = np.array([[3.0, 4.0]])
    kp = np.zeros((1, 3))
    g = voxelize(np.array([[0.1, 0.1, 0.1]]), 1.0, LO, HI)
    hier = build_hierarchy(g, identity_layers(3))
    q = KeypointQueries(np.array([[-1, -1]]), None, [np.array([[-1]])] * 4, None)
    mlp = MLP.from_layers([Linear.from_arrays(np.ones((1, 2)), [0.25])])
    table = aggregate_keypoint_features(kp, q, hier, None, feats, None, mlp, "max", ("point",))
    assert table.f_kp.data.tolist() == [[0.25]]
    assert table.empty.tolist() == [True]


def test_layout_incremental_widths():
    widths = [sum(w for *_, w in pre_mlp_layout(SOURCES[: i + 1], 4, 8, [16] * 4, [16] * 4)) for i in range(5)]
    assert widths == [12, 44, 76, 108, 140]
    assert pre_mlp_layout(("point",), 4, 8, [16] * 4, None) == [("point", "raw", 4), ("point", "pse", 8)]


def test_aggregation_rejects_wrong_mlp_width():
    kp = np.zeros((1, 3))
    g = voxelize(np.array([[0.1, 0.1, 0.1]]), 1.0, LO, HI)
    hier = build_hierarchy(g, identity_layers(3))
    q = KeypointQueries(np.array([[0]]), None, [np.array([[-1]])] * 4, None)
    with pytest.raises(ValueError):
        aggregate_keypoint_features(kp, q, hier, None, np.ones((1, 2)), None, MLP((5, 2)), "max", ("point",))


def bev_of(points, width=2):
    g = voxelize(points, 1.0, LO, (4.0, 4.0, 4.0))
    layers = [Linear.from_arrays(np.eye(width, 3), np.full(width, 1.0))]
    layers += [Linear.from_arrays(np.eye(width), np.zeros(width)) for _ in range(3)]
    struct = [(g, None)] + [(g, np.arange(len(g)))] * 3  # keep one level size for a direct check
    return flatten_to_bev(build_hierarchy(g, layers, struct))


def test_bev_single_voxel():
    bev = bev_of(np.array([[1.5, 2.5, 0.5]]))
    grid = bev.grid()
    assert np.count_nonzero(np.linalg.norm(grid, axis=2)) == 1
    assert np.linalg.norm(grid[1, 2]) > 0
    np.testing.assert_allclose(bev.cell_center(1, 2), [1.5, 2.5])


def test_bev_two_z_slots():
    bev = bev_of(np.array([[1.5, 2.5, 0.5], [1.5, 2.5, 2.5]]))
    grid = bev.grid()
    assert np.count_nonzero(np.linalg.norm(grid, axis=2)) == 1
    cell = grid[1, 2].reshape(bev.nz, -1)
    assert np.count_nonzero(np.linalg.norm(cell, axis=1)) == 2
    assert np.linalg.norm(cell[0]) > 0 and np.linalg.norm(cell[2]) > 0


def test_empty_bev_is_zero():
    bev = empty_bev(1.0, LO, (4.0, 4.0, 4.0), 3)
    assert bev.features.shape == (16, 12) and not bev.features.data.any()
