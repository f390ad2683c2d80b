"""Pseudo/raw voxel backbone and keypoint feature aggregation.

Each branch (raw LiDAR, pseudo points) gets a four-level voxel hierarchy:
level 1 maps the input voxel means through a Linear+ReLU, and every further
level mean-merges the previous level into voxels of twice the size before its
own Linear+ReLU.  This stands in for a sparse 3D convolution stack; the
multi-resolution structure the keypoint aggregation consumes is the same.

Keypoint features gather five sources around every keypoint: the raw and
pseudo points inside a ball (``point``) and the voxels of both branches near
the keypoint on each level (``conv1`` .. ``conv4``).  Every neighbourhood is
pooled on its own, the pooled vectors are concatenated, and an MLP produces
the final keypoint feature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Linear, MLP, Tensor
from .points import VoxelGrid, ball_query, grid_dims, voxel_query, voxelize

NUM_LEVELS = 4
SOURCES = ("point", "conv1", "conv2", "conv3", "conv4")


@dataclass
class HierarchyLevel:
    grid: VoxelGrid  # occupancy and centroids (grid.features[:, :3])
    features: Tensor  # V x C, learned
    parent: np.ndarray | None  # row in this level for each row of the previous level

    @property
    def centroids(self) -> np.ndarray:
        return self.grid.features[:, :3]


@dataclass
class VoxelFeatureHierarchy:
    levels: list[HierarchyLevel]

    def __getitem__(self, k: int) -> HierarchyLevel:
        return self.levels[k]

    def __len__(self) -> int:
        return len(self.levels)


def hierarchy_structure(grid: VoxelGrid, num_levels: int = NUM_LEVELS) -> list[tuple[VoxelGrid, np.ndarray | None]]:
    """Occupancy of every level and the child -> parent row maps between them."""
    if len(grid) == 0:
        raise ValueError("cannot build a hierarchy from an empty grid")
    out: list[tuple[VoxelGrid, np.ndarray | None]] = [(grid, None)]
    for k in range(1, num_levels):
        prev = out[-1][0]
        coarse = voxelize(prev.features[:, :3], grid.voxel_size * 2.0**k, grid.range_min, grid.range_max)
        if np.any(coarse.point_voxel < 0):
            raise ValueError("coarse level lost voxels; range is inconsistent")
        out.append((coarse, coarse.point_voxel))
    return out


def make_branch_layers(in_features: int, widths: Sequence[int], rng: np.random.Generator, name: str) -> list[Linear]:
    layers = []
    prev = in_features
    for k, w in enumerate(widths):
        layers.append(Linear(prev, w, rng, f"{name}.level{k + 1}"))
        prev = w
    return layers


def build_hierarchy(grid: VoxelGrid, layers: Sequence[Linear], structure=None) -> VoxelFeatureHierarchy:
    """Run one branch of the voxel backbone over ``grid``.

    ``structure`` (from :func:`hierarchy_structure`) can be passed in to skip
    recomputing the parameter-free occupancy part.
    """
    if len(layers) != NUM_LEVELS:
        raise ValueError(f"need {NUM_LEVELS} layers, got {len(layers)}")
    structure = structure if structure is not None else hierarchy_structure(grid, NUM_LEVELS)
    levels: list[HierarchyLevel] = []
    feats = Tensor(grid.features)
    for k, ((g, parent), layer) in enumerate(zip(structure, layers)):
        if k > 0:
            feats = ag.segment_mean(feats, parent, len(g))
        feats = ag.relu(layer(feats))
        levels.append(HierarchyLevel(g, feats, parent))
    return VoxelFeatureHierarchy(levels)


# keypoint aggregation ------------------------------------------------------


@dataclass
class KeypointQueries:
    """Neighbourhood indices around the keypoints; depends on geometry only."""

    point_raw: np.ndarray
    point_pse: np.ndarray | None
    conv_raw: list[np.ndarray]
    conv_pse: list[np.ndarray] | None


def level_kernel_radius(radius: float, voxel_size: np.ndarray) -> int:
    """Metric query radius expressed as an integer voxel kernel radius."""
    return max(0, math.ceil(radius / float(np.min(voxel_size)) - 1e-9))


def query_keypoints(
    keypoints: np.ndarray,
    raw_xyz: np.ndarray,
    pse_xyz: np.ndarray | None,
    raw_structure,
    pse_structure,
    radii: Sequence[float],
    max_neighbors: int,
) -> KeypointQueries:
    if len(radii) != 1 + NUM_LEVELS:
        raise ValueError("need one radius for points and one per level")
    point_raw = ball_query(keypoints, raw_xyz, radii[0], max_neighbors)
    point_pse = None if pse_xyz is None else ball_query(keypoints, pse_xyz, radii[0], max_neighbors)

    def per_level(structure):
        out = []
        for k, (g, _) in enumerate(structure):
            out.append(voxel_query(keypoints, g, level_kernel_radius(radii[k + 1], g.voxel_size), max_neighbors))
        return out

    conv_raw = per_level(raw_structure)
    conv_pse = None if pse_structure is None else per_level(pse_structure)
    return KeypointQueries(point_raw, point_pse, conv_raw, conv_pse)


@dataclass
class KeypointFeatureTable:
    positions: np.ndarray
    f_kp: Tensor  # M x D_kp
    pieces: list[tuple[str, str, Tensor]]  # (source, species, pooled M x C) in concat order
    empty: np.ndarray = field(repr=False)  # keypoints with no neighbour in any source

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def slice_widths(self) -> list[tuple[str, str, int]]:
        return [(src, sp, t.shape[1]) for src, sp, t in self.pieces]

    @property
    def pre_mlp_width(self) -> int:
        return sum(w for _, _, w in self.slice_widths)

    def species_view(self, species: str) -> Tensor:
        """Keypoint feature followed by the pooled channels that came from one species."""
        if species not in ("raw", "pse"):
            raise ValueError(f"unknown species {species!r}")
        parts = [self.f_kp] + [t for _, sp, t in self.pieces if sp == species]
        return ag.concat(parts, axis=1)


def pre_mlp_layout(
    sources: Sequence[str],
    raw_point_width: int,
    pse_point_width: int | None,
    raw_widths: Sequence[int],
    pse_widths: Sequence[int] | None,
) -> list[tuple[str, str, int]]:
    """(source, species, width) of each pooled slice, in concatenation order."""
    layout = []
    for src in SOURCES:
        if src not in sources:
            continue
        if src == "point":
            layout.append(("point", "raw", raw_point_width))
            if pse_point_width is not None:
                layout.append(("point", "pse", pse_point_width))
        else:
            k = int(src[-1]) - 1
            layout.append((src, "raw", raw_widths[k]))
            if pse_widths is not None:
                layout.append((src, "pse", pse_widths[k]))
    return layout


def aggregate_keypoint_features(
    keypoints: np.ndarray,
    queries: KeypointQueries,
    raw_hier: VoxelFeatureHierarchy,
    pse_hier: VoxelFeatureHierarchy | None,
    raw_point_features: np.ndarray,
    pse_point_features: np.ndarray | None,
    mlp: MLP,
    pool_mode: str = "max",
    sources: Sequence[str] = SOURCES,
) -> KeypointFeatureTable:
    """Pool every enabled source around each keypoint, concatenate, apply ``mlp``.

    A pseudo slice is only present when the pseudo input is given
    (``pse_point_features`` for ``point``, ``pse_hier`` for the conv levels).
    """
    unknown = set(sources) - set(SOURCES)
    if unknown or not sources:
        raise ValueError(f"invalid source selection {sorted(sources)}")
    m = len(keypoints)
    if m == 0:
        raise ValueError("no keypoints")
    pieces: list[tuple[str, str, Tensor]] = []
    any_hit = np.zeros(m, dtype=bool)

    def add(src, species, table: Tensor, index: np.ndarray):
        nonlocal any_hit
        any_hit |= np.any(index >= 0, axis=1)
        pieces.append((src, species, ag.group_pool(table, index, pool_mode)))

    for src in SOURCES:
        if src not in sources:
            continue
        if src == "point":
            add("point", "raw", Tensor(raw_point_features), queries.point_raw)
            if pse_point_features is not None:
                add("point", "pse", Tensor(pse_point_features), queries.point_pse)
        else:
            k = int(src[-1]) - 1
            add(src, "raw", raw_hier[k].features, queries.conv_raw[k])
            if pse_hier is not None:
                add(src, "pse", pse_hier[k].features, queries.conv_pse[k])
    stacked = ag.concat([t for _, _, t in pieces], axis=1)
    if stacked.shape[1] != mlp.in_features:
        raise ValueError(f"MLP expects width {mlp.in_features}, pooled features are {stacked.shape[1]} wide")
    return KeypointFeatureTable(np.asarray(keypoints), mlp(stacked), pieces, ~any_hit)


# bird's-eye view -------------------------------------------------------------


@dataclass
class BevFeatureMap:
    features: Tensor  # (nx * ny) x (nz * C); cell (ix, iy) is row ix * ny + iy
    nx: int
    ny: int
    nz: int
    cell_size: np.ndarray  # x/y/z size of the source voxels
    range_min: np.ndarray

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def grid(self) -> np.ndarray:
        return self.features.data.reshape(self.nx, self.ny, self.channels)

    def cell_center(self, ix, iy) -> np.ndarray:
        return np.stack(
            [self.range_min[0] + (np.asarray(ix) + 0.5) * self.cell_size[0],
             self.range_min[1] + (np.asarray(iy) + 0.5) * self.cell_size[1]],
            axis=-1,
        )


def flatten_to_bev(hier: VoxelFeatureHierarchy) -> BevFeatureMap:
    """Stack the top level's voxels along z into per-cell channel slots (z ascending)."""
    top = hier.levels[-1]
    g = top.grid
    nx, ny, nz = (int(d) for d in g.dims)
    c = top.features.shape[1]
    idx = g.indices
    rows = (idx[:, 0] * ny + idx[:, 1]) * nz + idx[:, 2]
    placed = ag.scatter_rows(top.features, rows, nx * ny * nz)
    return BevFeatureMap(ag.reshape(placed, (nx * ny, nz * c)), nx, ny, nz, g.voxel_size, g.range_min)


def empty_bev(voxel_size, range_min, range_max, channels_per_slot: int) -> BevFeatureMap:
    """All-zero map for a level with no occupied voxels."""
    size = np.broadcast_to(np.asarray(voxel_size, dtype=np.float64), (3,)).copy()
    nx, ny, nz = (int(d) for d in grid_dims(size, range_min, range_max))
    return BevFeatureMap(Tensor(np.zeros((nx * ny, nz * channels_per_slot))), nx, ny, nz, size, np.asarray(range_min, dtype=np.float64))
