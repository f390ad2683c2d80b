"""Point species, voxelization, farthest point sampling and neighbourhood queries."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import SENTINEL
from .calib import Calibration, unproject_pixel
from .depth import DenseDepthMap


@dataclass
class RawPointCloud:
    points: np.ndarray  # N x 3, LiDAR frame
    intensity: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("raw points must be finite")
        if self.intensity is not None:
            self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if len(self.intensity) != len(self.points):
                raise ValueError("intensity length differs from point count")

    def __len__(self) -> int:
        return len(self.points)

    def features(self) -> np.ndarray:
        """N x 4 rows of (x, y, z, intensity); intensity 0 when absent."""
        inten = self.intensity if self.intensity is not None else np.zeros(len(self))
        return np.column_stack([self.points, inten])

    def subset(self, mask) -> "RawPointCloud":
        inten = None if self.intensity is None else self.intensity[mask]
        return RawPointCloud(self.points[mask], inten)


@dataclass
class PseudoPointCloud:
    xyz: np.ndarray  # N x 3
    rgb: np.ndarray  # N x 3 in [0, 1]
    uv: np.ndarray  # N x 2 source pixel (column, row)
    image_size: tuple[int, int] = (1, 1)  # (W, H)

    def __len__(self) -> int:
        return len(self.xyz)

    def features(self, normalize_uv: bool = True) -> np.ndarray:
        """N x 8 rows of (x, y, z, r, g, b, u, v); uv scaled to [0, 1) by default."""
        uv = self.uv / np.asarray(self.image_size, dtype=np.float64) if normalize_uv else self.uv
        return np.column_stack([self.xyz, self.rgb, uv])

    def subset(self, mask) -> "PseudoPointCloud":
        return PseudoPointCloud(self.xyz[mask], self.rgb[mask], self.uv[mask], self.image_size)


def build_pseudo_cloud(image: np.ndarray, dense: DenseDepthMap, calib: Calibration, stride: int = 1) -> PseudoPointCloud:
    """One pseudo point per (strided) pixel, lifted with the completed depth."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape[:2] != dense.depth.shape or image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"image {image.shape} does not match depth map {dense.depth.shape}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    rows = np.arange(0, dense.height, stride)
    cols = np.arange(0, dense.width, stride)
    vv, uu = np.meshgrid(rows, cols, indexing="ij")
    u = uu.ravel().astype(np.float64)
    v = vv.ravel().astype(np.float64)
    d = dense.depth[vv, uu].ravel()
    xyz = unproject_pixel(u, v, d, calib)
    rgb = image[vv, uu].reshape(-1, 3)
    return PseudoPointCloud(xyz, rgb, np.column_stack([u, v]), (dense.width, dense.height))


@dataclass
class VoxelGrid:
    voxel_size: np.ndarray
    range_min: np.ndarray
    range_max: np.ndarray
    indices: np.ndarray  # V x 3 int, ascending lexicographic
    features: np.ndarray  # V x F member means
    counts: np.ndarray  # V
    point_voxel: np.ndarray = field(repr=False, default=None)  # voxel row per input point, -1 if dropped

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def dims(self) -> np.ndarray:
        return grid_dims(self.voxel_size, self.range_min, self.range_max)

    @property
    def centroids(self) -> np.ndarray:
        return self.features[:, :3]

    def linear_keys(self) -> np.ndarray:
        return _linear_keys(self.indices, self.dims)

    def voxel_of(self, positions: np.ndarray) -> np.ndarray:
        """Integer voxel index of each position (may fall outside the grid)."""
        return np.floor((np.asarray(positions) - self.range_min) / self.voxel_size).astype(np.int64)


def grid_dims(voxel_size, range_min, range_max) -> np.ndarray:
    span = (np.asarray(range_max, dtype=np.float64) - np.asarray(range_min, dtype=np.float64))
    return np.ceil(span / np.asarray(voxel_size, dtype=np.float64) - 1e-9).astype(np.int64)


def _linear_keys(idx: np.ndarray, dims: np.ndarray) -> np.ndarray:
    return (idx[:, 0] * dims[1] + idx[:, 1]) * dims[2] + idx[:, 2]


def voxelize(points: np.ndarray, voxel_size, range_min, range_max) -> VoxelGrid:
    """Bin rows of ``points`` (first three columns are xyz) and average each bin.

    A point is in range when ``range_min <= p < range_max`` on every axis.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] < 3:
        raise ValueError("points must be N x F with F >= 3")
    size = np.broadcast_to(np.asarray(voxel_size, dtype=np.float64), (3,)).copy()
    lo = np.asarray(range_min, dtype=np.float64).reshape(3)
    hi = np.asarray(range_max, dtype=np.float64).reshape(3)
    if np.any(size <= 0) or np.any(lo >= hi):
        raise ValueError("need positive voxel size and range_min < range_max")
    xyz = points[:, :3]
    inside = np.all((xyz >= lo) & (xyz < hi), axis=1)
    idx = np.floor((xyz[inside] - lo) / size).astype(np.int64)
    dims = grid_dims(size, lo, hi)
    idx = np.minimum(idx, dims - 1)
    point_voxel = np.full(len(points), -1, dtype=np.int64)
    if len(idx) == 0:
        return VoxelGrid(size, lo, hi, np.zeros((0, 3), np.int64), np.zeros((0, points.shape[1])), np.zeros(0, np.int64), point_voxel)
    uniq, inverse, counts = np.unique(idx, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(uniq), points.shape[1]))
    np.add.at(sums, inverse, points[inside])
    point_voxel[inside] = inverse
    return VoxelGrid(size, lo, hi, uniq, sums / counts[:, None], counts, point_voxel)


@dataclass
class KeypointSet:
    indices: np.ndarray
    positions: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


def farthest_point_sample(points: np.ndarray, m: int, start_index: int = 0) -> KeypointSet:
    """Greedy farthest point sampling; ties go to the lowest index."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    if m < 1 or n < 1 or not 0 <= start_index < n:
        raise ValueError(f"bad FPS request: m={m}, n={n}, start={start_index}")
    m = min(m, n)
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = start_index
    best = np.sum((points - points[start_index]) ** 2, axis=1)
    best[start_index] = -1.0
    for i in range(1, m):
        nxt = int(np.argmax(best))
        chosen[i] = nxt
        d2 = np.sum((points - points[nxt]) ** 2, axis=1)
        np.minimum(best, d2, out=best)
        best[nxt] = -1.0  # chosen points stay at -1 under later minimum updates
    return KeypointSet(chosen, points[chosen])


def _compact_rows(hit: np.ndarray, candidates: np.ndarray, k: int) -> np.ndarray:
    """First ``k`` hit candidates per row, padded with the first hit or SENTINEL."""
    m = hit.shape[0]
    order = np.argsort(~hit, axis=1, kind="stable")[:, :k]
    picked = np.take_along_axis(candidates, order, axis=1)
    count = hit.sum(axis=1)
    if picked.shape[1] < k:
        picked = np.concatenate([picked, np.zeros((m, k - picked.shape[1]), picked.dtype)], axis=1)
    slot = np.arange(k)[None, :]
    out = np.where(slot < count[:, None], picked, picked[:, :1])
    out[count == 0] = SENTINEL
    return out.astype(np.int64)


def ball_query(centers: np.ndarray, points: np.ndarray, radius: float, max_neighbors: int) -> np.ndarray:
    """M x K indices of points within ``radius`` of each center, ascending index order.

    Short rows are padded by repeating their first hit; empty rows are SENTINEL.
    """
    if radius <= 0 or max_neighbors < 1:
        raise ValueError("radius must be > 0 and max_neighbors >= 1")
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.full((len(centers), max_neighbors), SENTINEL, dtype=np.int64)
    if len(points) == 0 or len(centers) == 0:
        return out
    r2 = radius * radius
    ids = np.arange(len(points))[None, :]
    chunk = max(1, 4_000_000 // len(points))
    for s in range(0, len(centers), chunk):
        c = centers[s:s + chunk]
        d2 = np.sum((c[:, None, :] - points[None, :, :]) ** 2, axis=2)
        hit = d2 <= r2
        out[s:s + chunk] = _compact_rows(hit, np.broadcast_to(ids, hit.shape), max_neighbors)
    return out


def kernel_offsets(k: int) -> np.ndarray:
    r = np.arange(-k, k + 1)
    return np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)


def voxel_query(centers: np.ndarray, grid: VoxelGrid, kernel_radius: int, max_neighbors: int) -> np.ndarray:
    """M x K rows of occupied voxels in the (2k+1)^3 kernel around each center's voxel.

    Entries index ``grid.indices`` rows, in ascending lexicographic voxel order,
    padded like :func:`ball_query`.  Centers outside the grid get SENTINEL rows.
    """
    if kernel_radius < 0 or max_neighbors < 1:
        raise ValueError("kernel_radius must be >= 0 and max_neighbors >= 1")
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    out = np.full((len(centers), max_neighbors), SENTINEL, dtype=np.int64)
    if len(grid) == 0 or len(centers) == 0:
        return out
    dims = grid.dims
    inside = np.all((centers >= grid.range_min) & (centers < grid.range_max), axis=1)
    home = np.minimum(grid.voxel_of(centers[inside]), dims - 1)
    keys = grid.linear_keys()
    offsets = kernel_offsets(kernel_radius)
    rows = np.flatnonzero(inside)
    chunk = max(1, 2_000_000 // len(offsets))
    for s in range(0, len(rows), chunk):
        nb = home[s:s + chunk, None, :] + offsets[None, :, :]  # c x O x 3
        in_grid = np.all((nb >= 0) & (nb < dims), axis=2)
        nk = _linear_keys(nb.reshape(-1, 3), dims).reshape(in_grid.shape)
        pos = np.searchsorted(keys, nk)
        pos_c = np.minimum(pos, len(keys) - 1)
        hit = in_grid & (keys[pos_c] == nk)
        out[rows[s:s + chunk]] = _compact_rows(hit, pos_c, max_neighbors)
    return out


# file formats -------------------------------------------------------------

POINTS_MAGIC = b"PCLD"
_PTS_HEADER = struct.Struct("<4sII")


def save_points(path, rows: np.ndarray) -> None:
    """Header (magic, count, fields) then row-major little-endian float32."""
    rows = np.asarray(rows)
    if rows.ndim != 2:
        raise ValueError("expected an N x F matrix")
    with open(path, "wb") as fh:
        fh.write(_PTS_HEADER.pack(POINTS_MAGIC, rows.shape[0], rows.shape[1]))
        fh.write(np.ascontiguousarray(rows, dtype="<f4").tobytes())


def load_points(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    magic, n, f = _PTS_HEADER.unpack_from(blob)
    if magic != POINTS_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    data = np.frombuffer(blob, dtype="<f4", offset=_PTS_HEADER.size)
    if data.size != n * f:
        raise ValueError(f"{path}: expected {n * f} values, found {data.size}")
    return data.reshape(n, f).astype(np.float64)


def load_points_csv(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=",", comments="#", dtype=np.float64))
