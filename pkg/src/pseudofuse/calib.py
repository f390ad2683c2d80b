"""Camera calibration and the LiDAR <-> pixel-depth mapping.

Pixel ``(u, v)`` means column ``u``, row ``v``.  Depth grids are stored as
``(H, W)`` numpy arrays indexed ``[v, u]``; an empty cell holds ``EMPTY``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EMPTY = 0.0


@dataclass(frozen=True)
class Calibration:
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if int(self.width) < 1 or int(self.height) < 1:
            raise ValueError("image size must be positive")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        if np.max(np.abs(R.T @ R - np.eye(3))) >= 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("R must be a proper rotation")
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0 or K[2, 2] != 1:
            raise ValueError("K must be upper triangular with K[2,2] = 1")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def K_inv(self) -> np.ndarray:
        return np.linalg.inv(self.K)

    @property
    def camera_center(self) -> np.ndarray:
        """Camera origin expressed in the LiDAR frame."""
        return -self.R.T @ self.t

    def pixel_rays(self, u, v) -> np.ndarray:
        """LiDAR-frame direction vectors whose camera-frame z component is 1."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        pix = np.stack([u, v, np.ones_like(u)], axis=-1)
        cam = pix @ self.K_inv.T
        return cam @ self.R


@dataclass
class SparseDepthMap:
    depth: np.ndarray  # (H, W); EMPTY where no sample landed

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def valid_mask(self) -> np.ndarray:
        return self.depth != EMPTY

    @property
    def valid_count(self) -> int:
        return int(np.count_nonzero(self.valid_mask))


@dataclass
class ProjectedPoints:
    """Points that landed in the image: source indices plus ``(u, v, d)`` rows."""

    index: np.ndarray
    uvd: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.index)


def project_points(points: np.ndarray, calib: Calibration) -> ProjectedPoints:
    """Map LiDAR points to pixels, dropping those behind the camera or off-image."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cam = points @ calib.R.T + calib.t
    d = cam[:, 2]
    front = d > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        img = cam @ calib.K.T
        u = img[:, 0] / d
        v = img[:, 1] / d
    keep = front & (u >= 0) & (u < calib.width) & (v >= 0) & (v < calib.height)
    idx = np.flatnonzero(keep)
    return ProjectedPoints(idx, np.stack([u[idx], v[idx], d[idx]], axis=1))


def rasterize_depth(uvd: np.ndarray, width: int, height: int) -> SparseDepthMap:
    """Z-buffer samples into a sparse depth grid; nearest depth wins per cell."""
    uvd = np.asarray(uvd, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(uvd)):
        raise ValueError("samples must have finite coordinates")
    if np.any(uvd[:, 2] <= 0):
        raise ValueError("sample depths must be positive")
    depth = np.full((height, width), np.inf)
    col = np.floor(uvd[:, 0]).astype(np.int64)
    row = np.floor(uvd[:, 1]).astype(np.int64)
    inside = (col >= 0) & (col < width) & (row >= 0) & (row < height)
    if not np.all(inside):
        raise ValueError("samples must lie inside the image")
    np.minimum.at(depth, (row, col), uvd[:, 2])
    depth[np.isinf(depth)] = EMPTY
    return SparseDepthMap(depth)


def unproject_pixel(u, v, d, calib: Calibration) -> np.ndarray:
    """Inverse of the projection: LiDAR-frame point(s) for pixel(s) at depth ``d``.

    Works on scalars or equally shaped arrays; the result has a trailing axis of 3.
    """
    d = np.asarray(d, dtype=np.float64)
    if np.any(~(d > 0)):
        raise ValueError("depth must be positive")
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    pix = np.stack(np.broadcast_arrays(u * d, v * d, d), axis=-1)
    cam = np.linalg.solve(calib.K, pix.reshape(-1, 3).T).T
    pts = (cam - calib.t) @ calib.R
    return pts.reshape(pix.shape)


# calibration files --------------------------------------------------------


def _read_keyvalues(path) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key: values'")
        key, values = line.split(":", 1)
        out[key.strip()] = values.split()
    return out


def load_calibration(path) -> Calibration:
    """Read the plain ``K: / R: / t: / size:`` calibration format."""
    kv = _read_keyvalues(path)
    try:
        K = np.array([float(x) for x in kv["K"]])
        R = np.array([float(x) for x in kv["R"]])
        t = np.array([float(x) for x in kv["t"]])
        w, h = (int(x) for x in kv["size"])
    except KeyError as exc:
        raise ValueError(f"{path}: missing key {exc.args[0]!r}") from None
    if K.size != 9 or R.size != 9 or t.size != 3:
        raise ValueError(f"{path}: K and R need 9 values, t needs 3")
    return Calibration(K.reshape(3, 3), R.reshape(3, 3), t, w, h)


def save_calibration(path, calib: Calibration) -> None:
    def fmt(a):
        return " ".join(repr(float(x)) for x in np.ravel(a))

    Path(path).write_text(
        f"K: {fmt(calib.K)}\nR: {fmt(calib.R)}\nt: {fmt(calib.t)}\nsize: {calib.width} {calib.height}\n"
    )


def nearest_rotation(M: np.ndarray) -> np.ndarray:
    """Closest proper rotation to ``M`` in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def load_kitti_calibration(path, width: int, height: int) -> Calibration:
    """Build a Calibration from a KITTI object calib file.

    ``P2 = K [I | K^-1 p]`` is split into intrinsics and a camera-frame offset,
    so LiDAR -> pixel becomes ``K (R0 (Rv x + tv) + K^-1 p)``, i.e.
    ``R = R0 Rv`` and ``t = R0 tv + K^-1 p``.  R is snapped to the nearest
    rotation because the files only carry ~6 significant digits.
    """
    kv: dict[str, list[str]] = {}
    for raw in Path(path).read_text().splitlines():
        if ":" in raw:
            key, values = raw.split(":", 1)
            kv[key.strip()] = values.split()
    P2 = np.array([float(x) for x in kv["P2"]]).reshape(3, 4)
    R0 = np.array([float(x) for x in kv["R0_rect"]]).reshape(3, 3)
    Tr = np.array([float(x) for x in kv["Tr_velo_to_cam"]]).reshape(3, 4)
    K = P2[:, :3].copy()
    K[1, 0] = K[2, 0] = K[2, 1] = 0.0
    K = K / K[2, 2]
    offset = np.linalg.solve(K, P2[:, 3])
    R = nearest_rotation(R0 @ Tr[:, :3])
    t = R0 @ Tr[:, 3] + offset
    return Calibration(K, R, t, width, height)
