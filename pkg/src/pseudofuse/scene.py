"""Deterministic synthetic driving scenes: ground plane plus box obstacles.

LiDAR points and camera pixels are produced by ray casting the same
geometry, so ground-truth depth is exact and every point has a known surface.
The LiDAR sits at the origin (x forward, y left, z up); the camera is pitched
down far enough that every pixel ray meets the ground.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boxes import save_boxes, wrap_angle
from .calib import Calibration, save_calibration
from .depth import DenseDepthMap, save_depth
from .points import RawPointCloud, save_points

GROUND_COLOR = (0.35, 0.35, 0.35)
PALETTE = (
    (0.85, 0.15, 0.15),
    (0.15, 0.35, 0.85),
    (0.95, 0.75, 0.10),
    (0.20, 0.70, 0.30),
    (0.60, 0.20, 0.70),
    (0.95, 0.50, 0.15),
)


@dataclass
class SceneConfig:
    n_boxes: int = 2
    box_x: tuple[float, float] = (6.0, 15.0)
    box_y_fraction: float = 0.4  # |y| <= fraction * x keeps boxes in view
    box_length: tuple[float, float] = (3.4, 4.2)
    box_width: tuple[float, float] = (1.5, 1.8)
    box_height: tuple[float, float] = (1.4, 1.7)
    box_gap: float = 0.5
    ground_z: float = -1.73
    az_range_deg: tuple[float, float] = (-50.0, 50.0)
    az_steps: int = 400
    el_range_deg: tuple[float, float] = (-24.9, 2.0)
    el_steps: int = 64
    max_range: float = 60.0
    image_width: int = 128
    image_height: int = 48
    focal: float = 64.0
    camera_pitch_deg: float = 25.0
    camera_center: tuple[float, float, float] = (0.0, 0.0, 0.0)  # co-located: no parallax occlusion
    depth_noise: float = 0.0
    dropout: float = 0.0
    max_retries: int = 1000


@dataclass
class SyntheticScene:
    boxes: np.ndarray  # n x 7
    raw_cloud: RawPointCloud
    image: np.ndarray  # H x W x 3
    gt_depth: DenseDepthMap
    calib: Calibration
    seed: int
    config: SceneConfig = field(repr=False, default_factory=SceneConfig)
    raw_surface: np.ndarray = field(repr=False, default=None)  # -1 ground, k = box k

    def depth_at(self, u, v) -> np.ndarray:
        """Ground-truth depth along the camera ray through sub-pixel ``(u, v)``."""
        dirs = self.calib.pixel_rays(u, v).reshape(-1, 3)
        origins = np.broadcast_to(self.calib.camera_center, dirs.shape)
        t, _ = cast_rays(origins, dirs, self.boxes, self.config.ground_z)
        return t.reshape(np.shape(u))

    def surface_distance(self, points: np.ndarray) -> np.ndarray:
        return surface_distance(points, self.boxes, self.config.ground_z)


def camera_calibration(cfg: SceneConfig) -> Calibration:
    base = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    th = np.radians(cfg.camera_pitch_deg)
    pitch = np.array([[1.0, 0.0, 0.0], [0.0, np.cos(th), -np.sin(th)], [0.0, np.sin(th), np.cos(th)]])
    R = pitch @ base
    K = np.array([
        [cfg.focal, 0.0, cfg.image_width / 2.0],
        [0.0, cfg.focal, cfg.image_height / 2.0],
        [0.0, 0.0, 1.0],
    ])
    t = -R @ np.asarray(cfg.camera_center, dtype=np.float64)
    return Calibration(K, R, t, cfg.image_width, cfg.image_height)


def _to_box_frame(vecs: np.ndarray, yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.column_stack([c * vecs[:, 0] + s * vecs[:, 1], -s * vecs[:, 0] + c * vecs[:, 1], vecs[:, 2]])


def ray_box(origins: np.ndarray, dirs: np.ndarray, box: np.ndarray) -> np.ndarray:
    """Entry parameter of each ray into an oriented box (inf on a miss)."""
    o = _to_box_frame(origins - box[:3], box[6])
    d = _to_box_frame(dirs, box[6])
    half = box[3:6] / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    lo = np.minimum(t1, t2)
    hi = np.maximum(t1, t2)
    parallel = d == 0
    inside_slab = np.abs(o) <= half
    lo = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), lo)
    hi = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), hi)
    near = lo.max(axis=1)
    far = hi.min(axis=1)
    hit = (near <= far) & (near > 0)
    return np.where(hit, near, np.inf)


def cast_rays(origins: np.ndarray, dirs: np.ndarray, boxes: np.ndarray, ground_z: float):
    """Nearest hit parameter and surface id (-1 ground, k box, -2 nothing) per ray."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = (ground_z - origins[:, 2]) / dirs[:, 2]
    t_ground = np.where((dirs[:, 2] < 0) & (t_ground > 0), t_ground, np.inf)
    best = t_ground
    surface = np.where(np.isfinite(t_ground), -1, -2)
    for k, box in enumerate(np.asarray(boxes).reshape(-1, 7)):
        tb = ray_box(origins, dirs, box)
        closer = tb < best
        best = np.where(closer, tb, best)
        surface = np.where(closer, k, surface)
    return best, surface


def surface_distance(points: np.ndarray, boxes: np.ndarray, ground_z: float) -> np.ndarray:
    """Unsigned distance from each point to the nearest scene surface."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    dist = np.abs(points[:, 2] - ground_z)
    for box in np.asarray(boxes).reshape(-1, 7):
        local = np.abs(_to_box_frame(points - box[:3], box[6])) - box[3:6] / 2.0
        outside = np.linalg.norm(np.maximum(local, 0.0), axis=1)
        inside = np.minimum(local.max(axis=1), 0.0)
        dist = np.minimum(dist, np.abs(outside + inside))
    return dist


def sample_boxes(cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    boxes: list[np.ndarray] = []
    tries = 0
    while len(boxes) < cfg.n_boxes:
        tries += 1
        if tries > cfg.max_retries:
            raise RuntimeError(f"could not place {cfg.n_boxes} non-overlapping boxes in {cfg.max_retries} tries")
        x = rng.uniform(*cfg.box_x)
        y = rng.uniform(-cfg.box_y_fraction * x, cfg.box_y_fraction * x)
        l, w, h = rng.uniform(*cfg.box_length), rng.uniform(*cfg.box_width), rng.uniform(*cfg.box_height)
        yaw = float(wrap_angle(rng.uniform(-np.pi, np.pi)))
        cand = np.array([x, y, cfg.ground_z + h / 2.0, l, w, h, yaw])
        radius = 0.5 * np.hypot(l, w)
        if all(np.hypot(*(cand[:2] - b[:2])) > radius + 0.5 * np.hypot(b[3], b[4]) + cfg.box_gap for b in boxes):
            boxes.append(cand)
    return np.array(boxes).reshape(-1, 7)


def lidar_directions(cfg: SceneConfig) -> np.ndarray:
    az = np.radians(np.linspace(*cfg.az_range_deg, cfg.az_steps))
    el = np.radians(np.linspace(*cfg.el_range_deg, cfg.el_steps))
    ee, aa = np.meshgrid(el, az, indexing="ij")
    return np.stack([np.cos(ee) * np.cos(aa), np.cos(ee) * np.sin(aa), np.sin(ee)], axis=-1).reshape(-1, 3)


def generate_scene(cfg: SceneConfig | None = None, seed: int = 0) -> SyntheticScene:
    cfg = cfg if cfg is not None else SceneConfig()
    if cfg.n_boxes < 0:
        raise ValueError("n_boxes must be >= 0")
    rng = np.random.default_rng(seed)
    boxes = sample_boxes(cfg, rng)
    calib = camera_calibration(cfg)

    dirs = lidar_directions(cfg)
    t, surf = cast_rays(np.zeros_like(dirs), dirs, boxes, cfg.ground_z)
    hit = t <= cfg.max_range
    if cfg.depth_noise > 0:
        t = t + rng.normal(0.0, cfg.depth_noise, t.shape)
    if cfg.dropout > 0:
        hit &= rng.random(t.shape) >= cfg.dropout
    points = dirs[hit] * t[hit, None]
    surf = surf[hit]
    intensity = np.where(surf == -1, 0.2, 0.7)
    raw = RawPointCloud(points, intensity)

    v, u = np.meshgrid(np.arange(cfg.image_height), np.arange(cfg.image_width), indexing="ij")
    pdirs = calib.pixel_rays(u.ravel().astype(float), v.ravel().astype(float))
    pt, psurf = cast_rays(np.broadcast_to(calib.camera_center, pdirs.shape), pdirs, boxes, cfg.ground_z)
    if not np.all(np.isfinite(pt)):
        raise ValueError("some camera pixels see no surface; increase camera pitch")
    colors = np.array((GROUND_COLOR,) + PALETTE)
    image = np.where(
        (psurf == -1)[:, None],
        colors[0],
        colors[1 + np.mod(np.maximum(psurf, 0), len(PALETTE))],
    ).reshape(cfg.image_height, cfg.image_width, 3)
    depth = DenseDepthMap(pt.reshape(cfg.image_height, cfg.image_width))
    return SyntheticScene(boxes, raw, image, depth, calib, seed, cfg, surf)


def save_ppm(path, image: np.ndarray) -> None:
    img = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def load_ppm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    data = np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8)
    return data.reshape(h, w, 3).astype(np.float64) / maxval


def export_scene(scene: SyntheticScene, out_dir) -> dict[str, str]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "raw": out / "raw.bin",
        "image": out / "image.ppm",
        "gt_depth": out / "gt_depth.dpt",
        "boxes": out / "boxes.txt",
        "calib": out / "calib.txt",
    }
    save_points(files["raw"], scene.raw_cloud.features())
    save_ppm(files["image"], scene.image)
    save_depth(files["gt_depth"], scene.gt_depth.depth)
    save_boxes(files["boxes"], scene.boxes)
    save_calibration(files["calib"], scene.calib)
    return {k: str(v) for k, v in files.items()}
