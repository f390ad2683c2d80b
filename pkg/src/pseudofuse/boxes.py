"""Oriented 3D boxes: containment, residual coding, matching and the text format.

Boxes travel as ``n x 7`` arrays ``(cx, cy, cz, l, w, h, yaw)``; ``RoI`` is
the single-box view with a score.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np


def wrap_angle(a):
    """Map angles into (-pi, pi]."""
    a = np.asarray(a, dtype=np.float64)
    out = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    out = np.where(out == -np.pi, np.pi, out)
    # in-range angles pass through untouched (the shift above costs an ulp)
    return np.where((a > -np.pi) & (a <= np.pi), a, out)


@dataclass(frozen=True)
class RoI:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float = 0.0
    score: float = 0.0

    def __post_init__(self):
        if any(s <= 0 for s in self.size):
            raise ValueError("box sizes must be positive")
        if not -np.pi < self.yaw <= np.pi:
            object.__setattr__(self, "yaw", float(wrap_angle(self.yaw)))

    def as_array(self) -> np.ndarray:
        return np.array([*self.center, *self.size, self.yaw], dtype=np.float64)

    @classmethod
    def from_array(cls, row, score: float = 0.0) -> "RoI":
        row = [float(x) for x in row]
        return cls(tuple(row[0:3]), tuple(row[3:6]), row[6], float(score))


def boxes_array(rois: Iterable[RoI]) -> np.ndarray:
    rows = [r.as_array() for r in rois]
    return np.array(rows).reshape(-1, 7)


def points_in_box(points: np.ndarray, box: np.ndarray, margin: float = 0.0) -> np.ndarray:
    """Closed-box containment test; yaw rotates about z."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rel = points - box[:3]
    c, s = np.cos(box[6]), np.sin(box[6])
    lx = c * rel[:, 0] + s * rel[:, 1]
    ly = -s * rel[:, 0] + c * rel[:, 1]
    half = box[3:6] / 2.0 + margin
    return (np.abs(lx) <= half[0]) & (np.abs(ly) <= half[1]) & (np.abs(rel[:, 2]) <= half[2])


def encode_residuals(rois: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Residuals turning ``rois`` into ``targets``: center offset, log size ratio, yaw delta."""
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 7)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 7)
    return np.column_stack([
        targets[:, :3] - rois[:, :3],
        np.log(targets[:, 3:6] / rois[:, 3:6]),
        wrap_angle(targets[:, 6] - rois[:, 6]),
    ])


def apply_residuals(rois: np.ndarray, residuals: np.ndarray) -> np.ndarray:
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 7)
    residuals = np.asarray(residuals, dtype=np.float64).reshape(-1, 7)
    return np.column_stack([
        rois[:, :3] + residuals[:, :3],
        rois[:, 3:6] * np.exp(residuals[:, 3:6]),
        wrap_angle(rois[:, 6] + residuals[:, 6]),
    ])


def match_by_center(rois: np.ndarray, gt: np.ndarray, scale: float = 0.5) -> np.ndarray:
    """Index of the matched ground-truth box per RoI, or -1.

    A RoI matches the nearest ground-truth center when the distance is below
    ``scale`` times that box's full diagonal.
    """
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 7)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 7)
    out = np.full(len(rois), -1, dtype=np.int64)
    if len(rois) == 0 or len(gt) == 0:
        return out
    d = np.linalg.norm(rois[:, None, :3] - gt[None, :, :3], axis=2)
    nearest = np.argmin(d, axis=1)
    limit = scale * np.linalg.norm(gt[:, 3:6], axis=1)
    ok = d[np.arange(len(rois)), nearest] < limit[nearest]
    out[ok] = nearest[ok]
    return out


def save_boxes(path, boxes: np.ndarray, scores: np.ndarray | None = None) -> None:
    """One ``cx cy cz l w h yaw score`` line per box."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    scores = np.zeros(len(boxes)) if scores is None else np.asarray(scores, dtype=np.float64)
    lines = [" ".join(repr(float(v)) for v in (*b, s)) for b, s in zip(boxes, scores)]
    Path(path).write_text("".join(line + "\n" for line in lines))


def load_boxes(path) -> tuple[np.ndarray, np.ndarray]:
    rows = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        vals = line.split()
        if len(vals) != 8:
            raise ValueError(f"{path}:{lineno}: expected 8 values, got {len(vals)}")
        rows.append([float(v) for v in vals])
    arr = np.array(rows, dtype=np.float64).reshape(-1, 8)
    return arr[:, :7], arr[:, 7]
