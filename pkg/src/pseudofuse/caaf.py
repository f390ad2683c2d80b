"""RoI stage: proposal stub, RoI pooling over keypoints, gated fusion, refinement."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import SENTINEL, Linear, MLP, Tensor
from .boxes import apply_residuals, points_in_box
from .prconv import BevFeatureMap, KeypointFeatureTable


@dataclass
class Proposals:
    boxes: np.ndarray  # n x 7
    scores: np.ndarray  # activation norm at the peak
    cells: np.ndarray  # n x 2 BEV (ix, iy), -1 for injected boxes

    def __len__(self) -> int:
        return len(self.boxes)


def bev_peaks(bev: BevFeatureMap) -> tuple[np.ndarray, np.ndarray]:
    """Cells whose activation norm is positive and >= all 8 neighbours, best first.

    Equal norms are ordered by (row, col) = (ix, iy).
    """
    norm = np.linalg.norm(bev.grid(), axis=2)
    padded = np.pad(norm, 1, constant_values=-np.inf)
    peak = norm > 0
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            if dx or dy:
                peak &= norm >= padded[1 + dx:1 + dx + bev.nx, 1 + dy:1 + dy + bev.ny]
    ix, iy = np.nonzero(peak)
    scores = norm[ix, iy]
    order = np.lexsort((iy, ix, -scores))
    return np.column_stack([ix[order], iy[order]]), scores[order]


def propose_rois(
    bev: BevFeatureMap,
    top_n: int,
    nominal_size=(3.9, 1.6, 1.56),
    center_z: float = -0.95,
) -> Proposals:
    """Axis-aligned boxes of a nominal size centred on the strongest BEV peaks."""
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    cells, scores = bev_peaks(bev)
    cells, scores = cells[:top_n], scores[:top_n]
    xy = bev.cell_center(cells[:, 0], cells[:, 1]).reshape(-1, 2)
    boxes = np.column_stack([
        xy,
        np.full(len(cells), center_z),
        np.tile(np.asarray(nominal_size, dtype=np.float64), (len(cells), 1)),
        np.zeros(len(cells)),
    ]).reshape(-1, 7)
    return Proposals(boxes, scores, cells.reshape(-1, 2))


def jittered_boxes(gt: np.ndarray, copies: int, rng: np.random.Generator, center=0.3, size=0.1, yaw=0.1) -> np.ndarray:
    """Ground-truth boxes perturbed for use as test-mode RoIs; first copy of each is exact."""
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 7)
    out = []
    for box in gt:
        for c in range(copies):
            if c == 0:
                out.append(box.copy())
                continue
            b = box.copy()
            b[:3] += rng.uniform(-center, center, 3)
            b[3:6] *= np.exp(rng.uniform(-size, size, 3))
            b[6] = b[6] + rng.uniform(-yaw, yaw)
            out.append(b)
    return np.array(out).reshape(-1, 7)


def roi_members(boxes: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """n x K keypoint indices inside each closed box, SENTINEL-padded (K >= 1)."""
    members = [np.flatnonzero(points_in_box(positions, b)) for b in np.asarray(boxes).reshape(-1, 7)]
    k = max([1] + [len(m) for m in members])
    out = np.full((len(members), k), SENTINEL, dtype=np.int64)
    for i, m in enumerate(members):
        out[i, :len(m)] = m
    return out


def pool_roi_features(
    boxes: np.ndarray,
    table: KeypointFeatureTable,
    species: str,
    projection: Linear,
    members: np.ndarray | None = None,
) -> Tensor:
    """Max-pool one species' keypoint channels inside each RoI and project to D_m.

    RoIs without keypoints come out as zero rows.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    if len(table) == 0:
        raise ValueError("empty keypoint table")
    if len(boxes) == 0:
        return Tensor(np.zeros((0, projection.out_features)))
    members = roi_members(boxes, table.positions) if members is None else members
    pooled = ag.group_pool(table.species_view(species), members, "max")
    nonempty = (members[:, 0] != SENTINEL).astype(np.float64)[:, None]
    return projection(pooled) * nonempty


@dataclass
class FusionResult:
    fused: Tensor  # n x 2 D_m
    w_raw: Tensor  # n x D_m
    w_pse: Tensor  # n x D_m


def caaf_fuse(f_raw: Tensor, f_pse: Tensor, fc: Linear, adapter: Linear | None = None) -> FusionResult:
    """Sigmoid gates from one FC over the concatenated pair, applied elementwise.

    ``adapter`` optionally maps the fused 2 D_m features to another width.
    """
    if f_raw.shape != f_pse.shape or f_raw.ndim != 2:
        raise ValueError(f"RoI feature pair shapes differ: {f_raw.shape} vs {f_pse.shape}")
    d = f_raw.shape[1]
    if fc.in_features != 2 * d or fc.out_features != 2 * d:
        raise ValueError(f"fusion FC must be {2 * d} -> {2 * d}")
    gates = ag.sigmoid(fc(ag.concat([f_raw, f_pse], axis=1)))
    w_raw = ag.columns(gates, 0, d)
    w_pse = ag.columns(gates, d, 2 * d)
    fused = ag.concat([w_raw * f_raw, w_pse * f_pse], axis=1)
    if adapter is not None:
        fused = adapter(fused)
    return FusionResult(fused, w_raw, w_pse)


@dataclass
class Refinement:
    output: Tensor  # n x 8: seven residuals then a confidence logit
    boxes: np.ndarray
    confidence: np.ndarray

    @property
    def residuals(self) -> Tensor:
        return ag.columns(self.output, 0, 7)

    @property
    def logits(self) -> Tensor:
        return ag.reshape(ag.columns(self.output, 7, 8), (self.output.shape[0],))


def refine_boxes(fused: Tensor, boxes: np.ndarray, head: MLP) -> Refinement:
    """Apply the head's residuals to the RoIs and read out a confidence per RoI."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    if fused.ndim != 2 or fused.shape[1] != head.in_features or fused.shape[0] != len(boxes):
        raise ValueError(f"head expects {len(boxes)} x {head.in_features}, got {fused.shape}")
    if head.out_features != 8:
        raise ValueError("refinement head must output 8 values per RoI")
    if len(boxes) == 0:
        return Refinement(Tensor(np.zeros((0, 8))), boxes, np.zeros(0))
    out = head(fused)
    refined = apply_residuals(boxes, out.data[:, :7])
    return Refinement(out, refined, ag.sigmoid_array(out.data[:, 7]))
