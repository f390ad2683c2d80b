"""Sparse-to-dense depth completion and depth-map serialization."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy import ndimage

from .calib import EMPTY, SparseDepthMap


@dataclass
class DenseDepthMap:
    depth: np.ndarray  # (H, W), every cell finite and > 0

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def height(self) -> int:
        return self.depth.shape[0]


class DepthCompleter(Protocol):
    def __call__(self, image: np.ndarray, sparse: SparseDepthMap) -> DenseDepthMap: ...


def _dilate_once(depth: np.ndarray, empty: np.ndarray, kernel: int) -> np.ndarray:
    # min over valid cells of the window; inf where the window has none
    src = np.where(empty, np.inf, depth)
    return ndimage.minimum_filter(src, size=kernel, mode="constant", cval=np.inf)


def _nearest_fill(depth: np.ndarray, empty: np.ndarray) -> None:
    """Fill empty cells from the Euclidean-nearest valid cell, first in row-major order on ties."""
    vr, vc = np.nonzero(~empty)
    er, ec = np.nonzero(empty)
    values = depth[vr, vc]
    chunk = max(1, 2_000_000 // max(len(vr), 1))
    for start in range(0, len(er), chunk):
        r = er[start:start + chunk, None]
        c = ec[start:start + chunk, None]
        d2 = (r - vr[None, :]) ** 2 + (c - vc[None, :]) ** 2
        depth[er[start:start + chunk], ec[start:start + chunk]] = values[np.argmin(d2, axis=1)]


def complete_depth(
    image: np.ndarray | None,
    sparse: SparseDepthMap,
    kernel: int = 5,
    max_passes: int | None = None,
) -> DenseDepthMap:
    """Classical completion: repeated 5x5 min-dilation, then nearest-valid fill.

    Valid input cells are never modified.  ``image`` is accepted for interface
    parity with guided completers and ignored here.  ``max_passes`` bounds the
    dilation loop (``None`` = run until nothing is left to fill).
    """
    if image is not None and tuple(np.shape(image)[:2]) != sparse.depth.shape:
        raise ValueError("image and depth map sizes differ")
    if sparse.valid_count == 0:
        raise ValueError("cannot complete a depth map with no valid cells")
    depth = np.array(sparse.depth, dtype=np.float64)
    empty = depth == EMPTY
    passes = 0
    while empty.any() and (max_passes is None or passes < max_passes):
        grown = _dilate_once(depth, empty, kernel)
        fill = empty & np.isfinite(grown)
        if not fill.any():
            break
        depth[fill] = grown[fill]
        empty &= ~fill
        passes += 1
    if empty.any():
        _nearest_fill(depth, empty)
    return DenseDepthMap(depth)


def depth_loss(predicted: DenseDepthMap, reference: DenseDepthMap, valid_mask: np.ndarray) -> float:
    """Mean absolute depth error over ``valid_mask`` (stand-in for a learned completer's loss)."""
    if predicted.depth.shape != reference.depth.shape:
        raise ValueError("depth maps differ in shape")
    mask = np.asarray(valid_mask, dtype=bool)
    if mask.shape != predicted.depth.shape:
        raise ValueError("mask shape does not match depth maps")
    if not mask.any():
        raise ValueError("depth loss over an empty mask")
    return float(np.mean(np.abs(predicted.depth[mask] - reference.depth[mask])))


# serialization ------------------------------------------------------------

DEPTH_MAGIC = b"DPTH"
_HEADER = struct.Struct("<4sIIf")


def save_depth(path, depth: np.ndarray, sentinel: float = EMPTY) -> None:
    """Raw little-endian float32 grid behind a 16-byte header (magic, W, H, sentinel)."""
    depth = np.asarray(depth)
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DEPTH_MAGIC, w, h, sentinel))
        fh.write(np.ascontiguousarray(depth, dtype="<f4").tobytes())


def load_depth(path) -> tuple[np.ndarray, float]:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise ValueError(f"{path}: file too short for a depth header")
    magic, w, h, sentinel = _HEADER.unpack_from(blob)
    if magic != DEPTH_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    data = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size)
    if data.size != w * h:
        raise ValueError(f"{path}: expected {w * h} values, found {data.size}")
    return data.reshape(h, w).astype(np.float64), float(sentinel)


def dump_depth_ascii(path, depth: np.ndarray, max_depth: float | None = None, maxval: int = 255) -> None:
    """Plain PGM (P2) debug view; empty cells are 0, depth scaled linearly to ``maxval``."""
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    top = max_depth if max_depth is not None else (depth.max() if depth.size else 1.0)
    top = top if top > 0 else 1.0
    levels = np.clip(np.round(depth / top * maxval), 0, maxval).astype(int)
    rows = "\n".join(" ".join(str(x) for x in row) for row in levels)
    Path(path).write_text(f"P2\n{w} {h}\n{maxval}\n{rows}\n")
