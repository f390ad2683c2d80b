"""Detection losses and the weighted total with auxiliary branch supervision."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor


def _tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def smooth_l1(pred, target, delta: float = 1.0) -> Tensor:
    """Mean Huber-style loss: 0.5 e^2 / delta below ``delta``, |e| - 0.5 delta above."""
    pred, target = _tensor(pred), _tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    if delta <= 0:
        raise ValueError("delta must be positive")
    err = pred - target
    a = ag.absolute(err)
    small = a.data < delta
    quad = err * err * (0.5 / delta)
    lin = a - 0.5 * delta
    return ag.mean(ag.where(small, quad, lin))


def bce(logits, labels) -> Tensor:
    """Mean binary cross-entropy on logits.

    Written as ``y*softplus(-x) + (1-y)*softplus(x)``; the shorter
    ``softplus(x) - x*y`` cancels badly for confident correct logits.
    """
    logits = _tensor(logits)
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != logits.shape:
        raise ValueError(f"shape mismatch {logits.shape} vs {labels.shape}")
    if np.any((labels != 0) & (labels != 1)):
        raise ValueError("labels must be 0 or 1")
    return ag.mean(ag.softplus(-logits) * Tensor(labels) + ag.softplus(logits) * Tensor(1.0 - labels))


@dataclass
class LossBreakdown:
    l_rpn: float
    l_ref: float
    l_depth: float
    l_as1: float
    l_as2: float
    total: float
    alpha: float = 0.5
    beta: float = 0.5

    def as_row(self, step: int) -> list:
        return [step, self.l_rpn, self.l_ref, self.l_depth, self.l_as1, self.l_as2, self.total]

    def as_dict(self) -> dict:
        return asdict(self)


CSV_COLUMNS = ("step", "l_rpn", "l_ref", "l_depth", "l_as1", "l_as2", "total")


def weighted_total(l_rpn, l_ref, l_depth, l_as1, l_as2, alpha: float = 0.5, beta: float = 0.5):
    """``l_rpn + l_ref + l_depth + alpha*l_as1 + beta*l_as2``, summed left to right.

    Works on floats and on Tensors alike.
    """
    return l_rpn + l_ref + l_depth + alpha * l_as1 + beta * l_as2


def compose_total(l_rpn, l_ref, l_depth, l_as1, l_as2, alpha: float = 0.5, beta: float = 0.5) -> LossBreakdown:
    parts = [float(x.item() if isinstance(x, Tensor) else x) for x in (l_rpn, l_ref, l_depth, l_as1, l_as2)]
    for name, value in zip(("l_rpn", "l_ref", "l_depth", "l_as1", "l_as2"), parts):
        if not np.isfinite(value) or value < 0:
            raise ValueError(f"{name} must be finite and non-negative, got {value}")
    return LossBreakdown(*parts, weighted_total(*parts, alpha, beta), alpha, beta)


def write_loss_csv(path, rows: list[LossBreakdown]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for step, row in enumerate(rows):
            w.writerow([step] + [repr(float(v)) for v in row.as_row(step)[1:]])


def read_loss_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {k: (int(v) if k == "step" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]
