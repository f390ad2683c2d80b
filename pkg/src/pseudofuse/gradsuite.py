"""Finite-difference checks for every differentiable op and the RoI head path.

Each case builds fresh random inputs from a generator and returns a scalar
closure plus the tensors to check.  Inputs for kinked ops (relu, abs, max,
smooth L1) are kept away from the kinks so central differences are valid.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import SENTINEL, Linear, MLP, Tensor
from .caaf import caaf_fuse, pool_roi_features, refine_boxes, roi_members
from .losses import bce, smooth_l1
from .prconv import KeypointFeatureTable

Case = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]


def _param(a, name="x") -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), True, name)


def _away(rng, shape, gap=0.1, scale=1.0):
    """Uniform values with |x| >= gap."""
    mag = rng.uniform(gap, scale, shape)
    return mag * rng.choice([-1.0, 1.0], shape)


def _probe(out: Tensor, w: np.ndarray) -> Tensor:
    return ag.total(out * Tensor(w))


def _unary(op, gen=None):
    def case(rng):
        x = _param(gen(rng) if gen else rng.normal(size=(3, 4)))
        w = rng.normal(size=op(Tensor(x.data)).shape)
        return (lambda: _probe(op(x), w)), [x]

    return case


def _distinct(rng, shape):
    """Entries spaced at least 0.05 apart so max picks a stable winner."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.05 + rng.uniform(0, 0.01, n)).reshape(shape)


def _binary(op, shape_a=(3, 4), shape_b=(3, 4)):
    def case(rng):
        a, b = _param(rng.normal(size=shape_a), "a"), _param(rng.normal(size=shape_b), "b")
        w = rng.normal(size=np.broadcast_shapes(shape_a, shape_b))
        return (lambda: _probe(op(a, b), w)), [a, b]

    return case


def _matmul(rng):
    a, b = _param(rng.normal(size=(3, 4)), "a"), _param(rng.normal(size=(4, 2)), "b")
    w = rng.normal(size=(3, 2))
    return (lambda: _probe(ag.matmul(a, b), w)), [a, b]


def _where(rng):
    a, b = _param(rng.normal(size=(3, 4)), "a"), _param(rng.normal(size=(3, 4)), "b")
    mask = rng.random((3, 4)) < 0.5
    w = rng.normal(size=(3, 4))
    return (lambda: _probe(ag.where(mask, a, b), w)), [a, b]


def _concat(rng):
    a, b = _param(rng.normal(size=(3, 2)), "a"), _param(rng.normal(size=(3, 3)), "b")
    w = rng.normal(size=(3, 5))
    return (lambda: _probe(ag.concat([a, b], axis=1), w)), [a, b]


def _columns(rng):
    x = _param(rng.normal(size=(3, 5)))
    w = rng.normal(size=(3, 2))
    return (lambda: _probe(ag.columns(x, 1, 3), w)), [x]


def _reshape(rng):
    x = _param(rng.normal(size=(3, 4)))
    w = rng.normal(size=(2, 6))
    return (lambda: _probe(ag.reshape(x, (2, 6)), w)), [x]


def _reduce(op):
    def case(rng):
        x = _param(rng.normal(size=(3, 4)))
        return (lambda: op(x * x)), [x]

    return case


def _pool(mode):
    def case(rng):
        x = _param(_distinct(rng, (5, 3)))
        w = rng.normal(size=3)
        return (lambda: _probe(ag.pool(x, mode, axis=0), w)), [x]

    return case


def _group_pool(mode):
    def case(rng):
        x = _param(_distinct(rng, (6, 3)))
        index = np.array([[0, 2, 5, 0], [1, 1, 1, 1], [SENTINEL] * 4, [3, 4, 2, 3]])
        w = rng.normal(size=(4, 3))
        return (lambda: _probe(ag.group_pool(x, index, mode), w)), [x]

    return case


def _segment_mean(rng):
    x = _param(rng.normal(size=(6, 2)))
    seg = np.array([0, 2, 1, 0, 2, 2])
    w = rng.normal(size=(3, 2))
    return (lambda: _probe(ag.segment_mean(x, seg, 3), w)), [x]


def _scatter(rng):
    x = _param(rng.normal(size=(3, 2)))
    w = rng.normal(size=(5, 2))
    return (lambda: _probe(ag.scatter_rows(x, np.array([4, 0, 2]), 5), w)), [x]


def _take(rng):
    x = _param(rng.normal(size=(4, 2)))
    w = rng.normal(size=(5, 2))
    return (lambda: _probe(ag.take_rows(x, np.array([3, 0, 3, 1, 0])), w)), [x]


def _linear(rng):
    layer = Linear(4, 3, rng)
    x = _param(rng.normal(size=(5, 4)))
    w = rng.normal(size=(5, 3))
    return (lambda: _probe(layer(x), w)), [x] + layer.parameters()


def _mlp(rng):
    mlp = MLP((4, 6, 3), rng)
    x = _param(rng.normal(size=(5, 4)))
    w = rng.normal(size=(5, 3))
    return (lambda: _probe(mlp(x), w)), [x] + mlp.parameters()


def _smooth_l1(rng):
    # errors in (0.1, 0.9) or (1.1, 2) so no sample sits on a kink
    mag = np.where(rng.random((4, 3)) < 0.5, rng.uniform(0.1, 0.9, (4, 3)), rng.uniform(1.1, 2.0, (4, 3)))
    target = rng.normal(size=(4, 3))
    pred = _param(target + mag * rng.choice([-1.0, 1.0], (4, 3)))
    return (lambda: smooth_l1(pred, target)), [pred]


def _bce(rng):
    x = _param(rng.normal(size=6) * 2)
    y = (rng.random(6) < 0.5).astype(float)
    return (lambda: bce(x, y)), [x]


def _roi_head(rng):
    """Keypoint table -> RoI max pool -> gated fusion -> refinement -> losses."""
    m, d_kp, c, d_m = 10, 3, 2, 3
    positions = np.column_stack([rng.uniform(0, 4, m), rng.uniform(-1, 1, m), rng.uniform(-0.5, 0.5, m)])
    f_kp = _param(_distinct(rng, (m, d_kp)), "f_kp")
    raw = _param(_distinct(rng, (m, c)), "raw")
    pse = _param(_distinct(rng, (m, c)), "pse")
    table = KeypointFeatureTable(positions, f_kp, [("point", "raw", raw), ("point", "pse", pse)], np.zeros(m, bool))
    boxes = np.array([[1.0, 0, 0, 2.5, 2.5, 1.2, 0.1], [3.0, 0, 0, 2.5, 2.5, 1.2, -0.2]])
    proj_raw = Linear(d_kp + c, d_m, rng, "proj_raw")
    proj_pse = Linear(d_kp + c, d_m, rng, "proj_pse")
    fc = Linear(2 * d_m, 2 * d_m, rng, "fc")
    head = MLP((2 * d_m, 4, 8), rng, "head")
    target = rng.normal(size=(2, 7))
    labels = np.array([1.0, 0.0])
    members = roi_members(boxes, positions)

    def fn():
        fr = pool_roi_features(boxes, table, "raw", proj_raw, members)
        fp = pool_roi_features(boxes, table, "pse", proj_pse, members)
        ref = refine_boxes(caaf_fuse(fr, fp, fc).fused, boxes, head)
        return bce(ref.logits, labels) + smooth_l1(ref.residuals, target)

    params = [f_kp, raw, pse] + proj_raw.parameters() + proj_pse.parameters() + fc.parameters() + head.parameters()
    return fn, params


CASES: dict[str, Case] = {
    "add": _binary(lambda a, b: a + b, (3, 4), (4,)),
    "sub": _binary(lambda a, b: a - b),
    "mul": _binary(lambda a, b: a * b, (3, 4), (1, 4)),
    "neg": _unary(ag.neg),
    "matmul": _matmul,
    "transpose": _unary(ag.transpose),
    "reshape": _reshape,
    "relu": _unary(ag.relu, lambda r: _away(r, (3, 4))),
    "sigmoid": _unary(ag.sigmoid),
    "softplus": _unary(ag.softplus),
    "exp": _unary(ag.exp),
    "abs": _unary(ag.absolute, lambda r: _away(r, (3, 4))),
    "where": _where,
    "concat": _concat,
    "columns": _columns,
    "total": _reduce(ag.total),
    "mean": _reduce(ag.mean),
    "pool_max": _pool("max"),
    "pool_avg": _pool("avg"),
    "group_pool_max": _group_pool("max"),
    "group_pool_avg": _group_pool("avg"),
    "segment_mean": _segment_mean,
    "scatter_rows": _scatter,
    "take_rows": _take,
    "linear": _linear,
    "mlp": _mlp,
    "smooth_l1": _smooth_l1,
    "bce": _bce,
    "roi_head": _roi_head,
}


def run_suite(draws: int = 50, seed: int = 0, h: float = 1e-5, cases: dict[str, Case] | None = None) -> dict[str, float]:
    """Worst relative error per case over ``draws`` random parameter draws."""
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for name, case in (cases or CASES).items():
        err = 0.0
        for _ in range(draws):
            fn, params = case(rng)
            err = max(err, ag.gradcheck(fn, params, h))
        worst[name] = err
    return worst
