"""End-to-end orchestration: geometry preparation, the detector forward pass,
losses, metrics records and the single-scene overfit loop."""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Linear, MLP, Tensor
from .boxes import encode_residuals, match_by_center
from .caaf import Proposals, caaf_fuse, jittered_boxes, pool_roi_features, propose_rois, refine_boxes, roi_members
from .calib import project_points, rasterize_depth
from .config import PipelineConfig
from .depth import complete_depth
from .losses import LossBreakdown, bce, compose_total, smooth_l1, weighted_total
from .points import (
    KeypointSet,
    PseudoPointCloud,
    RawPointCloud,
    build_pseudo_cloud,
    farthest_point_sample,
    voxelize,
)
from .prconv import (
    KeypointQueries,
    aggregate_keypoint_features,
    build_hierarchy,
    empty_bev,
    flatten_to_bev,
    hierarchy_structure,
    make_branch_layers,
    pre_mlp_layout,
    query_keypoints,
)
from .scene import SyntheticScene

RAW_POINT_WIDTH = 4
PSE_POINT_WIDTH = 8


class StageError(RuntimeError):
    """A pipeline stage violated its contract."""

    def __init__(self, stage: str, cause: str):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


class StageTimer:
    def __init__(self):
        self.seconds: dict[str, float] = {}

    @contextmanager
    def stage(self, name: str):
        start = time.perf_counter()
        try:
            yield
        except StageError:
            raise
        except (ValueError, RuntimeError, IndexError) as exc:
            raise StageError(name, str(exc)) from exc
        finally:
            self.seconds[name] = self.seconds.get(name, 0.0) + time.perf_counter() - start


# model ----------------------------------------------------------------------


def uses_pseudo_conv(cfg: PipelineConfig) -> bool:
    return cfg.pseudo and cfg.prconv


def model_layout(cfg: PipelineConfig) -> list[tuple[str, str, int]]:
    pse_point = PSE_POINT_WIDTH if cfg.pseudo else None
    pse_levels = cfg.level_widths if uses_pseudo_conv(cfg) else None
    return pre_mlp_layout(cfg.sources, RAW_POINT_WIDTH, pse_point, cfg.level_widths, pse_levels)


class DetectorModel:
    """Every learnable piece of the detector, built from one seed."""

    def __init__(self, cfg: PipelineConfig):
        rng = np.random.default_rng(cfg.seed)
        self.layout = model_layout(cfg)
        self.pre_mlp_width = sum(w for _, _, w in self.layout)
        d_kp = cfg.kp_widths[-1]
        self.raw_layers = make_branch_layers(RAW_POINT_WIDTH, cfg.level_widths, rng, "raw")
        self.pse_layers = make_branch_layers(PSE_POINT_WIDTH, cfg.level_widths, rng, "pse") if uses_pseudo_conv(cfg) else None
        self.kp_mlp = MLP((self.pre_mlp_width,) + tuple(cfg.kp_widths), rng, "kp_mlp")
        raw_view = d_kp + sum(w for _, sp, w in self.layout if sp == "raw")
        pse_view = d_kp + sum(w for _, sp, w in self.layout if sp == "pse")
        self.proj_raw = Linear(raw_view, cfg.d_m, rng, "proj_raw")
        self.proj_pse = Linear(pse_view, cfg.d_m, rng, "proj_pse")
        self.fusion_fc = Linear(2 * cfg.d_m, 2 * cfg.d_m, rng, "fusion_fc") if cfg.caaf else None
        self.refine_head = MLP((2 * cfg.d_m, cfg.head_hidden, 8), rng, "refine")
        self.aux_raw = MLP((cfg.d_m, cfg.head_hidden, 8), rng, "aux_raw")
        self.aux_pse = MLP((cfg.d_m, cfg.head_hidden, 8), rng, "aux_pse")
        bev_channels = self.bev_slots(cfg) * cfg.level_widths[-1]
        self.rpn_head = Linear(bev_channels, 8, rng, "rpn")

    @staticmethod
    def bev_slots(cfg: PipelineConfig) -> int:
        top = np.asarray(cfg.voxel_size) * 8.0
        span = np.asarray(cfg.range_max) - np.asarray(cfg.range_min)
        return int(np.ceil(span[2] / top[2] - 1e-9))

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        groups: list[tuple[str, list[Linear]]] = [("raw", self.raw_layers)]
        if self.pse_layers is not None:
            groups.append(("pse", self.pse_layers))
        groups += [
            ("kp_mlp", self.kp_mlp.layers),
            ("proj_raw", [self.proj_raw]),
            ("proj_pse", [self.proj_pse]),
        ]
        if self.fusion_fc is not None:
            groups.append(("fusion_fc", [self.fusion_fc]))
        groups += [
            ("refine", self.refine_head.layers),
            ("aux_raw", self.aux_raw.layers),
            ("aux_pse", self.aux_pse.layers),
            ("rpn", [self.rpn_head]),
        ]
        out = []
        for prefix, layers in groups:
            for i, layer in enumerate(layers):
                out.append((f"{prefix}.{i}.weight", layer.weight))
                out.append((f"{prefix}.{i}.bias", layer.bias))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


# geometry -------------------------------------------------------------------


@dataclass
class PreparedScene:
    """Everything that does not depend on learnable parameters."""

    cfg: PipelineConfig
    scene: SyntheticScene
    counts: dict = field(default_factory=dict)
    raw: RawPointCloud | None = None
    pseudo: PseudoPointCloud | None = None
    raw_structure: list | None = None
    pse_structure: list | None = None
    keypoints: KeypointSet | None = None
    queries: KeypointQueries | None = None
    notes: list[str] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return self.keypoints is None


def _crop(xyz: np.ndarray, cfg: PipelineConfig) -> np.ndarray:
    return np.all((xyz >= np.asarray(cfg.range_min)) & (xyz < np.asarray(cfg.range_max)), axis=1)


def _pseudo_xyz(prep: PreparedScene) -> np.ndarray | None:
    if not prep.cfg.pseudo:
        return None
    return prep.pseudo.xyz if prep.pseudo is not None else np.zeros((0, 3))


def prepare_scene(cfg: PipelineConfig, scene: SyntheticScene, timer: StageTimer | None = None) -> PreparedScene:
    timer = timer or StageTimer()
    prep = PreparedScene(cfg, scene)
    c = prep.counts
    c["raw_points"] = len(scene.raw_cloud)
    c["gt_boxes"] = len(scene.boxes)

    pseudo = None
    if cfg.pseudo:
        with timer.stage("project"):
            proj = project_points(scene.raw_cloud.points, scene.calib)
            sparse = rasterize_depth(proj.uvd, scene.calib.width, scene.calib.height)
        c["projected_points"] = len(proj)
        c["sparse_valid"] = sparse.valid_count
        if sparse.valid_count == 0:
            prep.notes.append("no LiDAR point lands in the image; pseudo branch skipped")
        else:
            with timer.stage("complete"):
                dense = complete_depth(scene.image, sparse, kernel=cfg.dilation_kernel)
            with timer.stage("pseudo"):
                pseudo = build_pseudo_cloud(scene.image, dense, scene.calib, cfg.stride)
            c["pseudo_points"] = len(pseudo)

    with timer.stage("crop"):
        raw = scene.raw_cloud.subset(_crop(scene.raw_cloud.points, cfg))
        if pseudo is not None:
            pseudo = pseudo.subset(_crop(pseudo.xyz, cfg))
    c["raw_in_range"] = len(raw)
    c["pseudo_in_range"] = 0 if pseudo is None else len(pseudo)
    prep.raw = raw
    prep.pseudo = pseudo if pseudo is not None and len(pseudo) else None
    if len(raw) == 0:
        prep.notes.append("no raw points in range")
        c["keypoints"] = 0
        return prep

    with timer.stage("voxelize"):
        raw_grid = voxelize(raw.features(), cfg.voxel_size, cfg.range_min, cfg.range_max)
        prep.raw_structure = hierarchy_structure(raw_grid)
        if uses_pseudo_conv(cfg) and prep.pseudo is not None:
            pse_grid = voxelize(prep.pseudo.features(), cfg.voxel_size, cfg.range_min, cfg.range_max)
            prep.pse_structure = hierarchy_structure(pse_grid)
    c["raw_voxels"] = [len(g) for g, _ in prep.raw_structure]
    c["pse_voxels"] = [len(g) for g, _ in prep.pse_structure] if prep.pse_structure else []

    with timer.stage("fps"):
        space = raw.points
        if cfg.fps_space == "union" and prep.pseudo is not None:
            space = np.concatenate([raw.points, prep.pseudo.xyz])
        prep.keypoints = farthest_point_sample(space, cfg.keypoint_count, 0)
    c["keypoints"] = len(prep.keypoints)

    with timer.stage("query"):
        prep.queries = query_keypoints(
            prep.keypoints.positions,
            raw.points,
            _pseudo_xyz(prep),
            prep.raw_structure,
            prep.pse_structure,
            cfg.radii,
            cfg.max_neighbors,
        )
    return prep


# forward --------------------------------------------------------------------


@dataclass
class ForwardResult:
    losses: dict[str, Tensor]
    total: Tensor
    breakdown: LossBreakdown
    proposals: Proposals
    rois: np.ndarray
    roi_is_gt: np.ndarray
    confidence: np.ndarray
    refined: np.ndarray
    pre_mlp_width: int
    slice_widths: list
    fused_width: int
    gates: tuple[np.ndarray, np.ndarray] | None


def _zero() -> Tensor:
    return Tensor(0.0)


def branch_loss(output: Tensor, rois: np.ndarray, gt: np.ndarray, match: np.ndarray, delta: float) -> Tensor:
    """Box regression on matched rows plus confidence over every row."""
    if output.shape[0] == 0:
        return _zero()
    labels = (match >= 0).astype(np.float64)
    logits = ag.reshape(ag.columns(output, 7, 8), (output.shape[0],))
    loss = bce(logits, labels)
    fg = np.flatnonzero(match >= 0)
    if len(fg):
        target = encode_residuals(rois[fg], gt[match[fg]])
        loss = loss + smooth_l1(ag.take_rows(ag.columns(output, 0, 7), fg), target, delta)
    return loss


def forward(model: DetectorModel, prep: PreparedScene, proposals: Proposals | None = None, timer: StageTimer | None = None) -> ForwardResult:
    cfg = prep.cfg
    timer = timer or StageTimer()
    layout = model.layout
    if prep.empty:
        zero = _zero()
        losses = {k: zero for k in ("l_rpn", "l_ref", "l_depth", "l_as1", "l_as2")}
        none = np.zeros((0, 7))
        return ForwardResult(
            losses, weighted_total(*losses.values(), cfg.alpha, cfg.beta),
            compose_total(0.0, 0.0, 0.0, 0.0, 0.0, cfg.alpha, cfg.beta),
            Proposals(none, np.zeros(0), np.zeros((0, 2), np.int64)), none, np.zeros(0, bool),
            np.zeros(0), none, model.pre_mlp_width, layout, 2 * cfg.d_m, None,
        )

    with timer.stage("hierarchy"):
        raw_hier = build_hierarchy(prep.raw_structure[0][0], model.raw_layers, prep.raw_structure)
        pse_hier = None
        if model.pse_layers is not None and prep.pse_structure is not None:
            pse_hier = build_hierarchy(prep.pse_structure[0][0], model.pse_layers, prep.pse_structure)
        elif model.pse_layers is not None:
            raise StageError("hierarchy", "pseudo branch enabled but no pseudo points in range")

    with timer.stage("aggregate"):
        pse_feats = None
        if cfg.pseudo:
            pse_feats = prep.pseudo.features() if prep.pseudo is not None else np.zeros((0, PSE_POINT_WIDTH))
        table = aggregate_keypoint_features(
            prep.keypoints.positions, prep.queries, raw_hier, pse_hier,
            prep.raw.features(), pse_feats, model.kp_mlp, cfg.pool_mode, cfg.sources,
        )
        widths = table.slice_widths
        if widths != layout:
            raise StageError("aggregate", f"slice layout {widths} differs from model layout {layout}")

    with timer.stage("proposals"):
        bev = flatten_to_bev(raw_hier)
        if proposals is None:
            proposals = propose_rois(bev, cfg.top_n, cfg.nominal_size, cfg.roi_center_z)
        gt = prep.scene.boxes
        if len(proposals):
            cell_rows = proposals.cells[:, 0] * bev.ny + proposals.cells[:, 1]
            rpn_out = model.rpn_head(ag.take_rows(bev.features, cell_rows))
            l_rpn = branch_loss(rpn_out, proposals.boxes, gt, match_by_center(proposals.boxes, gt, cfg.match_scale), cfg.smooth_l1_delta)
        else:
            l_rpn = _zero()
        rois = proposals.boxes
        is_gt = np.zeros(len(rois), dtype=bool)
        if cfg.gt_rois and len(gt):
            injected = jittered_boxes(gt, cfg.gt_roi_copies, np.random.default_rng(cfg.seed + 1))
            rois = np.concatenate([rois, injected])
            first = np.zeros(len(injected), dtype=bool)
            first[:: cfg.gt_roi_copies] = True
            is_gt = np.concatenate([is_gt, first])

    with timer.stage("roi_pool"):
        members = roi_members(rois, table.positions)
        f_raw = pool_roi_features(rois, table, "raw", model.proj_raw, members)
        f_pse = pool_roi_features(rois, table, "pse", model.proj_pse, members)

    with timer.stage("fusion"):
        gates = None
        if model.fusion_fc is not None:
            fusion = caaf_fuse(f_raw, f_pse, model.fusion_fc)
            fused = fusion.fused
            gates = (fusion.w_raw.data, fusion.w_pse.data)
        else:
            fused = ag.concat([f_raw, f_pse], axis=1)

    with timer.stage("refine"):
        ref = refine_boxes(fused, rois, model.refine_head)

    with timer.stage("losses"):
        match = match_by_center(rois, gt, cfg.match_scale)
        d = cfg.smooth_l1_delta
        losses = {
            "l_rpn": l_rpn,
            "l_ref": branch_loss(ref.output, rois, gt, match, d),
            "l_depth": _zero(),  # classical completer has nothing to learn
            "l_as1": branch_loss(model.aux_raw(f_raw), rois, gt, match, d) if len(rois) else _zero(),
            "l_as2": branch_loss(model.aux_pse(f_pse), rois, gt, match, d) if len(rois) else _zero(),
        }
        total = weighted_total(*losses.values(), cfg.alpha, cfg.beta)
        breakdown = compose_total(*losses.values(), cfg.alpha, cfg.beta)

    return ForwardResult(
        losses, total, breakdown, proposals, rois, is_gt, ref.confidence, ref.boxes,
        table.pre_mlp_width, widths, fused.shape[1], gates,
    )


# records ---------------------------------------------------------------------


def _clean(v):
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, np.ndarray):
        return _clean(v.tolist())
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    return v


def metrics_record(cfg: PipelineConfig, prep: PreparedScene, result: ForwardResult) -> dict:
    gt_conf = result.confidence[result.roi_is_gt] if len(result.confidence) else np.zeros(0)
    return _clean({
        "seed": cfg.seed,
        "ablation": {
            "table3_row": cfg.table3_row,
            "table4_row": cfg.table4_row,
            "pseudo": cfg.pseudo,
            "prconv": cfg.prconv,
            "caaf": cfg.caaf,
            "sources": list(cfg.sources),
            "fusion": "caaf" if cfg.caaf else "concat",
        },
        "counts": dict(prep.counts, proposals=len(result.proposals), rois=len(result.rois)),
        "pre_mlp_width": result.pre_mlp_width,
        "slice_widths": [list(s) for s in result.slice_widths],
        "fused_width": result.fused_width,
        "losses": result.breakdown.as_dict(),
        "gt_confidence_min": float(gt_conf.min()) if len(gt_conf) else None,
        "notes": list(prep.notes),
    })


def run_pipeline(cfg: PipelineConfig, scene: SyntheticScene, model: DetectorModel | None = None) -> tuple[dict, dict]:
    """One forward pass over ``scene``: returns the metrics record and per-stage seconds."""
    timer = StageTimer()
    prep = prepare_scene(cfg, scene, timer)
    with timer.stage("model"):
        model = model or DetectorModel(cfg)
    result = forward(model, prep, timer=timer)
    return metrics_record(cfg, prep, result), dict(timer.seconds)


# training --------------------------------------------------------------------


class Adam:
    def __init__(self, params, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mh = m / (1 - self.b1**self.t)
            vh = v / (1 - self.b2**self.t)
            p.data -= self.lr * mh / (np.sqrt(vh) + self.eps)


@dataclass
class OverfitResult:
    trajectory: list[LossBreakdown]
    gt_confidence: float | None
    model: DetectorModel
    record: dict


def overfit_test(cfg: PipelineConfig, scene: SyntheticScene, steps: int | None = None) -> OverfitResult:
    """Fixed-step gradient descent on the total loss of one scene.

    Proposals are taken from the initial parameters and then held fixed so the
    loss is optimised over a constant set of targets.  The trajectory holds
    the loss before every update plus the final loss (``steps + 1`` rows).
    """
    steps = cfg.steps if steps is None else steps
    if len(scene.boxes) == 0:
        raise StageError("overfit", "scene has no ground-truth boxes")
    prep = prepare_scene(cfg, scene)
    if prep.empty:
        raise StageError("overfit", "no raw points in range")
    model = DetectorModel(cfg)
    params = model.parameters()
    adam = Adam(params, cfg.lr) if cfg.optimizer == "adam" else None
    proposals = None
    trajectory: list[LossBreakdown] = []
    result = None
    for step in range(steps + 1):
        result = forward(model, prep, proposals)
        proposals = result.proposals
        trajectory.append(result.breakdown)
        if not np.isfinite(result.breakdown.total) or result.breakdown.total > cfg.divergence:
            raise StageError("overfit", f"diverged at step {step}: total={result.breakdown.total!r}")
        if step == steps:
            break
        grads = ag.gradients(result.total, params)
        if adam is not None:
            adam.step(grads)
        else:
            for p, g in zip(params, grads):
                p.data -= cfg.lr * g
    gt_conf = result.confidence[result.roi_is_gt]
    record = metrics_record(cfg, prep, result)
    record["initial_total"] = trajectory[0].total
    record["final_total"] = trajectory[-1].total
    record["steps"] = steps
    return OverfitResult(trajectory, float(gt_conf.min()) if len(gt_conf) else None, model, record)
