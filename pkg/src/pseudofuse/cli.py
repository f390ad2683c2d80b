"""Command line entry point: ``pseudofuse <subcommand> --config C --seed S --out DIR``.

Every subcommand builds the synthetic scene from the config and seed, runs
its stage and writes ``metrics.json`` into ``--out``.  Failures exit with
status 2 and a ``[stage] cause`` message on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .autograd import save_parameters
from .calib import project_points, rasterize_depth
from .config import PipelineConfig, dump_config, load_config
from .depth import complete_depth, dump_depth_ascii, save_depth
from .gradsuite import run_suite
from .losses import write_loss_csv
from .pipeline import DetectorModel, StageError, StageTimer, forward, metrics_record, overfit_test, prepare_scene
from .points import build_pseudo_cloud, save_points
from .scene import export_scene, generate_scene


def write_json(path: Path, data) -> None:
    """Stable JSON: sorted keys, fixed indent, trailing newline."""
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _scene(cfg: PipelineConfig):
    try:
        return generate_scene(cfg.scene, cfg.seed)
    except (ValueError, RuntimeError) as exc:
        raise StageError("scene", str(exc)) from exc


def _sparse(cfg, scene):
    proj = project_points(scene.raw_cloud.points, scene.calib)
    return proj, rasterize_depth(proj.uvd, scene.calib.width, scene.calib.height)


def cmd_gen_scene(cfg, out: Path) -> dict:
    scene = _scene(cfg)
    files = export_scene(scene, out)
    return {"stage": "gen-scene", "seed": cfg.seed, "boxes": len(scene.boxes),
            "raw_points": len(scene.raw_cloud.points), "files": sorted(Path(f).name for f in files.values())}


def cmd_project(cfg, out: Path) -> dict:
    scene = _scene(cfg)
    with StageTimer().stage("project"):
        proj, sparse = _sparse(cfg, scene)
    save_depth(out / "sparse.dpt", sparse.depth)
    return {"stage": "project", "seed": cfg.seed, "raw_points": len(scene.raw_cloud.points),
            "projected_points": len(proj.index), "sparse_valid": sparse.valid_count}


def cmd_complete(cfg, out: Path) -> dict:
    scene = _scene(cfg)
    timer = StageTimer()
    with timer.stage("project"):
        _, sparse = _sparse(cfg, scene)
    with timer.stage("complete"):
        dense = complete_depth(scene.image, sparse, kernel=cfg.dilation_kernel)
    save_depth(out / "dense.dpt", dense.depth)
    dump_depth_ascii(out / "dense.pgm", dense.depth)
    err = np.abs(dense.depth - scene.gt_depth.depth)
    return {"stage": "complete", "seed": cfg.seed, "sparse_valid": sparse.valid_count,
            "abs_error_mean": float(err.mean()), "abs_error_median": float(np.median(err))}


def cmd_pseudo(cfg, out: Path) -> dict:
    scene = _scene(cfg)
    timer = StageTimer()
    with timer.stage("project"):
        _, sparse = _sparse(cfg, scene)
    with timer.stage("complete"):
        dense = complete_depth(scene.image, sparse, kernel=cfg.dilation_kernel)
    with timer.stage("pseudo"):
        cloud = build_pseudo_cloud(scene.image, dense, scene.calib, cfg.stride)
    save_points(out / "pseudo.bin", cloud.features())
    dist = scene.surface_distance(cloud.xyz)
    return {"stage": "pseudo", "seed": cfg.seed, "pseudo_points": len(cloud.xyz),
            "surface_error_median": float(np.median(dist)), "surface_error_max": float(dist.max())}


def cmd_pipeline(cfg, out: Path) -> dict:
    scene = _scene(cfg)
    timer = StageTimer()
    prep = prepare_scene(cfg, scene, timer)
    with timer.stage("model"):
        model = DetectorModel(cfg)
    result = forward(model, prep, timer=timer)
    record = metrics_record(cfg, prep, result)
    write_loss_csv(out / "losses.csv", [result.breakdown])
    write_json(out / "timings.json", dict(sorted(timer.seconds.items())))
    save_parameters(out / "params.ckpt", model.named_parameters())
    return record


def cmd_overfit(cfg, out: Path) -> dict:
    scene = _scene(cfg)
    start = time.perf_counter()
    res = overfit_test(cfg, scene)
    write_loss_csv(out / "losses.csv", res.trajectory)
    write_json(out / "timings.json", {"overfit": time.perf_counter() - start})
    save_parameters(out / "params.ckpt", res.model.named_parameters())
    return dict(res.record, gt_confidence=res.gt_confidence)


def cmd_gradcheck(cfg, out: Path, draws: int, tol: float) -> dict:
    worst = run_suite(draws, seed=cfg.seed)
    failed = sorted(k for k, v in worst.items() if not v < tol)
    record = {"stage": "gradcheck", "seed": cfg.seed, "draws": draws, "tolerance": tol,
              "worst_relative_error": worst, "failed": failed}
    if failed:
        write_json(out / "metrics.json", record)
        raise StageError("gradcheck", f"relative error above {tol} for {', '.join(failed)}")
    return record


COMMANDS = {
    "gen-scene": cmd_gen_scene,
    "project": cmd_project,
    "complete": cmd_complete,
    "pseudo": cmd_pseudo,
    "pipeline": cmd_pipeline,
    "overfit": cmd_overfit,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pseudofuse", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="key: value config file (defaults if omitted)")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        if name == "overfit":
            p.add_argument("--steps", type=int, help="overrides the config step count")
        if name == "gradcheck":
            p.add_argument("--draws", type=int, default=50)
            p.add_argument("--tol", type=float, default=1e-4)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        try:
            cfg = load_config(args.config) if args.config else PipelineConfig()
            if args.seed is not None:
                cfg = replace(cfg, seed=args.seed)
            if getattr(args, "steps", None) is not None:
                cfg = replace(cfg, steps=args.steps)
        except (OSError, ValueError) as exc:
            raise StageError("config", str(exc)) from exc
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "config.txt").write_text(dump_config(cfg))
        extra = (args.draws, args.tol) if args.command == "gradcheck" else ()
        record = COMMANDS[args.command](cfg, args.out, *extra)
        write_json(args.out / "metrics.json", record)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps({"command": args.command, "out": str(args.out)}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
