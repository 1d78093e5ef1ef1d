"""Command-line entry point: ``splatloc <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .. import _accel
from ..config import load_config
from ..geom import CameraIntrinsics, Pose

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(sub=False):
    # global flags may go before or after the subcommand; the subcommand copy must
    # not reset values given before it, hence SUPPRESS defaults there
    d = (lambda v: argparse.SUPPRESS) if sub else (lambda v: v)
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=d(None),
                   help="JSON or TOML config with scene/train/refine/localize/benchmark sections")
    p.add_argument("--seed", type=int, default=d(None), help="master seed (overrides config seeds)")
    p.add_argument("--threads", type=int, default=d(None), help="kernel threads / benchmark workers")
    p.add_argument("--out", default=d("."), help="output directory (default: current directory)")
    p.add_argument("--timing", action="store_true", default=d(False),
                   help="record wall-clock timings (outputs are then no longer byte-reproducible)")
    return p


def build_parser():
    parser = _Parser(prog="splatloc", description=__doc__.splitlines()[0], parents=[_common()])
    common = _common(sub=True)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("synth-scene", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--queries", type=int, default=10, help="held-out query views to render")

    p = sub.add_parser("build-map", parents=[common], help="train a Gaussian map from a dataset directory")
    p.add_argument("--data", required=True, help="dataset directory (images/, poses.json, intrinsics.json)")
    p.add_argument("--points", help="initial colored point cloud (default: <data>/points.ply)")
    p.add_argument("--iterations", type=int, help="override train.iterations")
    p.add_argument("--oracle-map", help="reference map used as depth estimator for pseudo views")

    p = sub.add_parser("render", parents=[common], help="render color/depth/occupancy images")
    p.add_argument("--map", required=True)
    p.add_argument("--pose", required=True, help='pose JSON file ({"q": [w,x,y,z], "t": [x,y,z]})')
    p.add_argument("--intrinsics", required=True)

    p = sub.add_parser("refine-pose", parents=[common], help="refine an initial pose against a map")
    p.add_argument("--map", required=True)
    p.add_argument("--query", required=True, help="query PNG")
    p.add_argument("--intrinsics", required=True)
    p.add_argument("--init-pose", required=True)
    p.add_argument("--query-depth", help="optional float32 depth image")

    p = sub.add_parser("localize", parents=[common], help="localize a query image from scratch")
    p.add_argument("--map", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--database", required=True, help="dataset directory of posed database images")
    p.add_argument("--query-depth")

    p = sub.add_parser("benchmark", parents=[common], help="score refinement or full localization")
    p.add_argument("--map", required=True)
    p.add_argument("--data", required=True, help="dataset directory holding a queries/ subdirectory")
    p.add_argument("--mode", choices=("refine", "full"), help="override benchmark.mode")
    p.add_argument("--perturbation", help="delta_s or delta_m (refine mode)")
    p.add_argument("--max-queries", type=int)
    return parser


# ---------------------------------------------------------------- helpers

def _section(cfg, name):
    return dict(cfg.get(name, {}))


def _read_json(path, what):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return json.loads(p.read_text())


def _refine_config(cfg):
    from ..localize.refine import RefineConfig

    return RefineConfig.from_dict(_section(cfg, "refine"))


def _localize_config(cfg):
    from ..localize.pipeline import LocalizeConfig

    return LocalizeConfig.from_dict(_section(cfg, "localize"))


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- subcommands

def cmd_synth_scene(args, cfg, out):
    from ..mapping import save_dataset
    from ..splat import save_map, save_point_cloud
    from .scene import SceneSpec, export_point_cloud, held_out_poses, render_view, synth_scene

    sc = _section(cfg, "scene")
    if args.seed is not None:
        sc["seed"] = args.seed
    spec = SceneSpec.from_dict(sc)
    gt, views = synth_scene(spec)
    save_dataset(out, views)
    save_map(gt, out / "gt_map.ply")
    save_point_cloud(export_point_cloud(gt, seed=spec.seed), out / "points.ply")
    K = spec.intrinsics()
    queries = [render_view(gt, p, K, f"query_{i:03d}", spec.min_occupancy)
               for i, p in enumerate(held_out_poses(spec, args.queries))]
    if queries:
        save_dataset(out / "queries", queries)
    _write_json(out / "scene.json", spec.to_dict())
    print(f"wrote {len(views)} views and {len(queries)} queries to {out}")


def cmd_build_map(args, cfg, out):
    from ..mapping import OracleDepthEstimator, TrainConfig, load_dataset, train_map, write_train_log
    from ..splat import init_from_points, load_map, load_point_cloud, save_map

    views = load_dataset(args.data)
    tc = _section(cfg, "train")
    if args.seed is not None:
        tc["seed"] = args.seed
    if args.iterations is not None:
        tc["iterations"] = args.iterations
    config = TrainConfig.from_dict(tc)
    points = Path(args.points) if args.points else Path(args.data) / "points.ply"
    if not points.exists():
        raise FileNotFoundError(f"initial point cloud not found: {points} (pass --points)")
    init = init_from_points(load_point_cloud(points), [v.pose for v in views])
    estimator = OracleDepthEstimator(load_map(args.oracle_map)) if args.oracle_map else None
    rows = []
    gmap = train_map(views, init, estimator, config, rows)
    save_map(gmap, out / "map.ply")
    write_train_log(out / "train_log.csv", rows)
    print(f"trained {len(gmap)} primitives in {config.iterations} iterations -> {out / 'map.ply'}")


def cmd_render(args, cfg, out):
    from ..images import save_float_image, save_png
    from ..render import rasterize
    from ..splat import load_map

    gmap = load_map(args.map)
    pose = Pose.from_dict(_read_json(args.pose, "pose file"))
    K = CameraIntrinsics.from_dict(_read_json(args.intrinsics, "intrinsics file"))
    r = rasterize(gmap, pose, K)
    save_png(out / "color.png", np.clip(r.color, 0, 1))
    save_float_image(out / "depth.f32", r.depth)
    save_float_image(out / "occupancy.f32", r.occupancy)
    print(f"rendered {K.width}x{K.height} -> {out}")


def _load_query(path, depth_path):
    from ..images import load_float_image, load_png

    if not Path(path).exists():
        raise FileNotFoundError(f"query image not found: {path}")
    depth = load_float_image(depth_path) if depth_path else None
    return load_png(path), depth


def cmd_refine_pose(args, cfg, out):
    from ..localize.refine import refine_pose
    from ..splat import load_map

    gmap = load_map(args.map)
    K = CameraIntrinsics.from_dict(_read_json(args.intrinsics, "intrinsics file"))
    T0 = Pose.from_dict(_read_json(args.init_pose, "initial pose file"))
    image, depth = _load_query(args.query, args.query_depth)
    pose, diag = refine_pose(image, gmap, T0, K, _refine_config(cfg), depth)
    rec = {"coarse_pose": T0.to_dict(), "fine_pose": pose.to_dict(), "iterations": diag.iterations,
           "final_objective": diag.final_objective, "masked_pixel_count": diag.masked_pixel_count,
           "stop_reason": diag.stop_reason, "a": diag.a, "b": diag.b, "timing_ms": None}
    _write_json(out / "refine.json", rec)
    print(json.dumps(rec["fine_pose"]))


def cmd_localize(args, cfg, out):
    from ..localize.pipeline import build_database
    from ..mapping import load_dataset
    from ..splat import load_map

    gmap = load_map(args.map)
    db_views = load_dataset(args.database)
    K = db_views[0].intrinsics
    loc = _localize_config(cfg)
    image, depth = _load_query(args.query, args.query_depth)
    from ..localize.pipeline import localize

    db = build_database(gmap, db_views, loc)
    _, info = localize(image, gmap, db, K, loc, _refine_config(cfg), depth,
                       seed=0 if args.seed is None else args.seed)
    rec = info.to_record(timing=args.timing)
    _write_json(out / "localize.json", rec)
    print(json.dumps(rec["fine_pose"]))


def cmd_benchmark(args, cfg, out):
    from ..localize.pipeline import build_database
    from ..mapping import load_dataset
    from ..splat import load_map
    from .bench import PERTURBATIONS, PerturbationSpec, Query, run_benchmark

    gmap = load_map(args.map)
    bc = _section(cfg, "benchmark")
    mode = args.mode or bc.pop("mode", "refine")
    bc.pop("mode", None)
    pert = args.perturbation or bc.pop("perturbation", "delta_s")
    bc.pop("perturbation", None)
    if isinstance(pert, dict):
        pert = PerturbationSpec(tuple(pert["translation"]), tuple(pert["rotation_deg"]))
    elif pert in PERTURBATIONS:
        pert = PERTURBATIONS[pert]
    else:
        raise UsageError(f"--perturbation must be one of {', '.join(PERTURBATIONS)}")
    thr = bc.pop("thresholds", None)
    use_depth = bool(bc.pop("use_depth", False))
    max_q = args.max_queries if args.max_queries is not None else bc.pop("max_queries", None)
    bc.pop("max_queries", None)
    if bc:
        raise ValueError(f"unknown benchmark option(s): {', '.join(sorted(bc))}")
    qdir = Path(args.data) / "queries"
    if not qdir.exists():
        raise FileNotFoundError(f"{args.data}: no queries/ directory")
    qviews = load_dataset(qdir)
    if max_q is not None:
        qviews = qviews[:max_q]
    queries = [Query(v.name, v.image, v.pose, v.gt_depth) for v in qviews]
    K = qviews[0].intrinsics
    loc = _localize_config(cfg)
    db = build_database(gmap, load_dataset(args.data), loc) if mode == "full" else None
    if thr is not None:
        thr = (float(thr[0]) * gmap.scene_scale, float(thr[1]))
    report = run_benchmark(gmap, queries, K, mode, thr, _refine_config(cfg), pert, db, loc,
                           seed=0 if args.seed is None else args.seed,
                           workers=args.threads or 1, use_depth=use_depth)
    report.write(out, timing=args.timing)
    print(f"success_rate {report.success_rate:.3f} over {len(queries)} queries -> {out / 'report.json'}")


COMMANDS = {
    "synth-scene": cmd_synth_scene, "build-map": cmd_build_map, "render": cmd_render,
    "refine-pose": cmd_refine_pose, "localize": cmd_localize, "benchmark": cmd_benchmark,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    try:
        cfg = load_config(args.config)
        if args.threads is not None:
            if args.threads < 1:
                raise UsageError("--threads must be >= 1")
            _accel.set_num_threads(args.threads)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, cfg, out)
    except UsageError as e:
        print(f"splatloc: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        print(f"splatloc: {args.command} failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
