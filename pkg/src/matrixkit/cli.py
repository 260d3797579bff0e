"""Command-line entry point: ``matrixkit <command> ...``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
Failures print a single line ``error[<kind>]: <message>`` to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, InsufficientViewsError, MatrixKitError, NoOverlapError, SceneIOError

log = logging.getLogger("matrixkit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
METRIC_GROUPS = ("pose", "depth", "image", "pointcloud")
POSE_COLUMNS = ("RRA@15", "CA@0.1")
IMAGE_COLUMNS = ("PSNR", "SSIM")
CLOUD_COLUMNS = ("accuracy", "completeness", "overall")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        sys.stderr.write(f"error[usage]: {message}\n")
        sys.exit(EXIT_USAGE)


def set_threads(requested: int | None) -> int:
    """MATRIXKIT_THREADS overrides ``--threads``; the default is all logical cores."""
    import torch

    env = os.environ.get("MATRIXKIT_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError as exc:
            raise ConfigError(f"MATRIXKIT_THREADS must be an integer, got {env!r}") from exc
    else:
        n = requested or os.cpu_count() or 1
    if n < 1:
        raise ConfigError(f"thread count must be >= 1, got {n}")
    torch.set_num_threads(n)
    return n


def _scene_dirs(root: Path) -> list[Path]:
    """A scene package itself, or the sorted scene packages directly under it."""
    if (root / "meta.json").exists():
        return [root]
    if not root.is_dir():
        raise SceneIOError(root, "no such directory")
    dirs = sorted(p for p in root.iterdir() if (p / "meta.json").exists())
    if not dirs:
        raise SceneIOError(root, "contains no scene packages (meta.json)")
    return dirs


def _require_file(path: Path, what: str) -> Path:
    if not path.is_file():
        raise SceneIOError(path, f"{what} not found")
    return path


# -- gen-data -----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .config import load_config, write_config
    from .synthscene import generate_scene, write_scene

    cfg = load_config(args.config)
    if args.scenes < 1:
        raise ConfigError("--scenes must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(out / "config.json", cfg)
    for i in range(args.scenes):
        scene = generate_scene(
            args.seed + i,
            cfg.data.n_views,
            cfg.scene,
            cfg.camera,
            tuple(cfg.data.depth_resolution),
            cfg.data.normalize,
            cfg.data.depth_dropout,
        )
        write_scene(out / f"scene_{i:04d}", scene)
        log.info("wrote scene %d (seed %d)", i, args.seed + i)
    return EXIT_OK


# -- train --------------------------------------------------------------------


def cmd_train(args) -> int:
    import torch

    from .backbone import MultiViewDiT
    from .config import load_config, write_config
    from .diffusion import make_schedule, train
    from .synthscene import read_scene
    from .tasks import Pipeline

    cfg = load_config(args.config)
    scenes = [read_scene(d) for d in _scene_dirs(Path(args.data))]
    run = Path(args.out)
    (run / "checkpoints").mkdir(parents=True, exist_ok=True)
    write_config(run / "config.json", cfg)
    torch.manual_seed(cfg.train.seed)
    net = MultiViewDiT(cfg.model)
    schedule = make_schedule(cfg.schedule.T, cfg.schedule.kind)
    pipe = Pipeline(net, schedule, cfg.guidance, cfg.train.seed, cfg.camera.fov_deg)

    def checkpoint(step, _loss):
        if args.checkpoint_every and (step + 1) % args.checkpoint_every == 0:
            net.train_info = {"cond_drop": cfg.train.cond_drop, "steps": step + 1}
            pipe.save(run / "checkpoints" / f"step_{step + 1:06d}.ckpt")

    result = train(net, scenes, schedule, cfg.train, checkpoint)
    with open(run / "loss.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "task", "loss"])
        for step, value in enumerate(result.losses):
            w.writerow([step, "all", repr(value)])
        for step, task, value in result.task_losses():
            w.writerow([step, task, repr(value)])
    pipe.save(run / "model.ckpt")
    log.info("final loss %.5f", result.losses[-1] if result.losses else float("nan"))
    return EXIT_OK


# -- infer --------------------------------------------------------------------


def _blank_depth(pipe):
    from .depthmap import DepthMap

    dh, dw = pipe.config.resolutions["depth"]
    return DepthMap.invalid(dw, dh)


def cmd_infer(args) -> int:
    from .synthscene import SceneData, ViewBundle, read_scene, write_scene
    from .tasks import Pipeline, complete_scene, estimate_poses, predict_depth, synthesize_views

    pipe = Pipeline.load(_require_file(Path(args.ckpt), "checkpoint"), seed=args.seed)
    if args.steps:
        pipe.guidance.steps = args.steps
    scene_dir = Path(args.scene)
    scene = read_scene(scene_dir)
    out = Path(args.out) if args.out else scene_dir / "pred" / args.task
    images = scene.images
    cams = scene.cameras
    focal = cams[0].focal if cams else None

    if args.task == "complete":
        complete_scene(pipe, images, out, poses=cams if args.gt_poses else None, focal=focal, statistic=args.statistic)
        return EXIT_OK

    if args.task == "pose":
        if len(images) < 2:
            raise InsufficientViewsError(f"pose estimation needs at least 2 images, scene has {len(images)}")
        known = [v.depth for v in scene.views] if args.with_depth else None
        pred = estimate_poses(pipe, images, known_depths=known, focal=focal)
        views = [
            ViewBundle(v.rgb, c, v.depth if args.with_depth else _blank_depth(pipe), v.view_id,
                       {"rgb": True, "pose": i == 0, "depth": bool(args.with_depth)})
            for i, (v, c) in enumerate(zip(scene.views, pred))
        ]
    elif args.task == "depth":
        posed = list(zip(images, cams if args.gt_poses or len(images) < 2 else estimate_poses(pipe, images, focal=focal)))
        depths = predict_depth(pipe, posed)
        views = [
            ViewBundle(im, c, d, v.view_id, {"rgb": True, "pose": True, "depth": False})
            for v, (im, c), d in zip(scene.views, posed, depths)
        ]
    else:
        cond = [i for i, v in enumerate(scene.views) if v.is_condition.get("rgb")]
        if not cond or len(cond) == len(images):
            cond = list(range(max(1, len(images) - 1)))
        targets = [i for i in range(len(images)) if i not in cond]
        if not targets:
            raise InsufficientViewsError("novel view synthesis needs at least one target camera")
        gen = synthesize_views(pipe, [(images[i], cams[i]) for i in cond], [cams[i] for i in targets])
        rgb = {i: images[i] for i in cond}
        rgb.update(zip(targets, gen))
        views = [
            ViewBundle(rgb[i], cams[i], _blank_depth(pipe), v.view_id, {"rgb": i in cond, "pose": True, "depth": False})
            for i, v in enumerate(scene.views)
        ]
    write_scene(out, SceneData(views, scene.seed, scene.normalization, None, {"task": args.task, "source": str(scene_dir)}))
    log.info("wrote %s prediction to %s", args.task, out)
    return EXIT_OK


# -- eval ---------------------------------------------------------------------


def metric_columns(groups) -> list[str]:
    from .evalsuite import DEPTH_METRICS

    cols = []
    for g in groups:
        cols += {"pose": POSE_COLUMNS, "depth": DEPTH_METRICS, "image": IMAGE_COLUMNS, "pointcloud": CLOUD_COLUMNS}[g]
    return list(cols)


def scene_metrics(pred, gt, groups, pred_dir=None, gt_dir=None) -> dict:
    """One row of metrics for a predicted scene against its ground truth."""
    from .depthmap import PointCloud, backproject
    from .evalsuite import (
        DEPTH_METRICS,
        camera_center_accuracy,
        depth_metrics,
        image_metrics,
        pointcloud_metrics,
        relative_rotation_accuracy,
    )
    from .fileio import read_ply

    if len(pred.views) != len(gt.views):
        raise ConfigError(f"prediction has {len(pred.views)} views, ground truth {len(gt.views)}")
    row = {}
    if "pose" in groups:
        row["RRA@15"] = relative_rotation_accuracy(pred.cameras, gt.cameras)
        row["CA@0.1"] = camera_center_accuracy(pred.cameras, gt.cameras)
    if "depth" in groups:
        per_view = []
        for p, g in zip(pred.views, gt.views):
            try:
                per_view.append(depth_metrics(p.depth, g.depth))
            except NoOverlapError:
                continue
        if not per_view:
            raise NoOverlapError("no view has overlapping valid depth")
        for k in DEPTH_METRICS:
            row[k] = float(np.mean([m[k] for m in per_view]))
    if "image" in groups:
        # generated views are the ones not given as rgb conditions
        idx = [i for i, v in enumerate(pred.views) if not v.is_condition.get("rgb", False)] or range(len(pred.views))
        ms = [image_metrics(pred.views[i].rgb, gt.views[i].rgb) for i in idx]
        for k in IMAGE_COLUMNS:
            row[k] = float(np.mean([m[k] for m in ms]))
    if "pointcloud" in groups:

        def cloud(scene, root):
            if root is not None and (Path(root) / "init.ply").exists():
                return read_ply(Path(root) / "init.ply")[0]
            return PointCloud.concatenate([backproject(v.depth, v.camera) for v in scene.views]).points

        row.update(pointcloud_metrics(cloud(pred, pred_dir), cloud(gt, gt_dir)))
    return row


def cmd_eval(args) -> int:
    from .synthscene import read_scene

    groups = [g.strip() for g in args.metrics.split(",") if g.strip()]
    bad = [g for g in groups if g not in METRIC_GROUPS]
    if bad or not groups:
        raise ConfigError(f"unknown metric groups {bad}; choose from {list(METRIC_GROUPS)}")
    pred_dirs = _scene_dirs(Path(args.pred))
    gt_dirs = _scene_dirs(Path(args.gt))
    if len(pred_dirs) == 1 and len(gt_dirs) == 1:
        pairs = [(pred_dirs[0], gt_dirs[0])]
    else:
        gt_by_name = {d.name: d for d in gt_dirs}
        missing = [d.name for d in pred_dirs if d.name not in gt_by_name]
        if missing:
            raise SceneIOError(Path(args.gt), f"no ground truth for {missing}")
        pairs = [(d, gt_by_name[d.name]) for d in pred_dirs]
    cols = metric_columns(groups)
    rows = []
    for p, g in pairs:
        m = scene_metrics(read_scene(p), read_scene(g), groups, p, g)
        rows.append([p.name] + [m[c] for c in cols])
    out = Path(args.out) if args.out else Path(args.pred) / "metrics.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["scene"] + cols)
        for r in rows:
            w.writerow([r[0]] + [repr(float(x)) for x in r[1:]])
        w.writerow(["mean"] + [repr(float(np.mean([r[i + 1] for r in rows]))) for i in range(len(cols))])
    log.info("wrote %s", out)
    return EXIT_OK


# -- fuse ---------------------------------------------------------------------


def cmd_fuse(args) -> int:
    from .fileio import write_pfm, write_pgm, write_ply
    from .recon import fuse_scene
    from .synthscene import read_scene

    root = Path(args.scene)
    scene = read_scene(root)
    fused, cloud = fuse_scene(scene, args.statistic, args.pix_thresh, args.depth_thresh)
    for i, (view_id, d) in enumerate(fused):
        write_pfm(root / f"fused_{view_id:03d}.pfm", d.depth)
        write_pgm(root / f"fused_{view_id:03d}.pgm", d.valid)
    write_ply(root / "init.ply", cloud.points, cloud.colors)
    log.info("fused %d views into %d points", len(fused), len(cloud.points))
    return EXIT_OK


# -- traj ---------------------------------------------------------------------


def cmd_traj(args) -> int:
    from .recon import orbit_trajectory, spline_trajectory
    from .synthscene import read_scene

    if args.kind == "orbit":
        traj = orbit_trajectory(
            args.n, args.elevation, args.distance, tuple(args.resolution), args.fov, args.start_azimuth
        )
    else:
        if not args.scene:
            raise ConfigError("traj spline needs --scene with the key cameras")
        traj = spline_trajectory(read_scene(args.scene).cameras, args.multiplier, args.density)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    traj.write(out)
    log.info("wrote %d cameras to %s", len(traj.cameras), out)
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="matrixkit", description="Multi-view multi-modal diffusion toolkit.")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: all logical cores; MATRIXKIT_THREADS overrides)")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="logging verbosity")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    g.add_argument("--config", required=True, help="run config JSON")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--scenes", type=int, default=4, help="number of scenes")
    g.add_argument("--seed", type=int, default=0, help="seed of the first scene; scene i uses seed+i")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the diffusion model")
    t.add_argument("--config", required=True, help="run config JSON")
    t.add_argument("--data", required=True, help="dataset directory from gen-data")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--checkpoint-every", type=int, default=0, help="also save a checkpoint every N steps")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="pose, novel-view, depth or full scene inference")
    i.add_argument("task", choices=["pose", "nvs", "depth", "complete"], help="what to infer")
    i.add_argument("--ckpt", required=True, help="checkpoint from train")
    i.add_argument("--scene", required=True, help="input scene package")
    i.add_argument("--out", default=None, help="output package (default: SCENE/pred/TASK)")
    i.add_argument("--with-depth", action="store_true", help="pose: condition on the scene's depth maps")
    i.add_argument("--gt-poses", action="store_true", help="depth/complete: use the scene's cameras instead of estimating")
    i.add_argument("--statistic", default="median", choices=["mean", "median"], help="complete: fusion statistic")
    i.add_argument("--steps", type=int, default=0, help="override the number of sampling steps")
    i.add_argument("--seed", type=int, default=0, help="sampling seed")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("--pred", required=True, help="predicted scene package or directory of packages")
    e.add_argument("--gt", required=True, help="ground-truth scene package or directory of packages")
    e.add_argument("--metrics", default="pose,depth,image", help=f"comma-separated subset of {','.join(METRIC_GROUPS)}")
    e.add_argument("--out", default=None, help="CSV path (default: PRED/metrics.csv)")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("fuse", help="geometric filtering and fusion of a scene's depth maps")
    f.add_argument("--scene", required=True, help="scene package")
    f.add_argument("--statistic", default="median", choices=["mean", "median"], help="fusion statistic")
    f.add_argument("--pix-thresh", type=float, default=1.0, help="reprojection threshold in pixels")
    f.add_argument("--depth-thresh", type=float, default=0.01, help="relative depth threshold")
    f.set_defaults(func=cmd_fuse)

    r = sub.add_parser("traj", help="camera trajectories")
    r.add_argument("kind", choices=["orbit", "spline"], help="trajectory type")
    r.add_argument("--out", required=True, help="trajectory.json path")
    r.add_argument("--n", type=int, default=80, help="orbit: number of cameras")
    r.add_argument("--elevation", type=float, default=20.0, help="orbit: elevation in degrees")
    r.add_argument("--distance", type=float, default=1.5, help="orbit: distance from the origin")
    r.add_argument("--resolution", type=int, nargs=2, default=[32, 32], metavar=("W", "H"), help="orbit: image size")
    r.add_argument("--fov", type=float, default=50.0, help="orbit: horizontal field of view in degrees")
    r.add_argument("--start-azimuth", type=float, default=0.0, help="orbit: azimuth of the first camera")
    r.add_argument("--scene", default=None, help="spline: scene package whose cameras are the key poses")
    r.add_argument("--multiplier", type=int, default=3, help="spline: view-count multiplier")
    r.add_argument("--density", type=int, default=80, help="spline: base number of views")
    r.set_defaults(func=cmd_traj)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        set_threads(args.threads)
        return args.func(args)
    except MatrixKitError as exc:
        sys.stderr.write(f"error[{exc.kind}]: {' '.join(str(exc).split())}\n")
        return exc.exit_code
    except FileNotFoundError as exc:
        sys.stderr.write(f"error[data]: {' '.join(str(exc).split())}\n")
        return EXIT_DATA
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        sys.stderr.write(f"error[numeric]: {' '.join(str(exc).split())}\n")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
