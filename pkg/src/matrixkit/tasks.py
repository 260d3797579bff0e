"""Downstream tasks expressed as mask plans over one trained model."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import (
    MultiViewDiT,
    decode_depth,
    decode_pose,
    decode_rgb,
    encode_depth,
    encode_pose,
    encode_rgb,
    load_checkpoint,
    save_checkpoint,
)
from .depthmap import DepthMap, PointCloud
from .diffusion import (
    GuidanceConfig,
    MaskPlan,
    Schedule,
    depth_plan,
    make_schedule,
    nvs_plan,
    pose_plan,
    sample,
)
from .errors import InsufficientViewsError, MatrixKitError, NothingToGenerateError, ShapeError, StageError
from .fileio import write_ply
from .geometry import Camera, identity_camera, normalize_cameras, recover_camera
from .recon import Trajectory, init_package, orbit_around, spline_trajectory
from .synthscene import SceneData, ViewBundle, read_scene, write_scene

log = logging.getLogger(__name__)


@dataclass(eq=False)
class Pipeline:
    """A trained network together with its schedule and sampling settings."""

    net: MultiViewDiT
    schedule: Schedule = field(default_factory=make_schedule)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    seed: int = 0
    fov_deg: float = 50.0  # assumed field of view when no intrinsics are given

    @property
    def config(self):
        return self.net.config

    @property
    def image_resolution(self) -> tuple[int, int]:
        h, w = self.config.resolutions["rgb"]
        return (w, h)

    def default_focal(self) -> float:
        w, _ = self.image_resolution
        return w / 2.0 / np.tan(np.radians(self.fov_deg) / 2.0)

    def save(self, path) -> None:
        extra = {
            "schedule": {"T": self.schedule.T, "kind": self.schedule.kind},
            "guidance": self.guidance.to_dict(),
            "train_info": getattr(self.net, "train_info", {}),
            "fov_deg": self.fov_deg,
        }
        save_checkpoint(path, self.net, extra)

    @classmethod
    def load(cls, path, seed: int = 0) -> "Pipeline":
        net, extra = load_checkpoint(path)
        net.train_info = extra.get("train_info", {})
        sched = extra.get("schedule", {})
        schedule = make_schedule(sched.get("T", 200), sched.get("kind", "cosine"))
        guidance = GuidanceConfig.from_dict(extra["guidance"]) if "guidance" in extra else GuidanceConfig()
        return cls(net, schedule, guidance, seed, extra.get("fov_deg", 50.0))

    def rng(self, *salt: int) -> np.random.Generator:
        return np.random.default_rng([self.seed & 0xFFFFFFFF, *salt])

    def run(self, plan: MaskPlan, maps: dict, *salt: int) -> dict:
        return sample(self.net, plan, maps, self.schedule, self.guidance, self.rng(*salt))


def _check_image(model: Pipeline, img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    w, h = model.image_resolution
    if img.shape != (h, w, 3):
        raise ShapeError(f"image is {img.shape}, model expects {(h, w, 3)}")
    return img


def chunk_round_robin(n_targets: int, capacity: int) -> list:
    """Partition target indices into ceil(n / capacity) chunks, dealt round-robin."""
    if n_targets <= 0:
        raise NothingToGenerateError("no target views requested")
    if capacity <= 0:
        raise InsufficientViewsError("conditions leave no room for targets within max_views")
    n_chunks = -(-n_targets // capacity)
    return [list(range(k, n_targets, n_chunks)) for k in range(n_chunks)]


# -- pose ---------------------------------------------------------------------


def estimate_poses(model: Pipeline, images: list, known_depths: list | None = None, focal: float | None = None) -> list:
    """Cameras for all views, view 0 being the identity-normalized reference.

    ``focal`` (pixels, at image resolution) fixes the intrinsics; without it
    the reference ray map assumes the pipeline's field of view and each
    recovered camera searches its own focal length.
    """
    n = len(images)
    if n < 2:
        raise InsufficientViewsError("pose estimation needs at least 2 images")
    if n > model.config.max_views:
        raise InsufficientViewsError(f"{n} images exceed max_views={model.config.max_views}")
    res = model.image_resolution
    ref = identity_camera(focal if focal is not None else model.default_focal(), res)
    maps = {(v, "rgb"): encode_rgb(_check_image(model, im)) for v, im in enumerate(images)}
    maps[(0, "pose")] = encode_pose(ref, model.config)
    with_depth = known_depths is not None
    if with_depth:
        if len(known_depths) != n:
            raise ShapeError("need one depth map per image")
        for v, d in enumerate(known_depths):
            maps[(v, "depth")] = encode_depth(d, model.config)
    out = model.run(pose_plan(n, with_depth), maps, 1)
    cams = [ref]
    for v in range(1, n):
        rm = decode_pose(out[(v, "pose")], model.config)
        cams.append(recover_camera(rm, focal_hint=focal, resolution=res))
    return cams


# -- novel views --------------------------------------------------------------


def synthesize_views(model: Pipeline, posed_images: list, target_cams: list) -> list:
    """RGB images at ``target_cams`` given (image, camera) conditions.

    Target sets larger than the view budget are split round-robin into
    chunks, each carrying all conditions.
    """
    if not posed_images:
        raise InsufficientViewsError("novel view synthesis needs at least one posed image")
    nc = len(posed_images)
    chunks = chunk_round_robin(len(target_cams), model.config.max_views - nc)
    cond_imgs = [encode_rgb(_check_image(model, im)) for im, _ in posed_images]
    cond_cams = [c for _, c in posed_images]
    results = [None] * len(target_cams)
    for ci, idx in enumerate(chunks):
        cams = normalize_cameras(cond_cams + [target_cams[i] for i in idx])
        maps = {(v, "pose"): encode_pose(c, model.config) for v, c in enumerate(cams)}
        for v, x in enumerate(cond_imgs):
            maps[(v, "rgb")] = x
        out = model.run(nvs_plan(len(cams), range(nc)), maps, 2, ci)
        for j, i in enumerate(idx):
            results[i] = decode_rgb(out[(nc + j, "rgb")])
    return results


# -- depth --------------------------------------------------------------------


def predict_depth(model: Pipeline, posed_images: list, threshold: float = 0.5) -> list:
    """Depth for every (image, camera) input; more views than max_views run in chunks."""
    if not posed_images:
        raise InsufficientViewsError("depth prediction needs at least one image")
    chunks = chunk_round_robin(len(posed_images), model.config.max_views)
    results = [None] * len(posed_images)
    for ci, idx in enumerate(chunks):
        cams = normalize_cameras([posed_images[i][1] for i in idx])
        maps = {}
        for v, (i, cam) in enumerate(zip(idx, cams)):
            maps[(v, "rgb")] = encode_rgb(_check_image(model, posed_images[i][0]))
            maps[(v, "pose")] = encode_pose(cam, model.config)
        out = model.run(depth_plan(len(idx)), maps, 3, ci)
        for v, i in enumerate(idx):
            d = decode_depth(out[(v, "depth")], model.config, threshold)
            if not d.valid.any():
                warnings.warn(f"predicted mask for view {i} is below threshold everywhere; depth is all-invalid")
            results[i] = d
    return results


# -- scene completion ---------------------------------------------------------

STAGES_FEW_SHOT = ("poses", "depths", "views", "fuse")
STAGES_MONOCULAR = ("key_views", "depths", "views", "fuse")


class _StageLog:
    """Append-only record of finished stages; lets an interrupted run resume."""

    def __init__(self, root: Path):
        self.path = root / "stages.log"
        self.stage_dir = root / "stages"
        self.stage_dir.mkdir(parents=True, exist_ok=True)
        self.done = self.path.read_text().split() if self.path.exists() else []

    def finished(self, name: str) -> bool:
        return name in self.done and (self.stage_dir / f"{name}.json").exists()

    def load(self, name: str):
        return json.loads((self.stage_dir / f"{name}.json").read_text())

    def commit(self, name: str, payload) -> None:
        tmp = self.stage_dir / f"{name}.json.tmp"
        tmp.write_text(json.dumps(payload))
        tmp.replace(self.stage_dir / f"{name}.json")
        with open(self.path, "a") as f:
            f.write(name + "\n")
        self.done.append(name)


def _cams_json(cams):
    return [c.to_dict() for c in cams]


def _cams_from(payload):
    return [Camera.from_dict(c) for c in payload]


def _depth_json(depths):
    return [{"depth": d.depth.tolist(), "valid": d.valid.tolist()} for d in depths]


def _depth_from(payload):
    return [DepthMap(np.array(p["depth"], dtype=np.float32), np.array(p["valid"], dtype=bool)) for p in payload]


def _images_json(images):
    return [np.asarray(im).tolist() for im in images]


def _images_from(payload):
    return [np.array(p, dtype=np.float64) for p in payload]


@dataclass(eq=False)
class ScenePackage:
    root: Path
    scene: SceneData
    cloud: PointCloud
    trajectory: Trajectory
    stages: list


def complete_scene(
    model: Pipeline,
    images: list,
    out_dir,
    poses: list | None = None,
    focal: float | None = None,
    n_key_views: int = 8,
    orbit_views: int = 80,
    spline_multiplier: int = 3,
    spline_density: int = 80,
    statistic: str = "median",
) -> ScenePackage:
    """Images (and optionally poses) in, a full scene package out.

    Few-shot inputs: estimate poses unless given, predict depths, synthesize
    views along a spline through the inputs. A single image: synthesize key
    views on an orbit through it, predict their depths, then fill in the
    orbit. Every stage's output is written before the next one starts, so a
    rerun on the same directory resumes after the last finished stage.
    """
    if not images:
        raise InsufficientViewsError("scene completion needs at least one image")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    slog = _StageLog(root)
    images = [_check_image(model, im) for im in images]

    def stage(name, fn, encode, decode):
        if slog.finished(name):
            log.info("stage %s already done; loading", name)
            return decode(slog.load(name))
        try:
            result = fn()
        except MatrixKitError as exc:
            raise StageError(name, exc) from exc
        slog.commit(name, encode(result))
        return result

    if len(images) == 1:
        ref = poses[0] if poses else identity_camera(focal or model.default_focal(), model.image_resolution)
        ref = normalize_cameras([ref])[0]
        orbit = orbit_around(ref, n_key_views)
        key_cams = orbit.cameras

        def key_views():
            return [images[0]] + synthesize_views(model, [(images[0], ref)], key_cams[1:])

        key_imgs = stage("key_views", key_views, _images_json, _images_from)
        key_depths = stage(
            "depths", lambda: predict_depth(model, list(zip(key_imgs, key_cams))), _depth_json, _depth_from
        )
        traj = orbit_around(ref, orbit_views)
        conditions = [(images[0], ref)]
    else:
        if poses is not None:
            if len(poses) != len(images):
                raise ShapeError("need one pose per image")
            key_cams = normalize_cameras(list(poses))
            log.info("poses given; skipping pose estimation")
        else:
            key_cams = stage(
                "poses", lambda: estimate_poses(model, images, focal=focal), _cams_json, _cams_from
            )
        key_imgs = images
        key_depths = stage(
            "depths", lambda: predict_depth(model, list(zip(key_imgs, key_cams))), _depth_json, _depth_from
        )
        traj = spline_trajectory(key_cams, spline_multiplier, spline_density)
        conditions = list(zip(key_imgs, key_cams))[: model.config.max_views - 1]

    if len(images) == 1:
        # orbit positions that coincide with a key view are not regenerated
        novel = [c for k, c in enumerate(traj.cameras) if (k * n_key_views) % orbit_views != 0]
    else:
        key_set = {id(c) for c in key_cams}
        novel = [c for c in traj.cameras if id(c) not in key_set]
    novel_imgs = stage("views", lambda: synthesize_views(model, conditions, novel), _images_json, _images_from)

    dh, dw = model.config.resolutions["depth"]
    views = [
        ViewBundle(im, c, d, i, {"rgb": True, "pose": True, "depth": False})
        for i, (im, c, d) in enumerate(zip(key_imgs, key_cams, key_depths))
    ]
    for im, c in zip(novel_imgs, novel):
        views.append(ViewBundle(im, c, DepthMap.invalid(dw, dh), len(views), {"rgb": False, "pose": True, "depth": False}))
    scene = SceneData(views, extra={"key_views": len(key_cams), "branch": "monocular" if len(images) == 1 else "few-shot"})
    write_scene(root, scene)
    traj.write(root / "trajectory.json")

    def fuse():
        cloud, _ = init_package(SceneData(views[: len(key_cams)]), None, statistic)
        return cloud

    cloud = stage(
        "fuse",
        fuse,
        lambda c: {"points": c.points.tolist(), "colors": None if c.colors is None else c.colors.tolist()},
        lambda p: PointCloud(np.array(p["points"]), None if p["colors"] is None else np.array(p["colors"])),
    )
    write_ply(root / "init.ply", cloud.points, cloud.colors)
    return ScenePackage(root, read_scene(root), cloud, traj, list(slog.done))
