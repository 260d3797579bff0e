"""Procedural multi-view scenes rendered by analytic raycasting.

Scenes are a handful of spheres, boxes and bounded planes with Lambertian
shading under directional lights. Rendering returns exact camera-frame depth
for every foreground pixel, which makes downstream geometry tests sharp.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .depthmap import DepthMap
from .errors import SceneIOError
from .fileio import read_pfm, read_pgm, read_png, write_pfm, write_pgm, write_png
from .geometry import Camera, NormalizationSpec, look_at, normalize_scene, pixel_centers, random_rotation

META_VERSION = 1
SHAPES = ("sphere", "box", "plane")


@dataclass(frozen=True, eq=False)
class Primitive:
    shape: str
    center: np.ndarray
    rotation: np.ndarray  # world -> local
    size: np.ndarray  # sphere: [r]; box: half extents (3); plane: half extents (2)
    albedo: np.ndarray

    def to_dict(self) -> dict:
        return {
            "shape": self.shape,
            "center": self.center.tolist(),
            "rotation": self.rotation.reshape(-1).tolist(),
            "size": self.size.tolist(),
            "albedo": self.albedo.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Primitive":
        return cls(
            d["shape"],
            np.array(d["center"], dtype=np.float64),
            np.array(d["rotation"], dtype=np.float64).reshape(3, 3),
            np.array(d["size"], dtype=np.float64),
            np.array(d["albedo"], dtype=np.float64),
        )


@dataclass(frozen=True, eq=False)
class SceneSpec:
    seed: int
    primitives: tuple[Primitive, ...]
    lights: tuple[tuple[np.ndarray, float], ...]  # (unit direction toward light, intensity)
    background: np.ndarray
    ambient: float = 0.15

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "primitives": [p.to_dict() for p in self.primitives],
            "lights": [{"direction": d.tolist(), "intensity": i} for d, i in self.lights],
            "background": self.background.tolist(),
            "ambient": self.ambient,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(
            int(d["seed"]),
            tuple(Primitive.from_dict(p) for p in d["primitives"]),
            tuple((np.array(light["direction"], dtype=np.float64), float(light["intensity"])) for light in d["lights"]),
            np.array(d["background"], dtype=np.float64),
            float(d["ambient"]),
        )


@dataclass
class SceneConfig:
    n_primitives: tuple[int, int] = (2, 4)
    center_extent: float = 0.3
    size_range: tuple[float, float] = (0.1, 0.25)
    shapes: tuple[str, ...] = SHAPES
    n_lights: tuple[int, int] = (1, 2)
    ambient: float = 0.15
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass
class CameraSampler:
    fov_deg: float = 50.0
    azimuth_range: tuple[float, float] = (0.0, 360.0)
    elevation_range: tuple[float, float] = (-45.0, 90.0)
    distance_range: tuple[float, float] = (1.1, 1.6)
    resolution: tuple[int, int] = (32, 32)

    @property
    def focal(self) -> float:
        return self.resolution[0] / 2.0 / np.tan(np.radians(self.fov_deg) / 2.0)


@dataclass(eq=False)
class ViewBundle:
    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    camera: Camera
    depth: DepthMap
    view_id: int
    is_condition: dict = field(default_factory=lambda: {"rgb": True, "pose": True, "depth": True})


@dataclass(eq=False)
class SceneData:
    """A multi-view dataset entry: what ``write_scene`` stores on disk."""

    views: list[ViewBundle]
    seed: int | None = None
    normalization: NormalizationSpec | None = None
    spec: SceneSpec | None = None
    extra: dict = field(default_factory=dict)

    @property
    def cameras(self) -> list[Camera]:
        return [v.camera for v in self.views]

    @property
    def depths(self) -> list[DepthMap]:
        return [v.depth for v in self.views]

    @property
    def images(self) -> list[np.ndarray]:
        return [v.rgb for v in self.views]


# -- sampling -----------------------------------------------------------------


def sample_scene(seed: int, config: SceneConfig | None = None) -> SceneSpec:
    """Deterministic random scene; every primitive center lies in [-e, e]^3."""
    cfg = config or SceneConfig()
    rng = np.random.default_rng(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    lo, hi = cfg.n_primitives
    n = int(rng.integers(lo, hi + 1))
    prims = []
    for _ in range(n):
        shape = cfg.shapes[int(rng.integers(len(cfg.shapes)))]
        center = rng.uniform(-cfg.center_extent, cfg.center_extent, 3)
        rot = random_rotation(rng)
        if shape == "sphere":
            size = rng.uniform(*cfg.size_range, 1)
        elif shape == "box":
            size = rng.uniform(*cfg.size_range, 3)
        else:
            size = rng.uniform(*cfg.size_range, 2)
        albedo = rng.uniform(0.2, 1.0, 3)
        prims.append(Primitive(shape, center, rot, size, albedo))
    lights = []
    for _ in range(int(rng.integers(cfg.n_lights[0], cfg.n_lights[1] + 1))):
        d = rng.normal(size=3)
        d[2] = abs(d[2]) + 0.5
        lights.append((d / np.linalg.norm(d), float(rng.uniform(0.6, 1.0))))
    return SceneSpec(int(seed), tuple(prims), tuple(lights), np.array(cfg.background, dtype=np.float64), cfg.ambient)


def camera_from_spherical(azimuth_deg: float, elevation_deg: float, distance: float, sampler: CameraSampler) -> Camera:
    az, el = np.radians(azimuth_deg), np.radians(elevation_deg)
    center = distance * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    R, t = look_at(center)
    w, h = sampler.resolution
    return Camera(R, t, sampler.focal, np.array([w / 2.0, h / 2.0]), (w, h))


def sample_cameras(spec: SceneSpec, sampler: CameraSampler, n_views: int, seed: int) -> list[Camera]:
    """Look-at-origin cameras with uniformly drawn azimuth, elevation and distance."""
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    rng = np.random.default_rng([spec.seed & 0xFFFFFFFF, seed & 0xFFFFFFFF, 0xCA3])
    cams = []
    for _ in range(n_views):
        az = rng.uniform(*sampler.azimuth_range)
        el = rng.uniform(*sampler.elevation_range)
        dist = rng.uniform(*sampler.distance_range)
        cams.append(camera_from_spherical(az, el, dist, sampler))
    return cams


# -- raycasting ---------------------------------------------------------------

_EPS = 1e-9


def _hit_sphere(p: Primitive, o, d):
    oc = o - p.center
    b = d @ oc
    c = oc @ oc - p.size[0] ** 2
    disc = b * b - c
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0, t1 = -b - sq, -b + sq
    t = np.where(t0 > _EPS, t0, np.where(t1 > _EPS, t1, np.inf))
    t = np.where(disc >= 0, t, np.inf)
    n = o + t[:, None] * d - p.center
    with np.errstate(invalid="ignore"):
        n = n / np.linalg.norm(n, axis=1, keepdims=True)
    return t, n


def _hit_box(p: Primitive, o, d):
    ol = p.rotation @ (o - p.center)
    dl = d @ p.rotation.T
    h = p.size
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-h - ol) / dl
        t2 = (h - ol) / dl
    tlo = np.fmin(t1, t2)
    thi = np.fmax(t1, t2)
    tmin = np.max(tlo, axis=1)
    tmax = np.min(thi, axis=1)
    hit = (tmax >= tmin) & (tmax > _EPS)
    t = np.where(hit, np.where(tmin > _EPS, tmin, tmax), np.inf)
    axis = np.where(tmin > _EPS, np.argmax(tlo, axis=1), np.argmin(thi, axis=1))
    nl = np.zeros_like(dl)
    rows = np.arange(len(dl))
    nl[rows, axis] = -np.sign(dl[rows, axis])
    return t, nl @ p.rotation


def _hit_plane(p: Primitive, o, d):
    ol = p.rotation @ (o - p.center)
    dl = d @ p.rotation.T
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -ol[2] / dl[:, 2]
    q = ol[None, :2] + t[:, None] * dl[:, :2]
    hit = np.isfinite(t) & (t > _EPS) & (np.abs(q[:, 0]) <= p.size[0]) & (np.abs(q[:, 1]) <= p.size[1])
    t = np.where(hit, t, np.inf)
    n = np.broadcast_to(p.rotation[2], d.shape).copy()
    return t, n


_HITTERS = {"sphere": _hit_sphere, "box": _hit_box, "plane": _hit_plane}


def raycast(spec: SceneSpec, origin: np.ndarray, dirs: np.ndarray):
    """First hit along unit rays: (t, normal, primitive index or -1)."""
    n = len(dirs)
    best_t = np.full(n, np.inf)
    best_n = np.zeros((n, 3))
    best_i = np.full(n, -1)
    for i, p in enumerate(spec.primitives):
        t, nrm = _HITTERS[p.shape](p, origin, dirs)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_n[closer] = nrm[closer]
        best_i[closer] = i
    return best_t, best_n, best_i


def render(spec: SceneSpec, cam: Camera, resolution: tuple[int, int]) -> tuple[np.ndarray, DepthMap]:
    """RGB (H, W, 3) in [0, 1] and exact camera-frame depth at ``resolution``."""
    w, h = resolution
    if w < 8 or h < 8:
        raise ValueError(f"render resolution must be at least 8x8, got {resolution}")
    u, v = pixel_centers((w, h), cam.resolution)
    dc = np.stack([(u - cam.principal_point[0]) / cam.focal, (v - cam.principal_point[1]) / cam.focal, np.ones_like(u)], -1)
    dc = dc.reshape(-1, 3)
    dw = dc @ cam.rotation
    dw /= np.linalg.norm(dw, axis=1, keepdims=True)
    t, nrm, idx = raycast(spec, cam.center, dw)
    hit = idx >= 0
    rgb = np.broadcast_to(spec.background, (len(dw), 3)).copy()
    if hit.any():
        nh = nrm[hit]
        facing = np.sum(nh * dw[hit], axis=1) > 0
        nh[facing] *= -1  # two-sided shading
        shade = np.full(len(nh), spec.ambient)
        for ldir, inten in spec.lights:
            shade += inten * np.maximum(nh @ ldir, 0.0)
        albedo = np.stack([spec.primitives[i].albedo for i in idx[hit]])
        rgb[hit] = np.clip(albedo * shade[:, None], 0.0, 1.0)
    # camera-frame z of the hit = t * (unit ray's z component in camera frame)
    zc = dc[:, 2] / np.linalg.norm(dc, axis=1)
    depth = np.where(hit, t * zc, 0.0)
    return rgb.reshape(h, w, 3), DepthMap(depth.reshape(h, w), hit.reshape(h, w))


def visible_from(spec: SceneSpec, cam: Camera, points: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Whether each world point is the first surface hit seen from ``cam``."""
    c = cam.center
    vec = points - c
    dist = np.linalg.norm(vec, axis=1)
    t, _, _ = raycast(spec, c, vec / dist[:, None])
    return np.abs(t - dist) <= tol * np.maximum(dist, 1.0)


def scene_distance(spec: SceneSpec, points: np.ndarray) -> np.ndarray:
    """Unsigned distance from each point to the nearest primitive surface."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    best = np.full(len(pts), np.inf)
    for p in spec.primitives:
        q = (pts - p.center) @ p.rotation.T
        if p.shape == "sphere":
            dist = np.abs(np.linalg.norm(q, axis=1) - p.size[0])
        elif p.shape == "box":
            e = np.abs(q) - p.size
            outside = np.linalg.norm(np.maximum(e, 0.0), axis=1)
            inside = np.minimum(np.max(e, axis=1), 0.0)
            dist = np.abs(outside + inside)
        else:
            ex = np.maximum(np.abs(q[:, :2]) - p.size, 0.0)
            dist = np.sqrt(np.sum(ex**2, axis=1) + q[:, 2] ** 2)
        best = np.minimum(best, dist)
    return best


# -- dataset generation -------------------------------------------------------


def drop_depth_regions(depth: DepthMap, fraction: float, rng: np.random.Generator) -> DepthMap:
    """Invalidate random rectangles until roughly ``fraction`` of valid pixels are gone."""
    if fraction <= 0:
        return depth
    valid = depth.valid.copy()
    target = int(round(fraction * valid.sum()))
    h, w = valid.shape
    removed = 0
    for _ in range(64):
        if removed >= target:
            break
        rh, rw = int(rng.integers(1, max(h // 3, 1) + 1)), int(rng.integers(1, max(w // 3, 1) + 1))
        y, x = int(rng.integers(0, h - rh + 1)), int(rng.integers(0, w - rw + 1))
        before = valid.sum()
        valid[y : y + rh, x : x + rw] = False
        removed += before - valid.sum()
    return DepthMap(depth.depth, valid)


def generate_scene(
    seed: int,
    n_views: int,
    scene_config: SceneConfig | None = None,
    sampler: CameraSampler | None = None,
    depth_resolution: tuple[int, int] = (16, 16),
    normalize: bool = True,
    depth_dropout: float = 0.0,
) -> SceneData:
    """Sample, render and (optionally) ray-intersection-normalize one scene."""
    sampler = sampler or CameraSampler()
    spec = sample_scene(seed, scene_config)
    cams = sample_cameras(spec, sampler, n_views, seed)
    rgbs, depths = [], []
    for cam in cams:
        rgb, _ = render(spec, cam, sampler.resolution)
        _, dm = render(spec, cam, depth_resolution)
        rgbs.append(rgb)
        depths.append(dm)
    norm = None
    if normalize and n_views >= 2:
        norm, cams = normalize_scene(cams, mode="ray-intersection")
        depths = [DepthMap(d.depth * norm.scale, d.valid) for d in depths]
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 0xD40])
    views = []
    for i, (rgb, cam, dm) in enumerate(zip(rgbs, cams, depths)):
        dm = drop_depth_regions(dm, depth_dropout, rng)
        views.append(ViewBundle(rgb, cam, DepthMap(dm.depth.astype(np.float32), dm.valid), i))
    return SceneData(views, seed, norm, spec)


# -- on-disk store ------------------------------------------------------------


def _view_stem(i: int) -> str:
    return f"view_{i:03d}"


def write_scene(path, scene: SceneData) -> Path:
    """Directory with meta.json plus view_XXX.{png,pfm,pgm} per view."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    views = []
    for i, v in enumerate(scene.views):
        stem = _view_stem(i)
        write_png(path / f"{stem}.png", v.rgb)
        write_pfm(path / f"{stem}.pfm", v.depth.depth)
        write_pgm(path / f"{stem}.pgm", v.depth.valid)
        views.append(
            {
                "id": int(v.view_id),
                "camera": v.camera.to_dict(),
                "rgb": f"{stem}.png",
                "depth": f"{stem}.pfm",
                "mask": f"{stem}.pgm",
                "is_condition": dict(v.is_condition),
            }
        )
    meta = {
        "version": META_VERSION,
        "seed": scene.seed,
        "normalization": scene.normalization.to_dict() if scene.normalization else None,
        "scene": scene.spec.to_dict() if scene.spec else None,
        "views": views,
        "extra": scene.extra,
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return path


def read_scene(path) -> SceneData:
    path = Path(path)
    meta_path = path / "meta.json"
    try:
        meta = json.loads(meta_path.read_text())
    except FileNotFoundError as exc:
        raise SceneIOError(meta_path, "missing scene metadata") from exc
    except json.JSONDecodeError as exc:
        raise SceneIOError(meta_path, f"corrupt JSON: {exc}") from exc
    if meta.get("version") != META_VERSION:
        raise SceneIOError(meta_path, f"unsupported meta version {meta.get('version')!r}")
    views = []
    for entry in meta["views"]:
        rgb = read_png(path / entry["rgb"])
        depth = read_pfm(path / entry["depth"])
        mask = read_pgm(path / entry["mask"])
        if mask.shape != depth.shape:
            raise SceneIOError(path / entry["mask"], f"mask shape {mask.shape} != depth shape {depth.shape}")
        cam = Camera.from_dict(entry["camera"])
        views.append(ViewBundle(rgb, cam, DepthMap(depth, mask), int(entry["id"]), dict(entry.get("is_condition", {}))))
    norm = NormalizationSpec.from_dict(meta["normalization"]) if meta.get("normalization") else None
    spec = SceneSpec.from_dict(meta["scene"]) if meta.get("scene") else None
    return SceneData(views, meta.get("seed"), norm, spec, meta.get("extra") or {})
