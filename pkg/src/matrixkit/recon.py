"""Inputs for a downstream Gaussian-splatting optimizer.

Camera trajectories (orbits and key-pose splines), the pure loss terms with
their weight presets, and the fused point-cloud initialization.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial.transform import Rotation, Slerp
from scipy.special import xlogy

from .depthmap import PointCloud, backproject, geometric_filter, geometric_fusion
from .errors import EmptyCloudError, InsufficientViewsError, SceneIOError, ShapeError
from .evalsuite import ssim
from .fileio import write_ply
from .geometry import Camera, look_at, orthonormalize

# -- trajectories -------------------------------------------------------------


@dataclass(eq=False)
class Trajectory:
    cameras: list
    kind: str

    def __len__(self) -> int:
        return len(self.cameras)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "cameras": [c.to_dict() for c in self.cameras]}

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        return cls([Camera.from_dict(c) for c in d["cameras"]], d["kind"])

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def read(cls, path) -> "Trajectory":
        path = Path(path)
        try:
            return cls.from_dict(json.loads(path.read_text()))
        except FileNotFoundError as exc:
            raise SceneIOError(path, "missing trajectory file") from exc
        except (json.JSONDecodeError, KeyError) as exc:
            raise SceneIOError(path, f"corrupt trajectory: {exc}") from exc


def orbit_trajectory(
    n: int = 80,
    elevation_deg: float = 20.0,
    distance: float = 1.5,
    resolution: tuple[int, int] = (32, 32),
    fov_deg: float = 50.0,
    start_azimuth_deg: float = 0.0,
) -> Trajectory:
    """``n`` look-at-origin cameras evenly spaced in azimuth (z is up)."""
    if n < 2:
        raise ValueError("orbit needs n >= 2")
    w, h = resolution
    focal = w / 2.0 / np.tan(np.radians(fov_deg) / 2.0)
    el = np.radians(elevation_deg)
    cams = []
    for k in range(n):
        az = np.radians(start_azimuth_deg + 360.0 * k / n)
        center = distance * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        R, t = look_at(center)
        cams.append(Camera(R, t, focal, np.array([w / 2.0, h / 2.0]), (w, h)))
    return Trajectory(cams, "orbit")


def rotate_about_origin(cam: Camera, axis: np.ndarray, angle: float) -> Camera:
    """Move the camera rigidly with the world rotation about ``axis`` through the origin."""
    rot = Rotation.from_rotvec(np.asarray(axis, dtype=np.float64) / np.linalg.norm(axis) * angle).as_matrix()
    return cam.replace(rotation=orthonormalize(cam.rotation @ rot.T))


def orbit_around(cam: Camera, n: int) -> Trajectory:
    """Orbit through ``cam`` about the origin, around the camera's own up axis."""
    if n < 2:
        raise ValueError("orbit needs n >= 2")
    up = -cam.rotation[1]
    return Trajectory([rotate_about_origin(cam, up, 2.0 * np.pi * k / n) for k in range(n)], "orbit")


def _allocate(lengths: np.ndarray, total: int) -> np.ndarray:
    """Split ``total`` samples across segments proportionally, at least one each."""
    k = len(lengths)
    share = lengths / lengths.sum() * (total - k) if lengths.sum() > 0 else np.full(k, (total - k) / k)
    base = np.floor(share).astype(int)
    rest = total - k - base.sum()
    order = np.argsort(-(share - base), kind="stable")
    base[order[:rest]] += 1
    return base + 1


def spline_trajectory(key_cams: list, multiplier: int = 3, base_density: int = 80) -> Trajectory:
    """Chord-length cubic spline through key centers with slerped orientations.

    Produces ``multiplier * base_density`` cameras; every key pose appears
    exactly at its knot.
    """
    if len(key_cams) < 2:
        raise InsufficientViewsError("spline trajectory needs at least 2 key cameras")
    total = int(multiplier) * int(base_density)
    k = len(key_cams)
    if total < k:
        raise ValueError(f"{total} views cannot include {k} knots")
    centers = np.stack([c.center for c in key_cams])
    seg = np.linalg.norm(np.diff(centers, axis=0), axis=1)
    if np.all(seg < 1e-12):
        seg = np.ones(k - 1)
    seg = np.maximum(seg, 1e-9 * seg.max())
    knots = np.concatenate([[0.0], np.cumsum(seg)])
    counts = _allocate(seg, total - 1)
    params, knot_index = [], {}
    for j in range(k - 1):
        knot_index[len(params)] = j
        params.extend(np.linspace(knots[j], knots[j + 1], counts[j] + 1)[:-1])
    knot_index[len(params)] = k - 1
    params.append(knots[-1])
    params = np.asarray(params)
    spline = CubicSpline(knots, centers, bc_type="natural")
    slerp = Slerp(knots, Rotation.from_matrix(np.stack([c.rotation for c in key_cams])))
    pos = spline(params)
    rots = slerp(params).as_matrix()
    ref = key_cams[0]
    cams = []
    for i, (c, R) in enumerate(zip(pos, rots)):
        if i in knot_index:
            cams.append(key_cams[knot_index[i]])
            continue
        R = orthonormalize(R)
        cams.append(Camera(R, -R @ c, ref.focal, ref.principal_point, ref.resolution))
    return Trajectory(cams, "spline")


# -- loss terms ---------------------------------------------------------------

ACCUM_EPS = 1e-6


def accumulation_loss(alpha, entropy_sign: str = "printed", eps: float = ACCUM_EPS) -> float:
    """Mean of BCE(alpha, 0.5) plus an entropy term.

    ``printed`` uses -a ln a + (1 - a) ln(1 - a); ``corrected`` uses the
    symmetric binary entropy -a ln a - (1 - a) ln(1 - a).
    """
    a = np.clip(np.asarray(alpha, dtype=np.float64), eps, 1.0 - eps)
    la, lb = np.log(a), np.log1p(-a)
    bce = -0.5 * la - 0.5 * lb
    if entropy_sign == "printed":
        ent = -a * la + (1.0 - a) * lb
    elif entropy_sign == "corrected":
        ent = -a * la - (1.0 - a) * lb
    else:
        raise ValueError(f"entropy_sign must be 'printed' or 'corrected', got {entropy_sign!r}")
    return float(np.mean(bce + ent))


def accumulation_loss_grad(alpha, entropy_sign: str = "printed", eps: float = ACCUM_EPS) -> np.ndarray:
    """Analytic gradient of :func:`accumulation_loss` (zero where clamping is active)."""
    raw = np.asarray(alpha, dtype=np.float64)
    a = np.clip(raw, eps, 1.0 - eps)
    g = -0.5 / a + 0.5 / (1.0 - a) - np.log(a)
    if entropy_sign == "printed":
        g = g - np.log1p(-a) - 2.0
    elif entropy_sign == "corrected":
        g = g + np.log1p(-a)
    else:
        raise ValueError(f"entropy_sign must be 'printed' or 'corrected', got {entropy_sign!r}")
    inside = (raw >= eps) & (raw <= 1.0 - eps)
    return np.where(inside, g, 0.0) / raw.size


@dataclass
class LossWeights:
    w_l1: float = 1.0
    w_ssim: float = 0.2
    w_lpips: float = 10.0
    w_mask: float = 5.0
    w_accum: float = 5.0
    w_depth: float = 0.0
    w_rel_depth: float = 0.0
    input_view_l1_boost: float = 10.0
    minibatch: int = 10
    rank_pairs: int = 4096
    rank_margin: float = 1e-4

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be >= 0")

    @classmethod
    def monocular(cls) -> "LossWeights":
        return cls()

    @classmethod
    def sparse_view(cls) -> "LossWeights":
        return cls(w_accum=0.5, w_depth=10.0, w_rel_depth=20.0, input_view_l1_boost=20.0, minibatch=5)


def _bce(p, g, eps=ACCUM_EPS):
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    return float(np.mean(-(xlogy(g, np.clip(p, eps, 1.0)) + xlogy(1.0 - g, np.clip(1.0 - p, eps, 1.0)))))


def ranking_loss(pred, gt, valid, n_pairs: int = 4096, margin: float = 1e-4, seed: int = 0) -> float:
    """Pairwise ordinal hinge max(0, -sign(g_a - g_b)(p_a - p_b) + m) over sampled valid pairs."""
    p = np.asarray(pred, dtype=np.float64)[valid]
    g = np.asarray(gt, dtype=np.float64)[valid]
    if p.size < 2:
        return 0.0
    rng = np.random.default_rng(seed)
    a = rng.integers(0, p.size, n_pairs)
    b = rng.integers(0, p.size, n_pairs)
    sgn = np.sign(g[a] - g[b])
    keep = sgn != 0
    if not keep.any():
        return 0.0
    return float(np.mean(np.maximum(0.0, -sgn[keep] * (p[a] - p[b])[keep] + margin)))


def weighted_photometric_loss(
    pred_rgb,
    gt_rgb,
    pred_alpha,
    gt_mask,
    weights: LossWeights,
    pred_depth=None,
    gt_depth=None,
    depth_valid=None,
    is_input=None,
    entropy_sign: str = "printed",
    seed: int = 0,
) -> tuple[float, dict]:
    """Weighted sum of the splatting loss terms over a minibatch of views.

    Images are (N, H, W, 3), alpha/mask/depth (N, H, W). The LPIPS term needs
    a pretrained network and always contributes 0. Returns the total and the
    weighted per-term breakdown, which sums to the total.
    """
    pred_rgb = np.asarray(pred_rgb, dtype=np.float64)
    gt_rgb = np.asarray(gt_rgb, dtype=np.float64)
    if pred_rgb.shape != gt_rgb.shape or pred_rgb.ndim != 4:
        raise ShapeError(f"rgb shapes differ or are not (N, H, W, 3): {pred_rgb.shape} vs {gt_rgb.shape}")
    n = pred_rgb.shape[0]
    pred_alpha = np.asarray(pred_alpha, dtype=np.float64)
    gt_mask = np.asarray(gt_mask, dtype=np.float64)
    if pred_alpha.shape != pred_rgb.shape[:3] or gt_mask.shape != pred_alpha.shape:
        raise ShapeError("alpha and mask must be (N, H, W) matching the images")
    boost = np.ones(n) if is_input is None else np.where(np.asarray(is_input, bool), weights.input_view_l1_boost, 1.0)
    l1 = float(np.mean(boost * np.abs(pred_rgb - gt_rgb).mean(axis=(1, 2, 3))))
    s = float(np.mean([ssim(pred_rgb[i], gt_rgb[i]) for i in range(n)]))
    terms = {
        "l1": weights.w_l1 * l1,
        "ssim": weights.w_ssim * (1.0 - s),
        "lpips": 0.0,
        "mask": weights.w_mask * _bce(pred_alpha, gt_mask),
        "accum": weights.w_accum * accumulation_loss(pred_alpha, entropy_sign) if weights.w_accum else 0.0,
        "depth": 0.0,
        "rel_depth": 0.0,
    }
    if pred_depth is not None and gt_depth is not None and (weights.w_depth or weights.w_rel_depth):
        pd = np.asarray(pred_depth, dtype=np.float64)
        gd = np.asarray(gt_depth, dtype=np.float64)
        if pd.shape != gd.shape:
            raise ShapeError(f"depth shapes differ: {pd.shape} vs {gd.shape}")
        valid = np.ones(gd.shape, bool) if depth_valid is None else np.asarray(depth_valid, bool)
        if valid.any():
            terms["depth"] = weights.w_depth * float(np.mean(np.abs(pd - gd)[valid]))
            terms["rel_depth"] = weights.w_rel_depth * ranking_loss(pd, gd, valid, weights.rank_pairs, weights.rank_margin, seed)
    total = 0.0
    for v in terms.values():
        total += v
    return total, terms


# -- initialization -----------------------------------------------------------


def fuse_scene(scene, statistic: str = "median", pix_thresh: float = 1.0, depth_thresh: float = 0.01):
    """Filter and fuse every view with valid depth; returns (view ids with fused depths, cloud)."""
    views = [v for v in scene.views if v.depth is not None and v.depth.valid.any()]
    if not views:
        raise EmptyCloudError("no view has valid depth; nothing to initialize from")
    depths = [v.depth for v in views]
    cams = [v.camera for v in views]
    if len(views) >= 2:
        filtered = geometric_filter(depths, cams, pix_thresh, depth_thresh)
        fused = geometric_fusion(filtered, cams, statistic, pix_thresh, depth_thresh)
    else:
        fused = depths
    cloud = PointCloud.concatenate([backproject(d, v.camera, v.rgb) for d, v in zip(fused, views)])
    if len(cloud.points) == 0:
        raise EmptyCloudError("geometric filtering removed every point")
    return [(v.view_id, d) for v, d in zip(views, fused)], cloud


def init_package(scene, out_dir=None, statistic: str = "median", pix_thresh: float = 1.0, depth_thresh: float = 0.01):
    """Fused point cloud from every view with valid depth, plus the scene's trajectory.

    ``scene`` is a ``SceneData`` or a package directory. With ``out_dir`` the
    cloud is written to ``init.ply`` there. Returns (PointCloud, Trajectory or None).
    """
    from .synthscene import read_scene

    traj = None
    if isinstance(scene, (str, Path)):
        root = Path(scene)
        if (root / "trajectory.json").exists():
            traj = Trajectory.read(root / "trajectory.json")
        scene = read_scene(root)
    _, cloud = fuse_scene(scene, statistic, pix_thresh, depth_thresh)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_ply(out / "init.ply", cloud.points, cloud.colors)
    return cloud, traj
