"""Cameras, Plücker ray maps and scene/camera normalization.

Conventions: right-handed world, camera looks down +z with x right and y
down, and ``x_cam = R @ x_world + t``. Pixel (row i, col j) of any grid is
sampled at its center ``((j + 0.5) * W / gw, (i + 0.5) * H / gh)`` in image
coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateRayMapError, DegenerateSceneError, InvalidCameraError, InvalidDepthError

ORTHO_TOL = 1e-9
_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True, eq=False)
class Camera:
    rotation: np.ndarray
    translation: np.ndarray
    focal: float
    principal_point: np.ndarray
    resolution: tuple[int, int]  # (width, height)

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        pp = np.asarray(self.principal_point, dtype=np.float64).reshape(2)
        w, h = (int(v) for v in self.resolution)
        focal = float(self.focal)
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise InvalidCameraError("non-finite rotation or translation")
        if np.abs(R.T @ R - np.eye(3)).max() >= ORTHO_TOL or np.linalg.det(R) <= 0:
            raise InvalidCameraError("rotation is not a proper orthonormal matrix")
        if not np.isfinite(focal) or focal <= 0:
            raise InvalidCameraError(f"focal must be positive, got {focal}")
        if w <= 0 or h <= 0:
            raise InvalidCameraError(f"resolution must be positive, got {(w, h)}")
        if not (0 <= pp[0] <= w and 0 <= pp[1] <= h):
            raise InvalidCameraError(f"principal point {pp.tolist()} outside {(w, h)} image")
        R.flags.writeable = False
        t.flags.writeable = False
        pp.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "principal_point", pp)
        object.__setattr__(self, "focal", focal)
        object.__setattr__(self, "resolution", (w, h))

    @property
    def width(self) -> int:
        return self.resolution[0]

    @property
    def height(self) -> int:
        return self.resolution[1]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def forward(self) -> np.ndarray:
        """Principal axis direction in world coordinates."""
        return self.rotation[2].copy()

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [
                [self.focal, 0.0, self.principal_point[0]],
                [0.0, self.focal, self.principal_point[1]],
                [0.0, 0.0, 1.0],
            ]
        )

    def replace(self, **changes) -> "Camera":
        fields = dict(
            rotation=self.rotation,
            translation=self.translation,
            focal=self.focal,
            principal_point=self.principal_point,
            resolution=self.resolution,
        )
        fields.update(changes)
        return Camera(**fields)

    def rescaled(self, resolution: tuple[int, int]) -> "Camera":
        """Same pose, intrinsics rescaled to another image resolution."""
        s = resolution[0] / self.width
        if abs(resolution[1] / self.height - s) > 1e-12:
            raise InvalidCameraError("rescaling must preserve the aspect ratio")
        return self.replace(focal=self.focal * s, principal_point=self.principal_point * s, resolution=resolution)

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World points (..., 3) -> (pixel coords (..., 2), camera-frame depth (...))."""
        pc = points @ self.rotation.T + self.translation
        z = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = self.focal * pc[..., :2] / z[..., None] + self.principal_point
        return uv, z

    def to_dict(self) -> dict:
        return {
            "rotation": self.rotation.reshape(-1).tolist(),
            "translation": self.translation.tolist(),
            "focal": self.focal,
            "principal_point": self.principal_point.tolist(),
            "resolution": list(self.resolution),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            rotation=np.array(d["rotation"], dtype=np.float64).reshape(3, 3),
            translation=np.array(d["translation"], dtype=np.float64),
            focal=float(d["focal"]),
            principal_point=np.array(d["principal_point"], dtype=np.float64),
            resolution=tuple(int(v) for v in d["resolution"]),
        )


def identity_camera(focal: float, resolution: tuple[int, int]) -> Camera:
    """The normalized reference camera: R = I, t = [0, 0, 1]."""
    w, h = resolution
    return Camera(np.eye(3), np.array([0.0, 0.0, 1.0]), focal, np.array([w / 2.0, h / 2.0]), (w, h))


def look_at(center, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """World->camera (R, t) for a camera at ``center`` looking at ``target``."""
    center = np.asarray(center, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - center
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        # looking along the up axis; any perpendicular works
        alt = np.array([0.0, 1.0, 0.0]) if abs(fwd[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
        right = np.cross(fwd, alt)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return R, -R @ center


def pixel_centers(grid: tuple[int, int], resolution: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Image coordinates (u, v), each (gh, gw), of the cell centers of a grid."""
    gw, gh = grid
    w, h = resolution
    u = (np.arange(gw) + 0.5) * (w / gw)
    v = (np.arange(gh) + 0.5) * (h / gh)
    return np.meshgrid(u, v)


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle (radians) of a rotation matrix."""
    c = (np.trace(R) - 1.0) / 2.0
    s = np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    return float(np.arctan2(s, c))


def rotation_error(Ra: np.ndarray, Rb: np.ndarray) -> float:
    return rotation_angle(Ra @ Rb.T)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def orthonormalize(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


# -- ray maps -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RayMap:
    directions: np.ndarray  # (H, W, 3), unit
    moments: np.ndarray  # (H, W, 3), center x direction

    @property
    def width(self) -> int:
        return self.directions.shape[1]

    @property
    def height(self) -> int:
        return self.directions.shape[0]

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.directions, self.moments], axis=-1)

    @classmethod
    def from_array(cls, a: np.ndarray) -> "RayMap":
        a = np.asarray(a, dtype=np.float64)
        return cls(a[..., :3].copy(), a[..., 3:6].copy())


def camera_to_raymap(cam: Camera, grid: tuple[int, int]) -> RayMap:
    """Per-cell Plücker rays (direction, center x direction) of ``cam``."""
    gw, gh = grid
    if gw < 1 or gh < 1:
        raise ValueError(f"grid must be at least 1x1, got {grid}")
    u, v = pixel_centers(grid, cam.resolution)
    d_cam = np.stack([(u - cam.principal_point[0]) / cam.focal, (v - cam.principal_point[1]) / cam.focal, np.ones_like(u)], -1)
    d = d_cam @ cam.rotation  # rows: R^T d_cam
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    m = np.cross(cam.center, d)
    return RayMap(d, m)


def regularize_rays(directions: np.ndarray, moments: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Renormalize directions and drop the moment component along them."""
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    m = np.asarray(moments, dtype=np.float64).reshape(-1, 3)
    norm = np.linalg.norm(d, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise DegenerateRayMapError("zero-length ray direction")
    d = d / norm
    m = m - np.sum(m * d, axis=-1, keepdims=True) * d
    return d, m


def lines_closest_point(points: np.ndarray, dirs: np.ndarray, rcond: float = 1e-10) -> np.ndarray:
    """Least-squares point minimizing the summed squared distance to lines."""
    P = np.eye(3)[None] - dirs[:, :, None] * dirs[:, None, :]
    A = P.sum(0)
    b = np.einsum("nij,nj->i", P, points)
    ev = np.linalg.eigvalsh(A)
    if ev[0] <= rcond * max(ev[-1], 1e-300):
        raise DegenerateRayMapError("rays are (nearly) parallel; intersection is undetermined")
    return np.linalg.solve(A, b)


def _canonical_dirs(u: np.ndarray, v: np.ndarray, pp: np.ndarray, focal: float) -> np.ndarray:
    c = np.stack([(u - pp[0]) / focal, (v - pp[1]) / focal, np.ones_like(u)], -1)
    return c / np.linalg.norm(c, axis=-1, keepdims=True)


def _procrustes(world: np.ndarray, canon: np.ndarray) -> tuple[np.ndarray, float]:
    """Rotation R minimizing sum ||R w - c||^2 and the residual."""
    M = canon.T @ world
    U, S, Vt = np.linalg.svd(M)
    sign = np.sign(np.linalg.det(U @ Vt))
    R = U @ np.diag([1.0, 1.0, sign]) @ Vt
    resid = 2.0 * len(world) - 2.0 * (S[0] + S[1] + sign * S[2])
    return R, resid


def recover_camera(
    rm: RayMap,
    focal_hint: float | None = None,
    resolution: tuple[int, int] | None = None,
    principal_point=None,
    focal_range: tuple[float, float] = (0.2, 5.0),
    tol: float = 1e-10,
) -> Camera:
    """Camera whose ray map best explains ``rm``.

    Center: least-squares intersection of all rays. Rotation: orthogonal
    Procrustes between canonical pixel directions and observed directions.
    Without ``focal_hint`` the focal is found by golden-section search of
    the Procrustes residual over ``focal_range`` (multiples of the width).
    """
    resolution = tuple(resolution) if resolution is not None else (rm.width, rm.height)
    w, h = resolution
    pp = np.array([w / 2.0, h / 2.0]) if principal_point is None else np.asarray(principal_point, dtype=np.float64)
    d, m = regularize_rays(rm.directions, rm.moments)
    center = lines_closest_point(np.cross(d, m), d)

    u, v = pixel_centers((rm.width, rm.height), resolution)
    u, v = u.reshape(-1), v.reshape(-1)

    if focal_hint is None:
        focal = _search_focal(d, u - pp[0], v - pp[1], focal_range[0] * w, focal_range[1] * w, tol)
    else:
        focal = float(focal_hint)
    R, _ = _procrustes(d, _canonical_dirs(u, v, pp, focal))
    return Camera(R, -R @ center, focal, pp, resolution)


def _search_focal(d, du, dv, lo, hi, tol, n_coarse=24):
    """Coarse log-spaced bracketing of the Procrustes residual, then golden section."""
    grid = np.geomspace(lo, hi, n_coarse)
    c = np.stack([du[None] / grid[:, None], dv[None] / grid[:, None], np.ones((n_coarse, du.size))], -1)
    c /= np.linalg.norm(c, axis=-1, keepdims=True)
    S = np.linalg.svd(np.einsum("gni,nj->gij", c, d), compute_uv=False)
    vals = -S.sum(-1)  # reflections are impossible for near-correct focal
    k = int(np.argmin(vals))

    def fn(f):
        cc = np.stack([du / f, dv / f, np.ones_like(du)], -1)
        cc /= np.linalg.norm(cc, axis=-1, keepdims=True)
        return _procrustes_residual(cc.T @ d, len(d))

    return _golden_search(fn, grid[max(k - 1, 0)], grid[min(k + 1, n_coarse - 1)], tol)


def _procrustes_residual(M, n):
    U, S, Vt = np.linalg.svd(M)
    sign = np.sign(np.linalg.det(U @ Vt))
    return 2.0 * n - 2.0 * (S[0] + S[1] + sign * S[2])


def _golden_search(fn, a: float, b: float, tol: float) -> float:
    """Golden-section minimization of a unimodal function on [a, b]."""
    c = b - _GOLDEN * (b - a)
    e = a + _GOLDEN * (b - a)
    fc, fe = fn(c), fn(e)
    while (b - a) > tol * (abs(a) + abs(b)):
        if fc < fe:
            b, e, fe = e, c, fc
            c = b - _GOLDEN * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, e, fe
            e = a + _GOLDEN * (b - a)
            fe = fn(e)
        if b - a < 1e-14:
            break
    return 0.5 * (a + b)


# -- normalization ------------------------------------------------------------

NORMALIZATION_MODES = ("ray-intersection", "first-view-depth-median", "max-camera-distance")


@dataclass(frozen=True, eq=False)
class NormalizationSpec:
    """World similarity ``x' = scale * (x - origin)``."""

    mode: str
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        if self.mode not in NORMALIZATION_MODES:
            raise ValueError(f"unknown normalization mode {self.mode!r}")
        s = float(self.scale)
        if not np.isfinite(s) or s <= 0:
            raise DegenerateSceneError(f"normalization scale must be positive and finite, got {s}")
        object.__setattr__(self, "scale", s)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))

    def apply(self, cam: Camera) -> Camera:
        t = self.scale * (cam.translation + cam.rotation @ self.origin)
        return cam.replace(translation=t)

    def invert(self, cam: Camera) -> Camera:
        t = cam.translation / self.scale - cam.rotation @ self.origin
        return cam.replace(translation=t)

    def apply_points(self, pts: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(pts) - self.origin)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "origin": self.origin.tolist(), "scale": self.scale}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationSpec":
        return cls(d["mode"], np.array(d["origin"], dtype=np.float64), float(d["scale"]))


def normalize_scene(cams: list[Camera], depths=None, mode: str = "ray-intersection"):
    """Pick origin and scale per ``mode``; return the spec and transformed cameras."""
    centers = np.stack([c.center for c in cams])
    if mode == "ray-intersection":
        if len(cams) < 2:
            raise DegenerateSceneError("ray-intersection normalization needs at least 2 cameras")
        dirs = np.stack([c.forward for c in cams])
        try:
            origin = lines_closest_point(centers, dirs)
        except DegenerateRayMapError as exc:
            raise DegenerateSceneError("principal rays are parallel") from exc
        scale = 1.0 / np.mean(np.linalg.norm(centers - origin, axis=1))
    elif mode == "first-view-depth-median":
        if not depths:
            raise InvalidDepthError("first-view-depth-median needs a depth map for view 0")
        d0 = depths[0]
        vals = np.asarray(d0.depth)[np.asarray(d0.valid, dtype=bool)]
        if vals.size == 0:
            raise InvalidDepthError("view 0 has no valid depth")
        origin = np.zeros(3)
        scale = 1.0 / float(np.median(vals))
    elif mode == "max-camera-distance":
        origin = centers.mean(0)
        dmax = np.linalg.norm(centers - origin, axis=1).max()
        if dmax <= 0:
            raise DegenerateSceneError("all camera centers coincide")
        scale = 1.0 / dmax
    else:
        raise ValueError(f"unknown normalization mode {mode!r}")
    spec = NormalizationSpec(mode, origin, scale)
    return spec, [spec.apply(c) for c in cams]


def camera_normalization_transform(ref: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Rigid world transform ``x' = A x + b`` that maps ``ref`` to (I, [0,0,1])."""
    return ref.rotation.copy(), ref.translation - np.array([0.0, 0.0, 1.0])


def normalize_cameras(cams: list[Camera]) -> list[Camera]:
    """Re-express all cameras so view 0 is (I, [0,0,1]); relative poses are kept."""
    if not cams:
        raise ValueError("normalize_cameras needs at least one camera")
    A, b = camera_normalization_transform(cams[0])
    out = [cams[0].replace(rotation=np.eye(3), translation=np.array([0.0, 0.0, 1.0]))]
    for c in cams[1:]:
        R = c.rotation @ A.T
        out.append(c.replace(rotation=R, translation=c.translation - R @ b))
    return out
