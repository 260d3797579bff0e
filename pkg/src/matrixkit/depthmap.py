"""Depth maps with validity masks: disparity codec, back-projection,
cross-view reprojection, and geometric consistency filtering/fusion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientViewsError, ShapeError
from .geometry import Camera, pixel_centers


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Camera-frame z depths. Invalid pixels always hold 0 with mask False."""

    depth: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        depth = np.asarray(self.depth)
        if not np.issubdtype(depth.dtype, np.floating):
            depth = depth.astype(np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if depth.ndim != 2 or valid.shape != depth.shape:
            raise ShapeError(f"depth {depth.shape} and mask {valid.shape} must be equal 2-D shapes")
        with np.errstate(invalid="ignore"):
            valid = valid & np.isfinite(depth) & (depth > 0)
        depth = np.where(valid, depth, 0).astype(depth.dtype)
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "valid", valid)

    @classmethod
    def from_depth(cls, depth) -> "DepthMap":
        """Mask inferred from the values: finite and positive."""
        depth = np.asarray(depth)
        return cls(depth, np.ones(depth.shape, dtype=bool))

    @classmethod
    def invalid(cls, width: int, height: int) -> "DepthMap":
        return cls(np.zeros((height, width), np.float32), np.zeros((height, width), bool))

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def height(self) -> int:
        return self.depth.shape[0]


@dataclass(frozen=True, eq=False)
class DisparityMap:
    disparity: np.ndarray
    valid: np.ndarray
    shift: float = 0.0
    scale: float = 1.0

    @property
    def width(self) -> int:
        return self.disparity.shape[1]

    @property
    def height(self) -> int:
        return self.disparity.shape[0]


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray  # (N, 3)
    colors: np.ndarray | None = None  # (N, 3) in [0, 1]

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud has non-finite coordinates")
        object.__setattr__(self, "points", pts)
        if self.colors is not None:
            object.__setattr__(self, "colors", np.asarray(self.colors, dtype=np.float64).reshape(-1, 3))

    def __len__(self) -> int:
        return len(self.points)

    @staticmethod
    def concatenate(clouds: list["PointCloud"]) -> "PointCloud":
        pts = np.concatenate([c.points for c in clouds]) if clouds else np.zeros((0, 3))
        if clouds and all(c.colors is not None for c in clouds):
            return PointCloud(pts, np.concatenate([c.colors for c in clouds]))
        return PointCloud(pts)


# -- disparity codec ----------------------------------------------------------


def encode_disparity(d: DepthMap, shift: float = 0.0, scale: float = 1.0) -> DisparityMap:
    if not (np.isfinite(shift) and np.isfinite(scale)) or scale == 0:
        raise ValueError(f"invalid disparity codec shift={shift} scale={scale}")
    depth = d.depth.astype(np.float64)
    disp = np.zeros_like(depth)
    disp[d.valid] = (1.0 / depth[d.valid] - shift) / scale
    return DisparityMap(disp, d.valid.copy(), float(shift), float(scale))


def decode_disparity(dm: DisparityMap) -> DepthMap:
    inv = np.asarray(dm.disparity, dtype=np.float64) * dm.scale + dm.shift
    valid = np.asarray(dm.valid, dtype=bool) & np.isfinite(inv) & (inv > 0)
    depth = np.zeros_like(inv)
    with np.errstate(divide="ignore", over="ignore"):
        depth[valid] = 1.0 / inv[valid]
    return DepthMap(depth, valid)


# -- projection ---------------------------------------------------------------


def _grid_scale(grid: tuple[int, int], cam: Camera) -> float:
    gw, gh = grid
    if cam.width * gh != cam.height * gw:
        raise ShapeError(f"depth grid {grid} is not a uniform scaling of camera resolution {cam.resolution}")
    return cam.width / gw


def unproject(u: np.ndarray, v: np.ndarray, depth: np.ndarray, cam: Camera) -> np.ndarray:
    """Image coordinates + camera-frame depth -> world points (..., 3)."""
    x = (u - cam.principal_point[0]) / cam.focal * depth
    y = (v - cam.principal_point[1]) / cam.focal * depth
    pc = np.stack([x, y, depth], -1)
    return (pc - cam.translation) @ cam.rotation


def backproject(d: DepthMap, cam: Camera, rgb: np.ndarray | None = None) -> PointCloud:
    """One world point per valid pixel, colored from ``rgb`` when given."""
    _grid_scale((d.width, d.height), cam)
    u, v = pixel_centers((d.width, d.height), cam.resolution)
    m = d.valid
    pts = unproject(u[m], v[m], d.depth[m].astype(np.float64), cam)
    colors = None
    if rgb is not None:
        rgb = np.asarray(rgb)
        ih, iw = rgb.shape[:2]
        cols = np.clip((u[m] * iw / cam.width).astype(int), 0, iw - 1)
        rows = np.clip((v[m] * ih / cam.height).astype(int), 0, ih - 1)
        colors = rgb[rows, cols, :3].astype(np.float64)
    return PointCloud(pts, colors)


@dataclass(frozen=True, eq=False)
class Reprojection:
    """Reference pixels expressed in a source grid (pixel centers at +0.5)."""

    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    in_view: np.ndarray


def reproject(d_ref: DepthMap, cam_ref: Camera, cam_src: Camera, src_grid: tuple[int, int] | None = None) -> Reprojection:
    """Project every valid reference pixel into the source camera.

    Coordinates are returned in ``src_grid`` units (defaults to the reference
    grid size). Pixels behind the source camera or outside its image are
    flagged out-of-view.
    """
    grid = (d_ref.width, d_ref.height)
    src_grid = grid if src_grid is None else tuple(src_grid)
    _grid_scale(grid, cam_ref)
    s_src = _grid_scale(src_grid, cam_src)
    u, v = pixel_centers(grid, cam_ref.resolution)
    pts = unproject(u, v, d_ref.depth.astype(np.float64), cam_ref)
    uv, z = cam_src.project(pts)
    us, vs = uv[..., 0] / s_src, uv[..., 1] / s_src
    with np.errstate(invalid="ignore"):
        inside = (z > 0) & (us >= 0) & (us < src_grid[0]) & (vs >= 0) & (vs < src_grid[1])
    in_view = d_ref.valid & inside
    nan = np.full(u.shape, np.nan)
    return Reprojection(
        np.where(d_ref.valid, us, nan),
        np.where(d_ref.valid, vs, nan),
        np.where(d_ref.valid, z, nan),
        in_view,
    )


def sample_depth(d: DepthMap, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Depth at continuous grid coordinates.

    Bilinear in inverse depth when all four neighbors are valid (within half a
    cell of the border the nearest interior quad is extrapolated), otherwise
    the nearest pixel if it is valid; returns (values, ok).
    """
    h, w = d.depth.shape
    depth = d.depth.astype(np.float64)
    un = np.nan_to_num(u, nan=-1.0)
    vn = np.nan_to_num(v, nan=-1.0)
    near_in = (un >= 0) & (un < w) & (vn >= 0) & (vn < h)
    x = un - 0.5
    y = vn - 0.5
    x0 = np.clip(np.floor(x).astype(int), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(y).astype(int), 0, max(h - 2, 0))
    x1, y1 = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    v_ = d.valid
    quad_ok = near_in & (w >= 2) & (h >= 2) & v_[y0, x0] & v_[y0, x1] & v_[y1, x0] & v_[y1, x1]
    # interpolate inverse depth: exact for planar patches under perspective
    inv = np.where(d.valid, 1.0 / np.where(d.valid, depth, 1.0), 0.0)
    bil_inv = (
        inv[y0, x0] * (1 - fx) * (1 - fy)
        + inv[y0, x1] * fx * (1 - fy)
        + inv[y1, x0] * (1 - fx) * fy
        + inv[y1, x1] * fx * fy
    )
    quad_ok &= bil_inv > 0
    bil = np.where(quad_ok, 1.0 / np.where(quad_ok, bil_inv, 1.0), 0.0)
    xn = np.clip(np.floor(un).astype(int), 0, w - 1)
    yn = np.clip(np.floor(vn).astype(int), 0, h - 1)
    near_ok = near_in & d.valid[yn, xn]
    vals = np.where(quad_ok, bil, np.where(near_ok, depth[yn, xn], 0.0))
    return vals, quad_ok | near_ok


@dataclass(frozen=True, eq=False)
class Consistency:
    """Forward-backward check of one reference view against one source view."""

    consistent: np.ndarray  # bool (H, W)
    observed: np.ndarray  # bool: source has a valid depth at the projection
    reprojected_depth: np.ndarray  # depth in the reference frame
    pixel_error: np.ndarray
    relative_depth_error: np.ndarray


def depth_candidates(d: DepthMap, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear depth plus the four surrounding samples at continuous grid coords.

    Returns (values, ok) stacked along a leading axis of size 5. Near depth
    discontinuities the bilinear value mixes surfaces, so the consistency
    check also tries each valid neighbor on its own.
    """
    h, w = d.depth.shape
    depth = d.depth.astype(np.float64)
    x = np.nan_to_num(u, nan=-10.0) - 0.5
    y = np.nan_to_num(v, nan=-10.0) - 0.5
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    vals, oks = [], []
    for dy in (0, 1):
        for dx in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            inb = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            xc, yc = np.clip(xi, 0, w - 1), np.clip(yi, 0, h - 1)
            oks.append(inb & d.valid[yc, xc])
            vals.append(np.where(oks[-1], depth[yc, xc], 0.0))
    bil, bil_ok = sample_depth(d, u, v)
    return np.stack([bil] + vals), np.stack([bil_ok] + oks)


def check_consistency(
    d_ref: DepthMap, cam_ref: Camera, d_src: DepthMap, cam_src: Camera, pix_thresh: float = 1.0, depth_thresh: float = 0.01
) -> Consistency:
    fwd = reproject(d_ref, cam_ref, cam_src, (d_src.width, d_src.height))
    z_cand, ok = depth_candidates(d_src, fwd.u, fwd.v)
    ok &= fwd.in_view[None]
    s_src = cam_src.width / d_src.width
    s_ref = cam_ref.width / d_ref.width
    u0, v0 = pixel_centers((d_ref.width, d_ref.height), cam_ref.resolution)
    ref_depth = d_ref.depth.astype(np.float64)
    denom = np.where(d_ref.valid, ref_depth, 1.0)
    pix_err = np.full(z_cand.shape, np.inf)
    rel = np.full(z_cand.shape, np.inf)
    z_back = np.full(z_cand.shape, np.nan)
    for k in range(len(z_cand)):
        pts = unproject(fwd.u * s_src, fwd.v * s_src, np.where(ok[k], z_cand[k], 1.0), cam_src)
        uv, zb = cam_ref.project(pts)
        with np.errstate(invalid="ignore"):
            good = ok[k] & (zb > 0)
            pix_err[k] = np.where(good, np.hypot(uv[..., 0] - u0, uv[..., 1] - v0) / s_ref, np.inf)
            rel[k] = np.where(good, np.abs(zb - ref_depth) / denom, np.inf)
        z_back[k] = zb
    # candidate with the smallest threshold-normalized error
    score = np.maximum(pix_err / pix_thresh, rel / depth_thresh)
    best = np.argmin(score, axis=0)
    pick = lambda a: np.take_along_axis(a, best[None], 0)[0]
    observed = ok.any(axis=0)
    consistent = observed & (pick(score) < 1.0)
    nan = np.full(ref_depth.shape, np.nan)
    return Consistency(
        consistent,
        observed,
        np.where(observed, pick(z_back), nan),
        np.where(observed, pick(pix_err), nan),
        np.where(observed, pick(rel), nan),
    )


def _pairwise(depths, cams, pix_thresh, depth_thresh):
    if len(depths) < 2 or len(depths) != len(cams):
        raise InsufficientViewsError(f"need >= 2 views with matching cameras, got {len(depths)} depths / {len(cams)} cameras")
    if pix_thresh <= 0 or depth_thresh <= 0:
        raise ValueError("thresholds must be positive")
    for r, (d_ref, c_ref) in enumerate(zip(depths, cams)):
        checks = [
            check_consistency(d_ref, c_ref, d_src, c_src, pix_thresh, depth_thresh)
            for s, (d_src, c_src) in enumerate(zip(depths, cams))
            if s != r
        ]
        yield r, checks


def geometric_filter(
    depths: list[DepthMap], cams: list[Camera], pix_thresh: float = 1.0, depth_thresh: float = 0.01, min_consistent: int = 1
) -> list[DepthMap]:
    """Keep a pixel iff it is consistent with at least ``min_consistent`` source views."""
    out = []
    for r, checks in _pairwise(depths, cams, pix_thresh, depth_thresh):
        count = np.sum([c.consistent for c in checks], axis=0)
        keep = depths[r].valid & (count >= min_consistent)
        out.append(DepthMap(depths[r].depth, keep))
    return out


def geometric_fusion(
    depths: list[DepthMap],
    cams: list[Camera],
    statistic: str = "mean",
    pix_thresh: float = 1.0,
    depth_thresh: float = 0.01,
) -> list[DepthMap]:
    """Replace each depth by the mean/median of itself and its consistent reprojections."""
    if statistic not in ("mean", "median"):
        raise ValueError(f"statistic must be 'mean' or 'median', got {statistic!r}")
    out = []
    for r, checks in _pairwise(depths, cams, pix_thresh, depth_thresh):
        own = depths[r].depth.astype(np.float64)
        stack = np.stack([own] + [np.where(c.consistent, c.reprojected_depth, np.nan) for c in checks])
        fused = np.nanmean(stack, axis=0) if statistic == "mean" else np.nanmedian(stack, axis=0)
        valid = depths[r].valid
        out.append(DepthMap(np.where(valid, fused, 0.0).astype(depths[r].depth.dtype), valid))
    return out
