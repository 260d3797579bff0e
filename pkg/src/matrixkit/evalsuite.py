"""Pose, depth, image and point-cloud metrics."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d
from scipy.spatial import cKDTree

from .errors import DegenerateSceneError, EmptyCloudError, NoOverlapError, ShapeError

PSNR_CAP = 99.0
TAU_RATIO = 1.03


# -- poses --------------------------------------------------------------------


def _check_pair_lists(pred, gt):
    if len(pred) != len(gt):
        raise ShapeError(f"prediction has {len(pred)} cameras, ground truth {len(gt)}")
    if len(gt) < 2:
        raise ShapeError("need at least 2 cameras")


def relative_rotation_errors(pred, gt) -> np.ndarray:
    """Geodesic angle (degrees) of (Rp_i Rp_j^T)(Rg_i Rg_j^T)^T over ordered pairs i != j."""
    _check_pair_lists(pred, gt)
    Rp = np.stack([c.rotation for c in pred])
    Rg = np.stack([c.rotation for c in gt])
    rel_p = np.einsum("iab,jcb->ijac", Rp, Rp)
    rel_g = np.einsum("iab,jcb->ijac", Rg, Rg)
    diff = np.einsum("ijab,ijcb->ijac", rel_p, rel_g)
    cos = np.clip((np.trace(diff, axis1=2, axis2=3) - 1.0) / 2.0, -1.0, 1.0)
    ang = np.degrees(np.arccos(cos))
    off = ~np.eye(len(pred), dtype=bool)
    return ang[off]


def relative_rotation_accuracy(pred, gt, thresh_deg: float = 15.0) -> float:
    return float(np.mean(relative_rotation_errors(pred, gt) < thresh_deg))


def umeyama(src: np.ndarray, dst: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Similarity (s, R, t) minimizing sum |s R src_i + t - dst_i|^2."""
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    var_s = (xs**2).sum() / len(src)
    cov = xd.T @ xs / len(src)
    U, S, Vt = np.linalg.svd(cov)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    s = float(np.trace(np.diag(S) @ D) / var_s) if var_s > 0 else 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t


def camera_center_errors(pred, gt) -> tuple[np.ndarray, float]:
    """Per-camera center error after similarity alignment, and the scene scale."""
    _check_pair_lists(pred, gt)
    cp = np.stack([c.center for c in pred])
    cg = np.stack([c.center for c in gt])
    scale = float(np.max(np.linalg.norm(cg - cg.mean(0), axis=1)))
    if scale <= 1e-12:
        raise DegenerateSceneError("ground-truth camera centers coincide")
    s, R, t = umeyama(cp, cg)
    aligned = s * cp @ R.T + t
    return np.linalg.norm(aligned - cg, axis=1), scale


def camera_center_accuracy(pred, gt, thresh: float = 0.1) -> float:
    err, scale = camera_center_errors(pred, gt)
    return float(np.mean(err < thresh * scale))


# -- depth --------------------------------------------------------------------

DEPTH_METRICS = ("AbsRel", "log10", "RMS", "delta1", "delta2", "delta3", "rel", "tau")


def depth_metrics(pred, gt) -> dict:
    """Standard depth errors over pixels valid in both maps."""
    if pred.depth.shape != gt.depth.shape:
        raise ShapeError(f"depth shapes differ: {pred.depth.shape} vs {gt.depth.shape}")
    joint = pred.valid & gt.valid
    if not joint.any():
        raise NoOverlapError("prediction and ground truth share no valid pixel")
    p = pred.depth[joint].astype(np.float64)
    g = gt.depth[joint].astype(np.float64)
    ratio = np.maximum(p / g, g / p)
    absrel = float(np.mean(np.abs(p - g) / g))
    return {
        "AbsRel": absrel,
        "log10": float(np.mean(np.abs(np.log10(p) - np.log10(g)))),
        "RMS": float(np.sqrt(np.mean((p - g) ** 2))),
        "delta1": float(np.mean(ratio < 1.25)),
        "delta2": float(np.mean(ratio < 1.25**2)),
        "delta3": float(np.mean(ratio < 1.25**3)),
        "rel": absrel * 100.0,
        "tau": float(np.mean(ratio < TAU_RATIO)),
    }


# -- images -------------------------------------------------------------------


def _check_images(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"image shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def psnr(pred, gt) -> float:
    """Peak 1.0; identical images report the 99 dB cap."""
    pred, gt = _check_images(pred, gt)
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, -10.0 * np.log10(mse)))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    """Separable weighted window sums over fully-contained windows only."""
    half = len(win) // 2
    out = correlate1d(img, win, axis=0, mode="constant")
    out = correlate1d(out, win, axis=1, mode="constant")
    return out[half : img.shape[0] - half, half : img.shape[1] - half]


def ssim(pred, gt, k1: float = 0.01, k2: float = 0.03, size: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over valid windows (data range 1), averaged over channels."""
    pred, gt = _check_images(pred, gt)
    if pred.shape[0] < size or pred.shape[1] < size:
        raise ShapeError(f"images must be at least {size}x{size} for SSIM")
    if pred.ndim == 2:
        pred, gt = pred[..., None], gt[..., None]
    c1, c2 = k1**2, k2**2
    win = gaussian_window(size, sigma)
    vals = []
    for ch in range(pred.shape[2]):
        x, y = pred[..., ch], gt[..., ch]
        mx, my = _filter_valid(x, win), _filter_valid(y, win)
        sxx = _filter_valid(x * x, win) - mx * mx
        syy = _filter_valid(y * y, win) - my * my
        sxy = _filter_valid(x * y, win) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def image_metrics(pred, gt) -> dict:
    return {"PSNR": psnr(pred, gt), "SSIM": ssim(pred, gt)}


# -- point clouds -------------------------------------------------------------


def pointcloud_metrics(pred, gt) -> dict:
    """Accuracy (pred -> gt), completeness (gt -> pred) and their mean."""
    p = np.asarray(getattr(pred, "points", pred), dtype=np.float64).reshape(-1, 3)
    g = np.asarray(getattr(gt, "points", gt), dtype=np.float64).reshape(-1, 3)
    if len(p) == 0 or len(g) == 0:
        raise EmptyCloudError("point-cloud metrics need two non-empty clouds")
    acc = float(np.mean(cKDTree(g).query(p, k=1)[0]))
    comp = float(np.mean(cKDTree(p).query(g, k=1)[0]))
    return {"accuracy": acc, "completeness": comp, "overall": (acc + comp) / 2.0}
