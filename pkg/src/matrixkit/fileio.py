"""Readers and writers for PFM depth, PGM masks, PLY point clouds and PNG images."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import SceneIOError


def write_pfm(path, data: np.ndarray) -> None:
    """Single-channel little-endian PFM (scale -1.0, rows stored bottom-up)."""
    data = np.asarray(data, dtype="<f4")
    if data.ndim != 2:
        raise ValueError("write_pfm expects a 2-D array")
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n%d %d\n-1.0\n" % (w, h))
        f.write(np.flipud(data).tobytes())


def read_pfm(path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise SceneIOError(path, f"cannot read: {exc.strerror or exc}") from exc
    m = re.match(rb"(Pf|PF)\s+(\d+)\s+(\d+)\s+(-?[\d.eE+-]+)\s", raw)
    if m is None:
        raise SceneIOError(path, "not a PFM file (bad header)")
    if m.group(1) != b"Pf":
        raise SceneIOError(path, "only single-channel PFM is supported")
    w, h, scale = int(m.group(2)), int(m.group(3)), float(m.group(4))
    dtype = "<f4" if scale < 0 else ">f4"
    body = raw[m.end():]
    if len(body) < w * h * 4:
        raise SceneIOError(path, f"truncated PFM: expected {w * h * 4} data bytes, found {len(body)}")
    data = np.frombuffer(body[: w * h * 4], dtype=dtype).reshape(h, w)
    return np.flipud(data).astype(np.float32)


def write_pgm(path, mask: np.ndarray) -> None:
    """Binary P5 mask, 255 = valid."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write((mask.astype(np.uint8) * 255).tobytes())


def read_pgm(path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise SceneIOError(path, f"cannot read: {exc.strerror or exc}") from exc
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise SceneIOError(path, "not a binary PGM file (bad header)")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise SceneIOError(path, f"unsupported PGM maxval {maxval}")
    body = raw[m.end():]
    if len(body) < w * h:
        raise SceneIOError(path, f"truncated PGM: expected {w * h} data bytes, found {len(body)}")
    return np.frombuffer(body[: w * h], dtype=np.uint8).reshape(h, w) > 127


_PLY_FLOAT = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4")])
_PLY_COLOR = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1")])


def write_ply(path, points: np.ndarray, colors: np.ndarray | None = None) -> None:
    """Binary little-endian PLY with float32 xyz and optional uchar rgb (colors in [0, 1])."""
    points = np.asarray(points).reshape(-1, 3)
    n = len(points)
    dtype = _PLY_COLOR if colors is not None else _PLY_FLOAT
    rec = np.empty(n, dtype=dtype)
    rec["x"], rec["y"], rec["z"] = points[:, 0], points[:, 1], points[:, 2]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += ["property float x", "property float y", "property float z"]
    if colors is not None:
        c = np.clip(np.round(np.asarray(colors).reshape(-1, 3) * 255.0), 0, 255).astype(np.uint8)
        rec["red"], rec["green"], rec["blue"] = c[:, 0], c[:, 1], c[:, 2]
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rec.tobytes())


def read_ply(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Returns (float32 points (N, 3), colors in [0, 1] or None)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise SceneIOError(path, f"cannot read: {exc.strerror or exc}") from exc
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise SceneIOError(path, "not a PLY file")
    header = raw[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise SceneIOError(path, "only binary little-endian PLY is supported")
    n = next(int(line.split()[2]) for line in header if line.startswith("element vertex"))
    has_color = "property uchar red" in header
    dtype = _PLY_COLOR if has_color else _PLY_FLOAT
    body = raw[end + len(b"end_header\n"):]
    if len(body) < n * dtype.itemsize:
        raise SceneIOError(path, "truncated PLY body")
    rec = np.frombuffer(body[: n * dtype.itemsize], dtype=dtype)
    pts = np.stack([rec["x"], rec["y"], rec["z"]], -1)
    colors = None
    if has_color:
        colors = np.stack([rec["red"], rec["green"], rec["blue"]], -1).astype(np.float64) / 255.0
    return pts, colors


def write_png(path, rgb: np.ndarray) -> None:
    """Float RGB in [0, 1] -> 8-bit PNG."""
    arr = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG", optimize=False)


def read_png(path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise SceneIOError(path, f"cannot decode PNG: {exc}") from exc
    return arr.astype(np.float64) / 255.0
