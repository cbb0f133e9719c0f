"""Rasters, the pinhole camera, bilinear sampling and image preprocessing.

Rasters are row-major and channel-last: an image is an (H, W, C) float array,
a depth map (H, W), a flow field (H, W, 2) holding (du, dv) per pixel.
Pixel (u, v) = (column, row); integer coordinates are pixel centres.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy import ndimage

from .fileio import atomic_write_bytes, atomic_write_text

MIN_DEPTH = 1e-6  # metres; nearer points are not projected
EDGE_TOL = 1e-4  # pixels; samples this close outside the frame are clamped in
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ProjectionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim == 2:
            d = d[:, :, None]
        if d.ndim != 3 or d.shape[2] not in (1, 3):
            raise ValueError(f"image must be HxW or HxWx{{1,3}}, got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("image has non-finite entries")
        object.__setattr__(self, "data", d)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def gray(self) -> np.ndarray:
        return self.data.mean(axis=2)


@dataclass(frozen=True, eq=False)
class DepthMap:
    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 2:
            raise ValueError(f"depth map must be HxW, got {d.shape}")
        if not (np.all(np.isfinite(d)) and np.all(d > 0)):
            raise ValueError("depths must be positive and finite")
        object.__setattr__(self, "data", d)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True, eq=False)
class FlowField:
    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 3 or d.shape[2] != 2:
            raise ValueError(f"flow must be HxWx2, got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("flow has non-finite entries")
        object.__setattr__(self, "data", d)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class Intrinsics:
    fu: float
    fv: float
    cu: float
    cv: float
    height: int
    width: int

    def __post_init__(self):
        if not (self.fu > 0 and self.fv > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cu < self.width and 0 <= self.cv < self.height):
            raise ValueError("principal point outside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fu, 0.0, self.cu], [0.0, self.fv, self.cv], [0.0, 0.0, 1.0]])

    def resized(self, height: int, width: int) -> "Intrinsics":
        """Intrinsics after resampling with pixel-centre alignment."""
        sx, sy = width / self.width, height / self.height
        return Intrinsics(
            self.fu * sx, self.fv * sy, (self.cu + 0.5) * sx - 0.5, (self.cv + 0.5) * sy - 0.5, height, width
        )


def pixel_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    return u, v


def backproject(u, v, depth, K: Intrinsics) -> np.ndarray:
    """Pixel coordinates plus depth -> 3D points, shape (..., 3)."""
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise ValueError("depth must be positive")
    x = (np.asarray(u, dtype=np.float64) - K.cu) / K.fu
    y = (np.asarray(v, dtype=np.float64) - K.cv) / K.fv
    return np.stack(np.broadcast_arrays(depth * x, depth * y, depth), axis=-1)


def project(p, K: Intrinsics, strict: bool = True):
    """3D points (..., 3) -> (u, v, valid).

    With ``strict`` a point at depth <= MIN_DEPTH raises; otherwise it is
    returned with valid=False and placeholder coordinates.
    """
    p = np.asarray(p, dtype=np.float64)
    z = p[..., 2]
    valid = z > MIN_DEPTH
    if strict and not np.all(valid):
        raise ProjectionError("point behind the camera or too close to the image plane")
    zs = np.where(valid, z, 1.0)
    u = K.fu * p[..., 0] / zs + K.cu
    v = K.fv * p[..., 1] / zs + K.cv
    return u, v, valid


def bilinear_sample(img, u, v):
    """Sample an (H, W[, C]) raster at continuous coordinates.

    Returns ``(values, valid)``; values has shape ``u.shape + (C,)`` (or
    ``u.shape`` for a 2-D raster). Coordinates outside [0, W-1] x [0, H-1]
    are invalid and yield 0.
    """
    data = img.data if isinstance(img, ImageBuffer) else np.asarray(img, dtype=np.float64)
    squeeze = data.ndim == 2
    if squeeze:
        data = data[:, :, None]
    h, w = data.shape[:2]
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    tol = EDGE_TOL
    valid = (u >= -tol) & (u <= w - 1 + tol) & (v >= -tol) & (v <= h - 1 + tol)
    uc = np.clip(np.where(valid, u, 0.0), 0, w - 1)
    vc = np.clip(np.where(valid, v, 0.0), 0, h - 1)
    u0 = np.floor(uc).astype(np.intp)
    v0 = np.floor(vc).astype(np.intp)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    a = (uc - u0)[..., None]
    b = (vc - v0)[..., None]
    out = (
        data[v0, u0] * (1 - a) * (1 - b)
        + data[v0, u1] * a * (1 - b)
        + data[v1, u0] * (1 - a) * b
        + data[v1, u1] * a * b
    )
    out = np.where(valid[..., None], out, 0.0)
    return (out[..., 0] if squeeze else out), valid


def image_gradient(img) -> tuple[np.ndarray, np.ndarray]:
    """Central differences inside, one-sided differences on the border."""
    data = img.data if isinstance(img, ImageBuffer) else np.asarray(img, dtype=np.float64)
    if data.shape[0] < 3 or data.shape[1] < 3:
        raise ValueError(f"image too small for gradients: {data.shape[:2]}")
    return np.gradient(data, axis=1), np.gradient(data, axis=0)


def resize(img: ImageBuffer, height: int, width: int) -> ImageBuffer:
    """Bilinear resize with pixel-centre alignment and edge clamping."""
    sy = img.height / height
    sx = img.width / width
    u = np.clip((np.arange(width) + 0.5) * sx - 0.5, 0, img.width - 1)
    v = np.clip((np.arange(height) + 0.5) * sy - 0.5, 0, img.height - 1)
    uu, vv = np.meshgrid(u, v)
    out, _ = bilinear_sample(img, uu, vv)
    return ImageBuffer(out)


def _stats(channels: int, values) -> np.ndarray:
    a = np.asarray(values, dtype=np.float64).reshape(-1)
    if a.size == channels:
        return a
    if channels == 1:
        return np.array([a.mean()])
    raise ValueError(f"need {channels} channel statistics, got {a.size}")


def whiten(img: ImageBuffer, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> ImageBuffer:
    mean = _stats(img.channels, mean)
    std = _stats(img.channels, std)
    if np.any(std == 0):
        raise ValueError("channel std must be nonzero")
    return ImageBuffer((img.data - mean) / std)


def unwhiten(img: ImageBuffer, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> ImageBuffer:
    mean = _stats(img.channels, mean)
    std = _stats(img.channels, std)
    return ImageBuffer(img.data * std + mean)


def preprocess(img: ImageBuffer, size=(240, 376), mean=IMAGENET_MEAN, std=IMAGENET_STD) -> ImageBuffer:
    h, w = size
    if (img.height, img.width) != (h, w):
        img = resize(img, h, w)
    return whiten(img, mean, std)


# --- optical flow ---

class FlowProvider(Protocol):
    def __call__(self, src: ImageBuffer, tgt: ImageBuffer) -> FlowField: ...


def _pyramid(gray: np.ndarray, levels: int) -> list[np.ndarray]:
    pyr = [gray]
    for _ in range(levels - 1):
        g = ndimage.gaussian_filter(pyr[-1], 1.0)
        pyr.append(g[::2, ::2])
    return pyr


def _warp_gray(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return ndimage.map_coordinates(img, [v, u], order=1, mode="nearest")


def local_flow(src, tgt, levels: int = 3, window: int = 5, iterations: int = 5) -> FlowField:
    """Coarse-to-fine local least-squares (Lucas-Kanade style) dense flow.

    The flow at a source pixel x is the displacement d with tgt(x + d) ~ src(x).
    """
    a = src.gray() if isinstance(src, ImageBuffer) else np.asarray(src, dtype=np.float64)
    b = tgt.gray() if isinstance(tgt, ImageBuffer) else np.asarray(tgt, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image sizes differ: {a.shape} vs {b.shape}")
    pa, pb = _pyramid(a, levels), _pyramid(b, levels)
    du = np.zeros_like(pa[-1])
    dv = np.zeros_like(pa[-1])
    for lvl in range(levels - 1, -1, -1):
        ia, ib = pa[lvl], pb[lvl]
        h, w = ia.shape
        if du.shape != (h, w):
            du = 2.0 * ndimage.zoom(du, (h / du.shape[0], w / du.shape[1]), order=1)
            dv = 2.0 * ndimage.zoom(dv, (h / dv.shape[0], w / dv.shape[1]), order=1)
        gy, gx = np.gradient(ia)
        sxx = ndimage.uniform_filter(gx * gx, window)
        sxy = ndimage.uniform_filter(gx * gy, window)
        syy = ndimage.uniform_filter(gy * gy, window)
        det = sxx * syy - sxy * sxy
        ok = det > 1e-9
        det = np.where(ok, det, 1.0)
        u, v = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
        for _ in range(iterations):
            it = _warp_gray(ib, u + du, v + dv) - ia
            bx = ndimage.uniform_filter(gx * it, window)
            by = ndimage.uniform_filter(gy * it, window)
            du = du - np.where(ok, (syy * bx - sxy * by) / det, 0.0)
            dv = dv - np.where(ok, (sxx * by - sxy * bx) / det, 0.0)
    return FlowField(np.stack([du, dv], axis=-1))


class FileFlow:
    """Flow provider that reads precomputed fields keyed by (src, tgt) ids."""

    def __init__(self, directory):
        self.directory = Path(directory)

    def path_for(self, src_id, tgt_id) -> Path:
        return self.directory / f"{src_id}_{tgt_id}.flo2"

    def load(self, src_id, tgt_id) -> FlowField:
        return read_flow(self.path_for(src_id, tgt_id))


def resize_flow(flow: FlowField, height: int, width: int) -> FlowField:
    """Resample a flow field; displacements scale with the grid."""
    if (flow.height, flow.width) == (height, width):
        return flow
    out = resize(ImageBuffer(np.concatenate([flow.data, np.zeros(flow.data.shape[:2] + (1,))], axis=2)), height, width)
    return FlowField(out.data[..., :2] * np.array([width / flow.width, height / flow.height]))


def compute_flow(src: ImageBuffer, tgt: ImageBuffer, provider: FlowProvider | None = None) -> FlowField:
    if (src.height, src.width) != (tgt.height, tgt.width):
        raise ValueError("source and target sizes differ")
    return (provider or local_flow)(src, tgt)


# --- file formats ---

def write_flow(path, flow: FlowField) -> None:
    d = np.ascontiguousarray(flow.data, dtype="<f4")
    header = f"FLOW2 {flow.height} {flow.width}\n".encode("ascii")
    atomic_write_bytes(path, header + d.tobytes())


def read_flow(path) -> FlowField:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    magic, h, w = raw[:nl].decode("ascii").split()
    if magic != "FLOW2":
        raise ValueError(f"{path}: not a FLOW2 file")
    h, w = int(h), int(w)
    data = np.frombuffer(raw[nl + 1:], dtype="<f4")
    if data.size != h * w * 2:
        raise ValueError(f"{path}: expected {h * w * 2} floats, found {data.size}")
    return FlowField(data.reshape(h, w, 2).copy())


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    while True:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        break
    start = pos
    while not buf[pos:pos + 1].isspace():
        pos += 1
    return buf[start:pos], pos


def read_pnm(path) -> ImageBuffer:
    """Binary 8-bit PGM (P5) or PPM (P6); intensities scaled to [0, 1]."""
    buf = Path(path).read_bytes()
    pos = 0
    magic, pos = _read_token(buf, pos)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported image type {magic!r}")
    w, pos = _read_token(buf, pos)
    h, pos = _read_token(buf, pos)
    maxval, pos = _read_token(buf, pos)
    if int(maxval) != 255:
        raise ValueError(f"{path}: only 8-bit images are supported")
    w, h = int(w), int(h)
    c = 3 if magic == b"P6" else 1
    pix = np.frombuffer(buf[pos + 1:pos + 1 + w * h * c], dtype=np.uint8)
    if pix.size != w * h * c:
        raise ValueError(f"{path}: truncated pixel data")
    return ImageBuffer(pix.reshape(h, w, c) / 255.0)


def to_uint8(img: ImageBuffer) -> np.ndarray:
    return np.clip(np.rint(img.data * 255.0), 0, 255).astype(np.uint8)


def write_pnm(path, img: ImageBuffer) -> None:
    magic = "P6" if img.channels == 3 else "P5"
    header = f"{magic}\n{img.width} {img.height}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + to_uint8(img).tobytes())


def read_intrinsics(path) -> Intrinsics:
    fields = Path(path).read_text().split()
    if len(fields) != 6:
        raise ValueError(f"{path}: expected 'f_u f_v c_u c_v H W'")
    fu, fv, cu, cv = (float(x) for x in fields[:4])
    return Intrinsics(fu, fv, cu, cv, int(fields[4]), int(fields[5]))


def write_intrinsics(path, K: Intrinsics) -> None:
    atomic_write_text(path, " ".join(repr(float(x)) for x in (K.fu, K.fv, K.cu, K.cv)) + f" {int(K.height)} {int(K.width)}\n")
