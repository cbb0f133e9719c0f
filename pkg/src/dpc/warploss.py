"""View synthesis by inverse warping, and the weighted photometric loss stack.

Warping gathers: every pixel u_t of the source grid is lifted with the
source depth, moved by T_{t+1,t}, projected into frame t+1 and the frame-t+1
image is bilinearly sampled there. The result lives on the source grid and
is compared with the source image; the explainability mask shares that grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import autodiff as ad
from .geometry import Pose, rotation_magnitude
from .imaging import DepthMap, ImageBuffer, Intrinsics, image_gradient


@dataclass
class LossConfig:
    lambda_exp: float = 0.23
    lambda_rot: float = 4.0
    gamma_rot: float = 0.005  # radians
    gamma_grad: float = 0.05

    def __post_init__(self):
        for name in ("lambda_exp", "lambda_rot", "gamma_rot", "gamma_grad"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def warp_batch(image, depth, rot, trans, K):
    """Differentiable warp.

    image (N, C, H, W) is the frame being sampled, depth (N, H, W) the source
    depth, (rot, trans) the batch of T_{t+1,t}, K an Intrinsics or an (N, 4)
    tensor of (fu, fv, cu, cv). Returns (recon, valid).
    """
    if image.shape[0] != depth.shape[0] or image.shape[2:] != depth.shape[1:]:
        raise ValueError(f"image {tuple(image.shape)} and depth {tuple(depth.shape)} disagree")
    if isinstance(K, Intrinsics) and (K.height, K.width) != tuple(depth.shape[1:]):
        raise ValueError(f"intrinsics are for {K.height}x{K.width}, depth is {tuple(depth.shape[1:])}")
    pts = ad.backproject(depth, K)
    moved = ad.transform_points(rot, trans, pts)
    u, v, front = ad.pinhole_project(moved, K)
    recon, inside = ad.bilinear_sample(image, u, v)
    valid = front & inside
    recon = recon * valid.unsqueeze(1).to(recon.dtype)
    return recon, valid


def warp(image: ImageBuffer, depth_src: DepthMap, T: Pose, K: Intrinsics):
    """Reconstruct the source view from ``image`` (the adjacent frame).

    Returns (ImageBuffer on the source grid, boolean validity raster).
    """
    if (image.height, image.width) != (depth_src.height, depth_src.width):
        raise ValueError("image and depth sizes differ")
    img = torch.from_numpy(image.data).permute(2, 0, 1).unsqueeze(0)
    d = torch.from_numpy(depth_src.data).unsqueeze(0)
    rot = torch.from_numpy(np.array(T.rotation)).unsqueeze(0)
    trans = torch.from_numpy(np.array(T.translation)).unsqueeze(0)
    with torch.no_grad():
        recon, valid = warp_batch(img, d, rot, trans, K)
    return ImageBuffer(recon[0].permute(1, 2, 0).numpy()), valid[0].numpy()


def _check_same(a, b, what):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def photometric_loss(recon, target, mask, valid=None):
    """Mask-weighted absolute error, (N, C, H, W); zero on invalid pixels."""
    _check_same(recon, target, "photometric_loss")
    if tuple(mask.shape) != (recon.shape[0],) + tuple(recon.shape[2:]):
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match images {tuple(recon.shape)}")
    err = ad.absolute(recon - target) * mask.unsqueeze(1)
    if valid is not None:
        err = err * valid.unsqueeze(1).to(err.dtype)
    return err


def explainability_loss(mask):
    """Cross-entropy against a constant label of 1: -log W."""
    return -ad.log(mask)


def rotation_gated_loss(phot, vo, gamma: float):
    """Pass ``phot`` through for samples whose prior rotates by >= gamma, else 0.

    ``vo`` is a Pose, a sequence of Poses, or a tensor of rotation angles (N,).
    """
    if isinstance(vo, Pose):
        angles = torch.tensor([rotation_magnitude(vo)] * phot.shape[0], dtype=phot.dtype)
    elif isinstance(vo, torch.Tensor):
        angles = vo.to(phot.dtype)
    else:
        angles = torch.tensor([rotation_magnitude(p) for p in vo], dtype=phot.dtype)
    gate = (angles >= gamma).to(phot.dtype)
    return phot * gate.reshape(-1, *([1] * (phot.dim() - 1)))


def total_loss(phot, expl, rot, config: LossConfig):
    """(1/NCHW) * sum(phot + lambda_exp * exp + lambda_rot * rot), accumulated in float64.

    phot, rot: (N, C, H, W); expl: (N, H, W), broadcast over channels.
    """
    if phot.shape[0] == 0:
        raise ValueError("empty batch")
    _check_same(phot, rot, "total_loss")
    n, c, h, w = phot.shape
    s = ad.total(phot.double()) + config.lambda_rot * ad.total(rot.double())
    s = s + config.lambda_exp * c * ad.total(expl.double())
    return s / (n * c * h * w)


def batch_loss(recon, target, mask, valid, vo_angles, config: LossConfig):
    """Total loss for one batch of warped samples, plus its photometric raster."""
    phot = photometric_loss(recon, target, mask, valid)
    expl = explainability_loss(mask)
    rot = rotation_gated_loss(phot, vo_angles, config.gamma_rot)
    return total_loss(phot, expl, rot, config), phot


def gradient_mask(target, gamma_grad: float) -> np.ndarray:
    """Pixels whose mean absolute intensity gradient exceeds gamma_grad."""
    data = target.data if isinstance(target, ImageBuffer) else np.asarray(target, dtype=np.float64)
    if data.ndim == 3:
        data = data.mean(axis=2)
    gx, gy = image_gradient(data)
    return 0.5 * (np.abs(gx) + np.abs(gy)) > gamma_grad


def gradient_criterion_loss(recon, target, gamma_grad: float, valid=None) -> float | None:
    """Mean unweighted |recon - target| over high-gradient valid pixels.

    Images are (H, W[, C]) arrays or ImageBuffers; gradients come from the
    channel mean of ``target``. Returns None when no pixel survives.
    """
    r = recon.data if isinstance(recon, ImageBuffer) else np.asarray(recon, dtype=np.float64)
    t = target.data if isinstance(target, ImageBuffer) else np.asarray(target, dtype=np.float64)
    if r.shape != t.shape:
        raise ValueError(f"recon {r.shape} and target {t.shape} differ")
    keep = gradient_mask(t, gamma_grad)
    if valid is not None:
        keep &= np.asarray(valid, dtype=bool)
    if not keep.any():
        return None
    err = np.abs(r - t)
    if err.ndim == 3:
        err = err.mean(axis=2)
    return float(err[keep].mean())
