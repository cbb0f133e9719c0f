"""Differentiable primitives used by the corrector network and the loss.

Reverse-mode sweeps run on torch.autograd. This module fixes the primitive
set, checks every forward output for NaN/Inf, keeps a per-worker ``Tape``
that records which primitives ran and refuses a second backward over the
same recording, and provides a finite-difference ``gradcheck`` that is
independent of autograd.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

MIN_DEPTH = 1e-6
# below this angle the SO(3) coefficients use their Taylor series; the wide
# threshold keeps (t - sin t)/t^3 accurate in float32
SERIES_ANGLE = 1e-2
# samples this close outside the frame (rounding of projected lattice points) are clamped in
EDGE_TOL = 1e-4


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


_local = threading.local()


@dataclass
class Tape:
    """Ordered record of primitives executed while the tape is active."""

    records: list[tuple[str, tuple]] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        self._prev = getattr(_local, "tape", None)
        _local.tape = self
        self.records.clear()
        self.consumed = False
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._prev

    def backward(self, loss: torch.Tensor) -> None:
        if self.consumed:
            raise TapeError("backward already ran on this tape; record the forward pass again")
        if not self.records:
            raise TapeError("tape is empty")
        backward(loss)
        self.consumed = True

    @property
    def names(self) -> list[str]:
        return [r[0] for r in self.records]


def current_tape() -> Tape | None:
    return getattr(_local, "tape", None)


def _finish(name: str, out, *inputs):
    outs = out if isinstance(out, tuple) else (out,)
    for o in outs:
        if o.is_floating_point() and not torch.isfinite(o).all():
            raise NonFiniteError(f"{name}: non-finite values in forward output")
    tape = current_tape()
    if tape is not None and any(isinstance(i, torch.Tensor) and i.requires_grad for i in inputs):
        tape.records.append((name, tuple(tuple(o.shape) for o in outs)))
    return out


def backward(loss: torch.Tensor) -> None:
    if loss.numel() != 1:
        raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    if getattr(loss, "_dpc_consumed", False):
        raise TapeError("backward already ran for this loss")
    loss.backward()
    loss._dpc_consumed = True


# --- dense layers ---

def linear(x, weight, bias=None):
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input has {x.shape[-1]} features, weight expects {weight.shape[1]}")
    return _finish("linear", F.linear(x, weight, bias), x, weight, bias)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv2d: {x.shape[1]} input channels, kernel expects {weight.shape[1]}")
    return _finish("conv2d", F.conv2d(x, weight, bias, stride, padding), x, weight, bias)


def conv_transpose2d(x, weight, bias=None, stride=1, padding=0, output_padding=0):
    if x.shape[1] != weight.shape[0]:
        raise ValueError(f"conv_transpose2d: {x.shape[1]} input channels, kernel expects {weight.shape[0]}")
    out = F.conv_transpose2d(x, weight, bias, stride, padding, output_padding)
    return _finish("conv_transpose2d", out, x, weight, bias)


def batch_norm(x, weight, bias, running_mean, running_var, training: bool, momentum=0.1, eps=1e-5):
    out = F.batch_norm(x, running_mean, running_var, weight, bias, training, momentum, eps)
    return _finish("batch_norm", out, x, weight, bias)


def relu(x):
    return _finish("relu", F.relu(x), x)


def sigmoid(x):
    return _finish("sigmoid", torch.sigmoid(x), x)


def dropout(x, p: float, training: bool, generator: torch.Generator | None = None):
    """Inverted dropout; identity when not training.

    The keep-mask is a constant saved by autograd, so backward reuses it.
    """
    if not training or p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p
    return _finish("dropout", x * keep / (1.0 - p), x)


def concat(tensors: Sequence[torch.Tensor], dim: int = 1):
    return _finish("concat", torch.cat(list(tensors), dim), *tensors)


def absolute(x):
    # torch.abs has subgradient sign(0) = 0 at the kink
    return _finish("abs", torch.abs(x), x)


def log(x):
    return _finish("log", torch.log(x), x)


def mean(x, dim=None):
    out = x.mean() if dim is None else x.mean(dim)
    return _finish("mean", out, x)


def total(x, dim=None):
    out = x.sum() if dim is None else x.sum(dim)
    return _finish("sum", out, x)


# --- sampling and geometry ---

def bilinear_sample(img, u, v):
    """Sample img (N, C, H, W) at pixel coordinates u, v of shape (N, h, w).

    Returns ``(values (N, C, h, w), valid (N, h, w))``. Out-of-frame samples
    are zero and pass no gradient. On lattice lines the coordinate gradient
    is the one-sided difference toward the next pixel.
    """
    n, c, h, w = img.shape
    if u.shape != v.shape or u.shape[0] != n:
        raise ValueError(f"bilinear_sample: coordinate shapes {tuple(u.shape)} / {tuple(v.shape)} vs image {tuple(img.shape)}")
    tol = EDGE_TOL
    valid = (u >= -tol) & (u <= w - 1 + tol) & (v >= -tol) & (v <= h - 1 + tol)
    zero = torch.zeros((), dtype=u.dtype)
    uc = torch.where(valid, u, zero).clamp(0, w - 1)
    vc = torch.where(valid, v, zero).clamp(0, h - 1)
    u0 = torch.floor(uc).detach()
    v0 = torch.floor(vc).detach()
    a = uc - u0
    b = vc - v0
    u0 = u0.long()
    v0 = v0.long()
    u1 = (u0 + 1).clamp(max=w - 1)
    v1 = (v0 + 1).clamp(max=h - 1)
    flat = img.reshape(n, c, h * w)

    def gather(vi, ui):
        idx = (vi * w + ui).reshape(n, 1, -1).expand(n, c, -1)
        return torch.gather(flat, 2, idx).reshape(n, c, *u.shape[1:])

    a = a.unsqueeze(1)
    b = b.unsqueeze(1)
    out = (
        gather(v0, u0) * (1 - a) * (1 - b)
        + gather(v0, u1) * a * (1 - b)
        + gather(v1, u0) * (1 - a) * b
        + gather(v1, u1) * a * b
    )
    out = out * valid.unsqueeze(1).to(out.dtype)
    return _finish("bilinear_sample", out, img, u, v), valid


def _hat(phi):
    x, y, z = phi.unbind(-1)
    o = torch.zeros_like(x)
    return torch.stack([o, -z, y, z, o, -x, -y, x, o], dim=-1).reshape(*phi.shape[:-1], 3, 3)


def se3_exp(xi):
    """Batched exponential map: xi (N, 6) ordered (rho, phi) -> R (N,3,3), t (N,3)."""
    if xi.shape[-1] != 6:
        raise ValueError(f"se3_exp expects (..., 6), got {tuple(xi.shape)}")
    rho, phi = xi[..., :3], xi[..., 3:]
    t2 = (phi * phi).sum(-1)
    small = t2 < SERIES_ANGLE**2
    # safe squared angle keeps the unused branch free of 0/0
    t2s = torch.where(small, torch.ones_like(t2), t2)
    theta = torch.sqrt(t2s)
    s = torch.sin(theta)
    half = torch.sin(0.5 * theta)
    a = torch.where(small, 1 - t2 / 6 + t2 * t2 / 120, s / theta)
    b = torch.where(small, 0.5 - t2 / 24 + t2 * t2 / 720, 2 * half * half / t2s)
    cc = torch.where(small, 1.0 / 6 - t2 / 120 + t2 * t2 / 5040, (theta - s) / (t2s * theta))
    k = _hat(phi)
    k2 = k @ k
    eye = torch.eye(3, dtype=xi.dtype).expand_as(k)
    rot = eye + a[..., None, None] * k + b[..., None, None] * k2
    jac = eye + b[..., None, None] * k + cc[..., None, None] * k2
    trans = (jac @ rho.unsqueeze(-1)).squeeze(-1)
    return _finish("se3_exp", (rot, trans), xi)


def _intrinsics(K, n: int, dtype):
    """(fu, fv, cu, cv) shaped (N, 1, 1) from an Intrinsics or an (N, 4) tensor."""
    if isinstance(K, torch.Tensor):
        k = K.to(dtype).reshape(n, 4, 1, 1)
        return k[:, 0], k[:, 1], k[:, 2], k[:, 3]
    return tuple(torch.full((n, 1, 1), float(x), dtype=dtype) for x in (K.fu, K.fv, K.cu, K.cv))


def backproject(depth, K):
    """depth (N, H, W) -> points (N, H, W, 3) on the pixel grid of the depth map.

    K is an Intrinsics or an (N, 4) tensor of (fu, fv, cu, cv) per sample.
    """
    n, h, w = depth.shape
    fu, fv, cu, cv = _intrinsics(K, n, depth.dtype)
    v, u = torch.meshgrid(
        torch.arange(h, dtype=depth.dtype), torch.arange(w, dtype=depth.dtype), indexing="ij"
    )
    x = (u - cu) / fu
    y = (v - cv) / fv
    ray = torch.stack([x, y, torch.ones_like(x)], dim=-1)
    return _finish("backproject", depth.unsqueeze(-1) * ray, depth)


def transform_points(rot, trans, p):
    """Apply per-sample rigid transforms to points (N, ..., 3)."""
    n = p.shape[0]
    flat = p.reshape(n, -1, 3)
    out = flat @ rot.transpose(-1, -2) + trans.unsqueeze(1)
    return _finish("transform", out.reshape(p.shape), rot, trans, p)


def pinhole_project(p, K):
    """Points (N, H, W, 3) -> (u, v, in_front); points at z <= MIN_DEPTH are flagged."""
    fu, fv, cu, cv = _intrinsics(K, p.shape[0], p.dtype)
    z = p[..., 2]
    front = z > MIN_DEPTH
    zs = torch.where(front, z, torch.ones_like(z))
    u = fu * p[..., 0] / zs + cu
    v = fv * p[..., 1] / zs + cv
    _finish("project", (u, v), p)
    return u, v, front


# --- gradient checking ---

@dataclass
class GradcheckReport:
    max_rel_error: float  # ||g - fd|| / max(||g||, ||fd||) over every checked entry
    max_abs_error: float
    n_checked: int
    tolerance: float
    worst: tuple | None = None  # (input index, flat index, autograd, finite difference) of the largest gap
    n_unresolved: int = 0  # entries whose differences never settled (kink closer than the smallest step)
    per_input: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}: max rel err {self.max_rel_error:.3e} over {self.n_checked} entries "
                f"(tol {self.tolerance:g}, unresolved {self.n_unresolved})")


def _central(f, flat, i, h):
    orig = flat[i].item()
    flat[i] = orig + h
    fp = f()
    flat[i] = orig - h
    fm = f()
    flat[i] = orig
    return (fp - fm) / (2 * h)


def gradcheck(
    fn: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    tol: float = 1e-6,
    n_coords: int | None = 32,
    step: float = 1e-4,
    refinements: int = 4,
    seed: int = 0,
) -> GradcheckReport:
    """Compare autograd gradients of scalar ``fn(*inputs)`` with central differences.

    A random subset of ``n_coords`` entries per input is checked (all entries
    when None). Differences at h, h/2 and h/4 give two Richardson estimates;
    they agree to rounding on smooth pieces. The losses here are only
    piecewise smooth (ReLU, the edges of bilinear cells), so when the two
    disagree a kink lies within reach and h shrinks tenfold, at most
    ``refinements`` times. The error is ``||g - fd|| / max(||g||, ||fd||)``
    over all checked entries of all inputs, the gradient being one vector;
    ``per_input`` holds the same ratio per input.
    """
    rng = np.random.default_rng(seed)
    leaves = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = fn(*leaves)
    if out.numel() != 1:
        raise ValueError("gradcheck needs a scalar-valued function")
    f0 = abs(out.item())
    grads = torch.autograd.grad(out, leaves, allow_unused=True)
    eps = np.finfo(np.float64 if out.dtype == torch.float64 else np.float32).eps
    worst_abs, count, worst, unresolved = 0.0, 0, None, 0
    all_an, all_fd, per_input = [], [], []
    with torch.no_grad():
        for k, (x, g) in enumerate(zip(leaves, grads)):
            g = (torch.zeros_like(x) if g is None else g).reshape(-1)
            flat = x.detach().clone().reshape(-1)
            args = [y.detach() for y in leaves]
            args[k] = flat.view(x.shape)
            f = lambda: fn(*args).item()
            n = flat.numel()
            idx = range(n) if n_coords is None or n_coords >= n else rng.choice(n, n_coords, replace=False)
            an_k, fd_k = [], []
            for i in idx:
                i = int(i)
                h = step
                for r in range(refinements + 1):
                    d1, d2, d3 = (_central(f, flat, i, h / m) for m in (1, 2, 4))
                    a, b = (4 * d2 - d1) / 3, (4 * d3 - d2) / 3
                    noise = 8 * eps * max(f0, 1e-30) / h
                    if abs(a - b) <= 0.1 * tol * max(abs(a), abs(b)) + noise:
                        break
                    h /= 10
                else:
                    unresolved += 1
                an, fd = g[i].item(), b
                an_k.append(an)
                fd_k.append(fd)
                count += 1
                if abs(an - fd) > worst_abs:
                    worst_abs, worst = abs(an - fd), (k, i, an, fd)
            per_input.append(_rel(an_k, fd_k))
            all_an += an_k
            all_fd += fd_k
    return GradcheckReport(_rel(all_an, all_fd), worst_abs, count, tol, worst, unresolved, per_input)


def _rel(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return float(np.linalg.norm(a - b) / scale) if scale > 0 else 0.0
