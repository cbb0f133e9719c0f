"""SO(3) / SE(3) operations on rigid transforms.

Conventions
-----------
A ``Pose`` T_{a,b} maps point coordinates from frame b into frame a:
``p_a = R p_b + t``. A ``Twist`` is ordered translation first, rotation
second: ``xi = (rho, phi)`` with ``phi`` an axis-angle vector in radians.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .fileio import atomic_write_text

ORTHO_TOL = 1e-9
SMALL_ANGLE = 1e-8
# log() refuses rotations closer than this to pi
LOG_PI_MARGIN = 1e-6


class LogarithmError(ValueError):
    """Rotation angle too close to pi for a well-conditioned logarithm."""


class PoseFormatError(ValueError):
    pass


def hat(v: Sequence[float]) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = _frozen(self.rotation)
        t = _frozen(self.translation).reshape(3)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("pose entries must be finite")
        if np.max(np.abs(r.T @ r - np.eye(3))) > ORTHO_TOL or abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation is not in SO(3)")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_translation(cls, t: Sequence[float]) -> "Pose":
        return cls(np.eye(3), t)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply to an (..., 3) array of points."""
        return np.asarray(points) @ self.rotation.T + self.translation

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(np.max(np.abs(self.matrix() - other.matrix())) <= atol)

    def __repr__(self) -> str:
        return f"Pose(R={self.rotation.tolist()}, t={self.translation.tolist()})"


@dataclass(frozen=True, eq=False)
class Twist:
    translational: np.ndarray
    rotational: np.ndarray

    def __post_init__(self):
        rho = _frozen(self.translational).reshape(3)
        phi = _frozen(self.rotational).reshape(3)
        if not (np.all(np.isfinite(rho)) and np.all(np.isfinite(phi))):
            raise ValueError("twist entries must be finite")
        object.__setattr__(self, "translational", rho)
        object.__setattr__(self, "rotational", phi)

    @classmethod
    def zero(cls) -> "Twist":
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_vector(cls, v: Iterable[float]) -> "Twist":
        v = np.asarray(list(v) if not isinstance(v, np.ndarray) else v, dtype=np.float64).reshape(6)
        return cls(v[:3], v[3:])

    def vector(self) -> np.ndarray:
        return np.concatenate([self.translational, self.rotational])

    def __neg__(self) -> "Twist":
        return Twist(-self.translational, -self.rotational)

    def __add__(self, other: "Twist") -> "Twist":
        return Twist(self.translational + other.translational, self.rotational + other.rotational)

    def __repr__(self) -> str:
        return f"Twist(rho={self.translational.tolist()}, phi={self.rotational.tolist()})"


def _so3_coeffs(theta: float) -> tuple[float, float, float]:
    """Coefficients A=sin(t)/t, B=(1-cos t)/t^2, C=(t-sin t)/t^3."""
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    s = math.sin(theta)
    half = math.sin(0.5 * theta)
    return s / theta, 2.0 * half * half / (theta * theta), (theta - s) / theta**3


def exp_so3(phi: Sequence[float]) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    theta = float(np.linalg.norm(phi))
    a, b, _ = _so3_coeffs(theta)
    k = hat(phi)
    return np.eye(3) + a * k + b * (k @ k)


def left_jacobian_so3(phi: Sequence[float]) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    theta = float(np.linalg.norm(phi))
    _, b, c = _so3_coeffs(theta)
    k = hat(phi)
    return np.eye(3) + b * k + c * (k @ k)


def inverse_left_jacobian_so3(phi: Sequence[float]) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    theta = float(np.linalg.norm(phi))
    k = hat(phi)
    if theta < SMALL_ANGLE:
        d = 1.0 / 12.0 + theta * theta / 720.0
    else:
        half = 0.5 * theta
        d = (1.0 - half / math.tan(half)) / (theta * theta)
    return np.eye(3) - 0.5 * k + d * (k @ k)


def rotation_angle(r: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, in [0, pi]."""
    s = 0.5 * float(np.linalg.norm(vee(r - r.T)))
    c = 0.5 * (float(np.trace(r)) - 1.0)
    return math.atan2(s, c)


def log_so3(r: np.ndarray) -> np.ndarray:
    theta = rotation_angle(r)
    if theta > math.pi - LOG_PI_MARGIN:
        raise LogarithmError(f"rotation angle {theta:.9f} rad is too close to pi")
    w = 0.5 * vee(r - r.T)
    if theta < SMALL_ANGLE:
        return w * (1.0 + theta * theta / 6.0)
    return w * (theta / math.sin(theta))


def exp_se3(twist: Twist) -> Pose:
    r = exp_so3(twist.rotational)
    t = left_jacobian_so3(twist.rotational) @ twist.translational
    return Pose(r, t)


def log_se3(pose: Pose) -> Twist:
    # rotation_angle() is atan2-based, so |phi| <= pi already
    phi = log_so3(pose.rotation)
    rho = inverse_left_jacobian_so3(phi) @ pose.translation
    return Twist(rho, phi)


def apply_correction(corr: Pose, vo: Pose) -> Pose:
    """Corrected estimate T* = T_corr . T_vo (correction on the left)."""
    return corr @ vo


def rotation_magnitude(pose: Pose) -> float:
    return rotation_angle(pose.rotation)


def axis_rotation(axis: str, angle: float) -> Pose:
    v = np.zeros(3)
    v["xyz".index(axis)] = angle
    return Pose(exp_so3(v), np.zeros(3))


def project_to_so3(r: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(r)
    m = u @ vt
    if np.linalg.det(m) < 0:
        u[:, -1] *= -1
        m = u @ vt
    return m


# --- KITTI pose line format: 12 floats, row-major upper 3x4 ---

def pose_to_line(pose: Pose) -> str:
    m = pose.matrix()[:3, :].reshape(-1)
    return " ".join(format(float(x), ".17g") for x in m)


def pose_from_line(line: str, lineno: int | None = None, repair_tol: float = 1e-3) -> Pose:
    where = f" (line {lineno})" if lineno is not None else ""
    fields = line.split()
    if len(fields) != 12:
        raise PoseFormatError(f"expected 12 numbers, got {len(fields)}{where}")
    try:
        m = np.array([float(x) for x in fields]).reshape(3, 4)
    except ValueError as exc:
        raise PoseFormatError(f"non-numeric pose entry{where}: {exc}") from None
    r = m[:, :3]
    err = max(np.max(np.abs(r.T @ r - np.eye(3))), abs(np.linalg.det(r) - 1.0))
    if err > ORTHO_TOL:
        # text files with few digits are not exactly orthonormal
        if err > repair_tol:
            raise PoseFormatError(f"rotation is not orthonormal (err {err:.2e}){where}")
        r = project_to_so3(r)
    return Pose(r, m[:, 3])


def read_poses(path) -> list[Pose]:
    poses = []
    with open(path) as fh:
        for i, line in enumerate(fh, start=1):
            if line.strip():
                poses.append(pose_from_line(line, lineno=i))
    return poses


def write_poses(path, poses: Iterable[Pose]) -> None:
    atomic_write_text(path, "".join(pose_to_line(p) + "\n" for p in poses))
