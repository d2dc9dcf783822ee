"""SE(3) poses, pinhole camera model, and twist integration.

Conventions:
    - Pose stores the camera-in-world transform: X_world = R @ X_cam + t.
    - Twists are (linear, angular) expressed in the camera frame.
    - Pixel coordinates are (u, v); normalized image-plane coordinates
      are x = (u - cx)/fx, y = (v - cy)/fy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonPositiveDepth

_MIN_DEPTH = 1e-9
_SMALL_ANGLE = 1e-8


def _as_rotation(R) -> np.ndarray:
    R = np.asarray(R, dtype=float).reshape(3, 3)
    if not np.allclose(R.T @ R, np.eye(3), atol=1e-6):
        raise ValueError("rotation matrix is not orthonormal")
    if np.linalg.det(R) < 0:
        raise ValueError("rotation matrix has negative determinant")
    return R


@dataclass(frozen=True)
class Pose:
    """Rigid transform on SE(3); immutable value object."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _as_rotation(self.rotation))
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "translation", t)
        self.rotation.setflags(write=False)
        self.translation.setflags(write=False)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        """Homogeneous 4x4 matrix."""
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    @staticmethod
    def from_matrix(T) -> "Pose":
        T = np.asarray(T, dtype=float)
        return Pose(T[:3, :3], T[:3, 3])

    def to_flat(self) -> list[float]:
        """12-number serialization: row-major rotation then translation."""
        return [*self.rotation.reshape(-1), *self.translation]

    @staticmethod
    def from_flat(values) -> "Pose":
        v = np.asarray(values, dtype=float).reshape(12)
        return Pose(v[:9].reshape(3, 3), v[9:])

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        """Map world points (..., 3) into the camera frame."""
        p = np.asarray(points, dtype=float)
        return (p - self.translation) @ self.rotation


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole parameters; focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")


@dataclass(frozen=True)
class Twist:
    """Camera spatial velocity (m/s, rad/s) in the camera frame."""

    linear: np.ndarray
    angular: np.ndarray

    def __post_init__(self):
        lin = np.asarray(self.linear, dtype=float).reshape(3)
        ang = np.asarray(self.angular, dtype=float).reshape(3)
        if not (np.all(np.isfinite(lin)) and np.all(np.isfinite(ang))):
            raise ValueError("twist components must be finite")
        object.__setattr__(self, "linear", lin)
        object.__setattr__(self, "angular", ang)
        self.linear.setflags(write=False)
        self.angular.setflags(write=False)

    @staticmethod
    def zero() -> "Twist":
        return Twist(np.zeros(3), np.zeros(3))

    @staticmethod
    def from_vector(v) -> "Twist":
        v = np.asarray(v, dtype=float).reshape(6)
        return Twist(v[:3], v[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.linear, self.angular])


def compose(a: Pose, b: Pose) -> Pose:
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(p: Pose) -> Pose:
    Rt = p.rotation.T
    return Pose(Rt, -Rt @ p.translation)


def relative(a: Pose, b: Pose) -> Pose:
    """Transform of b expressed in a's frame: inverse(a) o b."""
    return compose(inverse(a), b)


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, radians."""
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def pose_error(a: Pose, b: Pose) -> tuple[float, float]:
    """(translation norm [m], rotation angle [rad]) of relative(a, b)."""
    rel = relative(a, b)
    return float(np.linalg.norm(rel.translation)), rotation_angle(rel.rotation)


def skew(w: np.ndarray) -> np.ndarray:
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def se3_exp(xi) -> Pose:
    """Exponential map of a 6-vector (linear, angular) onto SE(3)."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    u, w = xi[:3], xi[3:]
    theta = np.linalg.norm(w)
    W = skew(w)
    if theta < _SMALL_ANGLE:
        # second-order Taylor terms; avoids 0/0 at theta -> 0
        R = np.eye(3) + W + 0.5 * (W @ W)
        V = np.eye(3) + 0.5 * W + (W @ W) / 6.0
    else:
        W2 = W @ W
        R = np.eye(3) + np.sin(theta) / theta * W + (1 - np.cos(theta)) / theta**2 * W2
        V = (
            np.eye(3)
            + (1 - np.cos(theta)) / theta**2 * W
            + (theta - np.sin(theta)) / theta**3 * W2
        )
    return Pose(_reorthonormalize(R), V @ u)


def _reorthonormalize(R: np.ndarray) -> np.ndarray:
    """Project onto SO(3) via SVD; keeps integration drift below 1e-9/step."""
    U, _, Vt = np.linalg.svd(R)
    out = U @ Vt
    if np.linalg.det(out) < 0:
        out = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
    return out


def integrate_twist(pose: Pose, twist: Twist, dt: float) -> Pose:
    """Advance the camera pose by dt under a body-frame twist: P o exp(dt*v)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    step = se3_exp(dt * twist.as_vector())
    new = compose(pose, step)
    return Pose(_reorthonormalize(new.rotation), new.translation)


def project(point, intrinsics: CameraIntrinsics) -> tuple[np.ndarray, float]:
    """Project a camera-frame point to (pixel, depth)."""
    p = np.asarray(point, dtype=float).reshape(3)
    Z = p[2]
    if Z <= _MIN_DEPTH:
        raise NonPositiveDepth(f"point depth {Z} <= {_MIN_DEPTH}")
    u = intrinsics.cx + intrinsics.fx * p[0] / Z
    v = intrinsics.cy + intrinsics.fy * p[1] / Z
    return np.array([u, v]), float(Z)


def project_many(points: np.ndarray, intrinsics: CameraIntrinsics):
    """Vectorized projection; returns (pixels (n,2), depths (n,)).

    Rows with non-positive depth yield NaN pixels instead of raising;
    callers filter by the returned depths.
    """
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    Z = p[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intrinsics.cx + intrinsics.fx * p[:, 0] / Z
        v = intrinsics.cy + intrinsics.fy * p[:, 1] / Z
    pix = np.stack([u, v], axis=1)
    pix[Z <= _MIN_DEPTH] = np.nan
    return pix, Z


def pixel_to_normalized(pixel, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Pixel -> metric image-plane coordinates (x, y); inverse of the pixel map."""
    p = np.asarray(pixel, dtype=float)
    x = (p[..., 0] - intrinsics.cx) / intrinsics.fx
    y = (p[..., 1] - intrinsics.cy) / intrinsics.fy
    return np.stack([x, y], axis=-1)
