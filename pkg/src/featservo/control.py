"""Classical IBVS control law: feature error, stacked interaction matrix,
SVD pseudo-inverse, and the commanded camera twist.

Feature vectors are flat (x1, y1, ..., xk, yk) in normalized image-plane
coordinates; depth vectors carry one entry per feature point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, InsufficientFeatures, NonPositiveDepth
from .geometry import Twist

MIN_POINTS = 3  # below this, 2k < 6 and the twist is unconstrained


@dataclass(frozen=True)
class ControlConfig:
    """Gain and numerical knobs for the control law."""

    gain: float = 0.5  # error decay rate, 1/s
    svd_tolerance: float = 1e-10  # relative singular-value cutoff
    max_twist: tuple | None = None  # per-component saturation, length 6

    def __post_init__(self):
        if self.gain <= 0:
            raise ValueError("gain must be positive")
        if self.svd_tolerance < 0:
            raise ValueError("svd_tolerance must be non-negative")
        if self.max_twist is not None and len(self.max_twist) != 6:
            raise ValueError("max_twist must have 6 components")


def feature_error(s: np.ndarray, s_star: np.ndarray) -> np.ndarray:
    """Elementwise error between current and target feature vectors."""
    s = np.asarray(s, dtype=float).reshape(-1)
    s_star = np.asarray(s_star, dtype=float).reshape(-1)
    if s.shape != s_star.shape:
        raise DimensionMismatch(f"feature vectors disagree: {s.shape} vs {s_star.shape}")
    if s.size % 2 != 0:
        raise DimensionMismatch("feature vector length must be even")
    return s - s_star


def point_interaction_matrix(x: float, y: float, Z: float) -> np.ndarray:
    """2x6 Jacobian of one normalized point feature w.r.t. the camera twist."""
    if Z <= 0:
        raise NonPositiveDepth(f"feature depth {Z} <= 0")
    return np.array(
        [
            [-1.0 / Z, 0.0, x / Z, x * y, -(1.0 + x * x), y],
            [0.0, -1.0 / Z, y / Z, 1.0 + y * y, -x * y, -x],
        ]
    )


def stack_interaction(s: np.ndarray, depths: np.ndarray) -> np.ndarray:
    """Vertical stack of per-point 2x6 blocks, in feature order -> (2k, 6)."""
    s = np.asarray(s, dtype=float).reshape(-1)
    Z = np.asarray(depths, dtype=float).reshape(-1)
    if s.size != 2 * Z.size:
        raise DimensionMismatch(f"{s.size} feature coords vs {Z.size} depths")
    if np.any(Z <= 0):
        raise NonPositiveDepth("depth vector contains non-positive entries")
    x, y = s[0::2], s[1::2]
    k = Z.size
    L = np.empty((2 * k, 6))
    L[0::2, 0] = -1.0 / Z
    L[0::2, 1] = 0.0
    L[0::2, 2] = x / Z
    L[0::2, 3] = x * y
    L[0::2, 4] = -(1.0 + x * x)
    L[0::2, 5] = y
    L[1::2, 0] = 0.0
    L[1::2, 1] = -1.0 / Z
    L[1::2, 2] = y / Z
    L[1::2, 3] = 1.0 + y * y
    L[1::2, 4] = -x * y
    L[1::2, 5] = -x
    return L


def pseudo_inverse(L: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Moore-Penrose pseudo-inverse; singular values <= tol*sigma_max zeroed."""
    L = np.asarray(L, dtype=float)
    U, sigma, Vt = np.linalg.svd(L, full_matrices=False)
    if sigma.size == 0:
        return L.T
    cutoff = tol * sigma[0]
    inv = np.where(sigma > cutoff, 1.0 / np.where(sigma > cutoff, sigma, 1.0), 0.0)
    return Vt.T @ (inv[:, None] * U.T)


def control_law(e: np.ndarray, L_hat: np.ndarray, cfg: ControlConfig) -> Twist:
    """Commanded camera twist: -gain * pinv(L_hat) @ e, optionally saturated."""
    e = np.asarray(e, dtype=float).reshape(-1)
    L_hat = np.asarray(L_hat, dtype=float)
    if L_hat.ndim != 2 or L_hat.shape[1] != 6:
        raise DimensionMismatch(f"interaction matrix must be (2k, 6), got {L_hat.shape}")
    if L_hat.shape[0] != e.size:
        raise DimensionMismatch(f"{e.size} error entries vs {L_hat.shape[0]} matrix rows")
    if e.size < 2 * MIN_POINTS:
        raise InsufficientFeatures(f"need >= {MIN_POINTS} points, got {e.size // 2}")
    v = -cfg.gain * (pseudo_inverse(L_hat, cfg.svd_tolerance) @ e)
    if cfg.max_twist is not None:
        cap = np.abs(np.asarray(cfg.max_twist, dtype=float))
        v = np.clip(v, -cap, cap)
    return Twist.from_vector(v)
