"""Shared domain vocabulary: label distributions, geometry, camera model, kernels.

Label distributions are plain 1-D numpy arrays of probabilities; ``normalize``
is the validating constructor and must be applied after every mutation.
Everything here is an immutable value, safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_LOG_EPSILON = 1e-8
NORMALIZATION_TOL = 1e-6


class SemgridError(Exception):
    """Base class for all errors raised by this package."""


class InvalidDistribution(SemgridError):
    """Raised for zero-sum or negative raw probability vectors."""


def normalize(raw) -> np.ndarray:
    """Rescale a non-negative vector so it sums to 1.

    Raises InvalidDistribution for any-negative or all-zero input; a zero-sum
    vector must never be silently turned into a uniform distribution.
    """
    v = np.asarray(raw, dtype=np.float64)
    if v.ndim != 1:
        raise InvalidDistribution(f"expected 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise InvalidDistribution("non-finite entries in raw vector")
    if np.any(v < 0):
        raise InvalidDistribution("negative entries in raw vector")
    total = v.sum()
    if total <= 0.0:
        raise InvalidDistribution("raw vector sums to zero")
    return v / total


def neg_log(dist: np.ndarray, epsilon: float = DEFAULT_LOG_EPSILON) -> np.ndarray:
    """Per-label cost vector: -log(p) with zero probabilities clamped to epsilon.

    The clamp keeps costs finite for labels the fused distribution has driven
    to zero, so they stay recoverable by later evidence.
    """
    d = np.asarray(dist, dtype=np.float64)
    return -np.log(np.maximum(d, epsilon))


@dataclass(frozen=True)
class Pose:
    """Rigid world-from-camera transform."""

    rotation: np.ndarray  # (3, 3) orthonormal, det +1
    translation: np.ndarray  # (3,) meters; the camera center in world coords

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError("pose needs a 3x3 rotation and a 3-vector translation")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("non-finite pose")
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-6:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def transform(self, points_cam: np.ndarray) -> np.ndarray:
        """Map (N, 3) camera-frame points to world coordinates."""
        return np.asarray(points_cam, dtype=np.float64) @ self.rotation.T + self.translation

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole model with a stereo baseline (x right, y down, z forward)."""

    fx: float
    fy: float
    cx: float
    cy: float
    baseline: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0 or self.baseline <= 0:
            raise ValueError("fx, fy, baseline must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")

    def back_project(self, u, v, depth):
        """Pixel coordinates + depth (meters along z) -> camera-frame points.

        Accepts scalars or arrays; returns (..., 3).
        """
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        z = np.asarray(depth, dtype=np.float64)
        x = (u - self.cx) / self.fx * z
        y = (v - self.cy) / self.fy * z
        return np.stack([x, y, z], axis=-1)

    def project(self, points_cam: np.ndarray):
        """Camera-frame points (N, 3) -> pixel coords (u, v) and depth z."""
        p = np.asarray(points_cam, dtype=np.float64)
        z = p[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * p[..., 0] / z + self.cx
            v = self.fy * p[..., 1] / z + self.cy
        return u, v, z


@dataclass(frozen=True)
class FeatureVector:
    """Per-node filtering feature: spatial position plus RGB color in [0, 255].

    Positions are meters for 3D grid nodes and pixels for 2D image nodes; all
    nodes of one inference problem must share the position dimension.
    """

    position: np.ndarray
    color: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64))
        object.__setattr__(self, "color", np.asarray(self.color, dtype=np.float64))
        if self.color.shape != (3,):
            raise ValueError("color must be a 3-vector")


@dataclass(frozen=True)
class KernelParams:
    """Weights and bandwidths of the two Gaussian pairwise kernels.

    Kernel 1 (appearance) compares position at theta_alpha and color at
    theta_beta; kernel 2 (smoothness) compares position alone at theta_gamma.
    """

    w1: float = 5.0
    w2: float = 3.0
    theta_alpha: float = 0.5
    theta_beta: float = 10.0
    theta_gamma: float = 0.3

    def __post_init__(self):
        if min(self.theta_alpha, self.theta_beta, self.theta_gamma) <= 0:
            raise ValueError("kernel bandwidths must be positive")
        if self.w1 < 0 or self.w2 < 0:
            raise ValueError("kernel weights must be non-negative")
        if self.w1 == 0 and self.w2 == 0:
            raise ValueError("at least one kernel weight must be positive")
