"""Planar rigid-body geometry: SE(2) poses and constant twists.

Everything downstream (registration, pose graph, simulator) is built on the
two types in this module. Poses are immutable; all point operations are
vectorized over ``(N, 2)`` arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    wrapped = math.fmod(theta + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


def wrap_angles(theta: np.ndarray) -> np.ndarray:
    """Vectorized :func:`wrap_angle` for arrays."""
    return np.mod(np.asarray(theta) + np.pi, 2.0 * np.pi) - np.pi + 0.0


def rot2(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class Pose2:
    """A pose in SE(2). ``theta`` is kept wrapped to (-pi, pi]."""

    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def rotation(self) -> np.ndarray:
        return rot2(self.theta)

    def compose(self, other: "Pose2") -> "Pose2":
        """Group composition ``self * other`` (other expressed in self's frame)."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )

    def inverse(self) -> "Pose2":
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2(-(c * self.x + s * self.y), -(-s * self.x + c * self.y), -self.theta)

    def relative_to(self, other: "Pose2") -> "Pose2":
        """``other^-1 * self``: this pose expressed in ``other``'s frame."""
        return other.inverse().compose(self)

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply the pose to an ``(N, 2)`` array (or a single 2-vector)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = pts @ self.rotation.T + self.translation
        return out[0] if np.ndim(points) == 1 else out

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        """Apply only the rotation part (for normals and directions)."""
        vecs = np.atleast_2d(np.asarray(vectors, dtype=float))
        out = vecs @ self.rotation.T
        return out[0] if np.ndim(vectors) == 1 else out

    def as_vector(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    @staticmethod
    def from_vector(v: np.ndarray) -> "Pose2":
        return Pose2(float(v[0]), float(v[1]), float(v[2]))

    def almost_equal(self, other: "Pose2", tol_xy: float = 1e-9, tol_theta: float = 1e-9) -> bool:
        return (
            abs(self.x - other.x) <= tol_xy
            and abs(self.y - other.y) <= tol_xy
            and abs(wrap_angle(self.theta - other.theta)) <= tol_theta
        )


@dataclass(frozen=True)
class Twist2:
    """Constant body-frame velocity: ``vx, vy`` in m/s, ``omega`` in rad/s."""

    vx: float = 0.0
    vy: float = 0.0
    omega: float = 0.0

    def __post_init__(self) -> None:
        for name in ("vx", "vy", "omega"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"Twist2.{name} must be finite, got {value}")
            object.__setattr__(self, name, value)

    def propagate(self, dt: float) -> Pose2:
        """Exact SE(2) exponential of the twist integrated over ``dt`` seconds."""
        return se2_exp(self.vx * dt, self.vy * dt, self.omega * dt)

    def as_vector(self) -> np.ndarray:
        return np.array([self.vx, self.vy, self.omega])


def se2_exp(dx: float, dy: float, dtheta: float) -> Pose2:
    """SE(2) exponential map of the tangent increment ``(dx, dy, dtheta)``."""
    if abs(dtheta) < 1e-9:
        # First-order V matrix; error is O(dtheta^2) and below solver tolerances.
        return Pose2(dx - 0.5 * dtheta * dy, dy + 0.5 * dtheta * dx, dtheta)
    s, c = math.sin(dtheta), math.cos(dtheta)
    a = s / dtheta
    b = (1.0 - c) / dtheta
    return Pose2(a * dx - b * dy, b * dx + a * dy, dtheta)


def se2_log(pose: Pose2) -> np.ndarray:
    """Inverse of :func:`se2_exp`; returns ``(dx, dy, dtheta)``."""
    theta = pose.theta
    if abs(theta) < 1e-9:
        return np.array([pose.x + 0.5 * theta * pose.y, pose.y - 0.5 * theta * pose.x, theta])
    s, c = math.sin(theta), math.cos(theta)
    a = s / theta
    b = (1.0 - c) / theta
    det = a * a + b * b
    dx = (a * pose.x + b * pose.y) / det
    dy = (-b * pose.x + a * pose.y) / det
    return np.array([dx, dy, theta])
