"""Rotation and rigid-transform utilities shared across the pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ROTATION_TOL = 1e-9


def hat(w: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector, so that hat(w) @ v == cross(w, v)."""
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rotation matrix for a rotation vector (Rodrigues formula)."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    K = hat(w)
    if theta < 1e-12:
        # second-order series keeps exp accurate through the tiny-angle regime
        return np.eye(3) + K + 0.5 * (K @ K)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector of a rotation matrix; angle in [0, pi].

    At exactly pi the axis sign is ambiguous; a deterministic sign
    (largest-magnitude component positive) is returned.
    """
    tr = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(tr)
    if theta < 1e-10:
        return 0.5 * vee(R - R.T)
    if theta < np.pi - 1e-6:
        return theta / (2.0 * np.sin(theta)) * vee(R - R.T)
    # near pi: (R + R^T)/2 = cos(theta) I + (1 - cos(theta)) a a^T
    outer = ((R + R.T) / 2.0 - np.cos(theta) * np.eye(3)) / (1.0 - np.cos(theta))
    k = int(np.argmax(np.diag(outer)))
    axis = outer[k] / np.sqrt(max(outer[k, k], 1e-30))
    axis = axis / np.linalg.norm(axis)
    # the antisymmetric part still carries the sign while theta < pi
    v = vee(R - R.T)
    if np.dot(v, axis) < 0:
        axis = -axis
    elif np.linalg.norm(v) < 1e-12 and axis[np.argmax(np.abs(axis))] < 0:
        axis = -axis
    return theta * axis


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic rotation angle of R in [0, pi]."""
    return float(np.arccos(np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)))


def rotation_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Minimal rotation taking unit-ish vector a onto unit-ish vector b."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        raise ValueError("rotation_between needs non-zero vectors")
    a = a / na
    b = b / nb
    c = float(np.dot(a, b))
    axis = np.cross(a, b)
    s = np.linalg.norm(axis)
    if s < 1e-12:
        if c > 0:
            return np.eye(3)
        # opposite vectors: rotate pi about any axis orthogonal to a
        helper = np.array([1.0, 0.0, 0.0])
        if abs(a[0]) > 0.9:
            helper = np.array([0.0, 1.0, 0.0])
        ortho = np.cross(a, helper)
        ortho /= np.linalg.norm(ortho)
        return so3_exp(np.pi * ortho)
    angle = np.arctan2(s, c)
    return so3_exp(axis / s * angle)


def slerp(Ra: np.ndarray, Rb: np.ndarray, alpha: float) -> np.ndarray:
    """Geodesic interpolation between rotations; alpha=0 gives Ra, 1 gives Rb."""
    return Ra @ so3_exp(alpha * so3_log(Ra.T @ Rb))


def is_rotation(R: np.ndarray, tol: float = ROTATION_TOL) -> bool:
    return (
        R.shape == (3, 3)
        and np.allclose(R.T @ R, np.eye(3), atol=tol)
        and abs(np.linalg.det(R) - 1.0) <= tol
    )


def project_to_rotation(M: np.ndarray) -> np.ndarray:
    """Closest rotation matrix to M in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.linalg.det(U @ Vt)])
    return U @ D @ Vt


@dataclass
class RigidTransform:
    """SE(3) transform x -> R @ x + T."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    T: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float)
        self.T = np.asarray(self.T, dtype=float).reshape(3)
        if not is_rotation(self.R, tol=1e-6):
            raise ValueError("R is not a rotation matrix")

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.R.T + self.T

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform equal to applying `other` first, then self."""
        return RigidTransform(self.R @ other.R, self.R @ other.T + self.T)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.R.T, -self.R.T @ self.T)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform()
