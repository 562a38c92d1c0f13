"""Similarity transforms T(x) = s*R*x + t and SO(3) helpers.

Conventions used throughout the package:

- rotations are stored as 3x3 orthonormal matrices with det +1;
- quaternions appear only at I/O boundaries, ordered (w, x, y, z), and are
  normalized on ingest;
- rotation increments use the left exponential map, R_new = exp([w]x) @ R.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import MeshregError

_ORTHO_TOL = 1e-9


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix [v]x such that [v]x @ u = v x u."""
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def rotation_exp(omega: np.ndarray) -> np.ndarray:
    """Rodrigues exponential map from a rotation vector to SO(3)."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    if theta < 1e-12:
        # second-order series keeps the map smooth through zero
        k = skew(omega)
        return np.eye(3) + k + 0.5 * (k @ k)
    axis = omega / theta
    k = skew(axis)
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


def rotation_log(rot: np.ndarray) -> np.ndarray:
    """Rotation vector of `rot`; inverse of :func:`rotation_exp`."""
    cos_theta = np.clip((np.trace(rot) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < 1e-10:
        return np.array([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]]) / 2.0
    if theta > np.pi - 1e-6:
        # near pi the antisymmetric part vanishes; recover the axis from R + I
        a = (rot + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diag(a), 0.0))
        # fix signs from the off-diagonal entries
        i = int(np.argmax(axis))
        if axis[i] > 0.0:
            for j in range(3):
                if j != i:
                    axis[j] = a[i, j] / axis[i] if abs(a[i, j] / axis[i]) > abs(axis[j]) else np.copysign(axis[j], a[i, j])
        axis /= np.linalg.norm(axis)
        return theta * axis
    w = np.array([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]])
    return theta / (2.0 * np.sin(theta)) * w


def rotation_angle_between(r1: np.ndarray, r2: np.ndarray) -> float:
    """Geodesic angle (radians) between two rotations."""
    cos_theta = np.clip((np.trace(r1.T @ r2) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.arccos(cos_theta))


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a (w, x, y, z) quaternion; normalizes first."""
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise MeshregError("zero-norm quaternion")
    w, x, y, z = q / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotation_to_quaternion(rot: np.ndarray) -> np.ndarray:
    """(w, x, y, z) unit quaternion of a rotation matrix, w >= 0."""
    t = np.trace(rot)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (rot[2, 1] - rot[1, 2]) / s, (rot[0, 2] - rot[2, 0]) / s, (rot[1, 0] - rot[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(rot)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(rot[i, i] - rot[j, j] - rot[k, k] + 1.0) * 2.0
        q = np.empty(4)
        q[0] = (rot[k, j] - rot[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (rot[j, i] + rot[i, j]) / s
        q[1 + k] = (rot[k, i] + rot[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


@dataclass(frozen=True)
class SimilarityTransform:
    """Scale + rotation + translation acting as T(x) = s*R*x + t."""

    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))
        object.__setattr__(self, "scale", float(self.scale))
        if self.scale <= 0.0:
            raise MeshregError(f"scale must be positive, got {self.scale}")
        r = self.rotation
        if r.shape != (3, 3):
            raise MeshregError("rotation must be 3x3")
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-6:
            raise MeshregError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise MeshregError("rotation determinant is not +1")

    @staticmethod
    def identity() -> "SimilarityTransform":
        return SimilarityTransform()

    @staticmethod
    def from_parts(scale: float, rotation: np.ndarray, translation: np.ndarray) -> "SimilarityTransform":
        return SimilarityTransform(scale=scale, rotation=rotation, translation=translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or a stack of points (n, 3)."""
        p = np.asarray(points, dtype=float)
        return self.scale * (p @ self.rotation.T) + self.translation

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """self after other: (self.compose(other))(x) == self(other(x))."""
        return SimilarityTransform(
            scale=self.scale * other.scale,
            rotation=self.rotation @ other.rotation,
            translation=self.scale * self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "SimilarityTransform":
        r_inv = self.rotation.T
        return SimilarityTransform(
            scale=1.0 / self.scale,
            rotation=r_inv,
            translation=-(r_inv @ self.translation) / self.scale,
        )

    def is_orthonormal(self, tol: float = _ORTHO_TOL) -> bool:
        r = self.rotation
        return bool(
            np.max(np.abs(r.T @ r - np.eye(3))) <= tol and abs(np.linalg.det(r) - 1.0) <= tol
        )

    def almost_equal(self, other: "SimilarityTransform", tol: float = 1e-9) -> bool:
        return (
            abs(self.scale - other.scale) <= tol
            and np.max(np.abs(self.rotation - other.rotation)) <= tol
            and np.max(np.abs(self.translation - other.translation)) <= tol
        )


def apply_transform(transform: SimilarityTransform, point: np.ndarray) -> np.ndarray:
    """Evaluate T(p) = s*R*p + t."""
    return transform.apply(point)


def delta_between(t_old: SimilarityTransform, t_new: SimilarityTransform) -> tuple[float, float, float]:
    """Step sizes between two transforms.

    Returns (translation distance in mm, rotation geodesic angle in radians,
    absolute log scale ratio); used by the convergence test.
    """
    dt = float(np.linalg.norm(t_new.translation - t_old.translation))
    dr = rotation_angle_between(t_old.rotation, t_new.rotation)
    ds = abs(float(np.log(t_new.scale / t_old.scale)))
    return dt, dr, ds


def blend_transforms(
    t_from: SimilarityTransform, t_to: SimilarityTransform, fraction: float
) -> SimilarityTransform:
    """Interpolate from t_from (fraction 0) to t_to (fraction 1).

    Translation interpolates linearly, rotation along the geodesic, and
    scale linearly in log space.
    """
    omega = rotation_log(t_to.rotation @ t_from.rotation.T)
    rot = rotation_exp(fraction * omega) @ t_from.rotation
    trans = (1.0 - fraction) * t_from.translation + fraction * t_to.translation
    scale = float(np.exp((1.0 - fraction) * np.log(t_from.scale) + fraction * np.log(t_to.scale)))
    return SimilarityTransform(scale=scale, rotation=rot, translation=trans)
