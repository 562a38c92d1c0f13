"""Pinhole camera model: frames, perspective and orthographic projection.

A frame's extrinsic is a rigid (unit-scale) transform taking points of
some reference space into camera coordinates, +z forward. During
registration the reference space of the ingested extrinsics is the data
cloud; `frame_under_registration` derives the camera-from-model frame
induced by a similarity estimate, which stays rigid because uniform
scaling of the cloud-and-cameras assembly does not change images.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import BehindCameraError, DegenerateOrientationError, MeshregError
from .geometry import OrientedContourPoint
from .transforms import SimilarityTransform

MIN_DEPTH = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise MeshregError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise MeshregError("image size must be positive")


@dataclass(frozen=True)
class CameraFrame:
    """One video frame: intrinsics, rigid extrinsic, and its contour set."""

    frame_id: int
    intrinsics: CameraIntrinsics
    extrinsic: SimilarityTransform
    contours: tuple[OrientedContourPoint, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if abs(self.extrinsic.scale - 1.0) > 1e-9:
            raise MeshregError("camera extrinsic must have unit scale")
        for c in self.contours:
            if c.frame_id != self.frame_id:
                raise MeshregError(
                    f"contour point tagged frame {c.frame_id} attached to frame {self.frame_id}"
                )

    @property
    def center(self) -> np.ndarray:
        """Optical center in the reference space of the extrinsic."""
        e = self.extrinsic
        return -(e.rotation.T @ e.translation)


def frame_under_registration(frame: CameraFrame, transform: SimilarityTransform) -> CameraFrame:
    """Camera-from-model frame induced by the registration estimate.

    The ingested extrinsic maps cloud coordinates to camera coordinates;
    under T (cloud -> model) the camera sits at T(center) with rotation
    composed by R_T^-1, and the derived extrinsic is rigid.
    """
    rot = frame.extrinsic.rotation @ transform.rotation.T
    center_model = transform.apply(frame.center)
    return replace(
        frame,
        extrinsic=SimilarityTransform(
            scale=1.0, rotation=rot, translation=-(rot @ center_model)
        ),
    )


def project_point(frame: CameraFrame, point: np.ndarray) -> tuple[np.ndarray, float]:
    """Perspective projection to pixel coordinates: (pixel, depth in mm)."""
    x, y, z = frame.extrinsic.apply(np.asarray(point, dtype=float).reshape(3))
    if z <= MIN_DEPTH:
        raise BehindCameraError(f"point at depth {z:.3g} mm is behind the camera")
    k = frame.intrinsics
    return np.array([k.fx * x / z + k.cx, k.fy * y / z + k.cy]), float(z)


def project_points(
    frame: CameraFrame, points: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized projection returning (pixels, depths, validity mask).

    Points at or behind the camera are flagged invalid instead of raising.
    """
    cam = frame.extrinsic.apply(np.asarray(points, dtype=float).reshape(-1, 3))
    z = cam[:, 2]
    valid = z > MIN_DEPTH
    k = frame.intrinsics
    safe = np.where(valid, z, 1.0)
    pix = np.stack([k.fx * cam[:, 0] / safe + k.cx, k.fy * cam[:, 1] / safe + k.cy], axis=1)
    return pix, z, valid


def project_orientation(frame: CameraFrame, normal: np.ndarray) -> np.ndarray:
    """Orthographic projection of a 3D unit direction into the image.

    The direction is rotated into camera coordinates, its image-plane
    component scaled by (fx, fy) to convert to pixel units, then
    normalized. Raises when the image-plane component vanishes.
    """
    n_cam = frame.extrinsic.rotation @ np.asarray(normal, dtype=float).reshape(3)
    k = frame.intrinsics
    v = np.array([k.fx * n_cam[0], k.fy * n_cam[1]])
    norm = np.linalg.norm(v)
    if norm < 1e-9:
        raise DegenerateOrientationError("orientation has no image-plane component")
    return v / norm


def back_project(frame: CameraFrame, pixel: np.ndarray, depth: float) -> np.ndarray:
    """Camera-space point of a pixel at a given depth."""
    u, v = np.asarray(pixel, dtype=float).reshape(2)
    k = frame.intrinsics
    return np.array([(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth])
