"""Bounding-volume hierarchy over mesh triangles and its point queries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .exceptions import EmptyInputError, MeshValidationError
from .geometry import Feature3D, MatchError3
from .mesh import TriangleMesh
from .transforms import SimilarityTransform


@dataclass
class SpatialIndex:
    """Flat-array BVH; immutable after build, safe for concurrent reads."""

    node_min: np.ndarray
    node_max: np.ndarray
    node_left: np.ndarray
    node_right: np.ndarray
    node_start: np.ndarray
    node_count: np.ndarray
    tri_order: np.ndarray
    leaf_size: int

    @property
    def n_nodes(self) -> int:
        return len(self.node_left)


def build_index(mesh: TriangleMesh, leaf_size: int = 8) -> SpatialIndex:
    """Median-split BVH over the mesh triangles."""
    if leaf_size < 1:
        raise MeshValidationError("leaf_size must be >= 1")
    n = len(mesh.triangles)
    if n == 0:
        raise EmptyInputError("cannot index an empty mesh")
    tri_pts = mesh.vertices[mesh.triangles]  # (n, 3, 3)
    tri_min = tri_pts.min(axis=1)
    tri_max = tri_pts.max(axis=1)
    centroids = mesh.face_centroids

    node_min, node_max = [], []
    node_left, node_right = [], []
    node_start, node_count = [], []
    order: list[np.ndarray] = []
    filled = [0]

    def build(idx: np.ndarray) -> int:
        node = len(node_min)
        node_min.append(tri_min[idx].min(axis=0))
        node_max.append(tri_max[idx].max(axis=0))
        node_left.append(-1)
        node_right.append(-1)
        node_start.append(-1)
        node_count.append(0)
        if len(idx) <= leaf_size:
            node_start[node] = filled[0]
            node_count[node] = len(idx)
            order.append(idx)
            filled[0] += len(idx)
            return node
        spread = centroids[idx].max(axis=0) - centroids[idx].min(axis=0)
        axis = int(np.argmax(spread))
        ranks = np.argsort(centroids[idx, axis], kind="stable")
        half = len(idx) // 2
        left = build(idx[ranks[:half]])
        right = build(idx[ranks[half:]])
        node_left[node] = left
        node_right[node] = right
        return node

    build(np.arange(n, dtype=np.int64))
    return SpatialIndex(
        node_min=np.ascontiguousarray(node_min, dtype=np.float64),
        node_max=np.ascontiguousarray(node_max, dtype=np.float64),
        node_left=np.asarray(node_left, dtype=np.int64),
        node_right=np.asarray(node_right, dtype=np.int64),
        node_start=np.asarray(node_start, dtype=np.int64),
        node_count=np.asarray(node_count, dtype=np.int64),
        tri_order=np.concatenate(order).astype(np.int64),
        leaf_size=leaf_size,
    )


def _kernel_args(mesh: TriangleMesh, index: SpatialIndex):
    return (
        mesh.vertices,
        mesh.triangles,
        index.node_min,
        index.node_max,
        index.node_left,
        index.node_right,
        index.node_start,
        index.node_count,
        index.tri_order,
    )


def closest_point(
    mesh: TriangleMesh, index: SpatialIndex, query: np.ndarray
) -> tuple[np.ndarray, int, float]:
    """Nearest surface point to `query`: (point, face id, distance)."""
    q = np.ascontiguousarray(query, dtype=np.float64).reshape(3)
    x, y, z, face, d2 = _kernels.bvh_closest_point(q, *_kernel_args(mesh, index))
    return np.array([x, y, z]), int(face), float(np.sqrt(d2))


def closest_points(
    mesh: TriangleMesh, index: SpatialIndex, queries: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batch nearest-point query: (points, face ids, distances)."""
    q = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
    pts = np.empty_like(q)
    faces = np.empty(len(q), dtype=np.int64)
    dist = np.empty(len(q))
    _kernels.bvh_closest_batch(q, *_kernel_args(mesh, index), pts, faces, dist)
    return pts, faces, dist


def most_likely_point(
    mesh: TriangleMesh,
    index: SpatialIndex,
    feature: Feature3D,
    transform: SimilarityTransform,
) -> tuple[np.ndarray, MatchError3]:
    """Surface point minimizing the anisotropic match error for `feature`.

    The query point is the transformed datum; the metric is the inverse
    of the rotated covariance, W = R Sigma^-1 R^T.
    """
    q = transform.apply(feature.position)
    rot = transform.rotation
    w = rot @ np.linalg.inv(feature.covariance) @ rot.T
    w = 0.5 * (w + w.T)
    lam_min = float(np.linalg.eigvalsh(w)[0])
    x, y, z, face, err = _kernels.bvh_most_likely_point(
        np.ascontiguousarray(q), np.ascontiguousarray(w), lam_min,
        *_kernel_args(mesh, index),
    )
    point = np.array([x, y, z])
    return point, MatchError3(value=float(err), residual=point - q)


def most_likely_points(
    mesh: TriangleMesh,
    index: SpatialIndex,
    queries: np.ndarray,
    weights: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batch anisotropic query with per-query weight matrices W (n,3,3).

    Returns (points, face ids, error values).
    """
    q = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
    w = np.ascontiguousarray(weights, dtype=np.float64).reshape(-1, 3, 3)
    lam = np.linalg.eigvalsh(w)[:, 0].copy()
    pts = np.empty_like(q)
    faces = np.empty(len(q), dtype=np.int64)
    errs = np.empty(len(q))
    _kernels.bvh_most_likely_batch(
        q, w, lam, *_kernel_args(mesh, index), pts, faces, errs
    )
    return pts, faces, errs


_SURFACE_EPS = 1e-12


def interior_signed_check(
    mesh: TriangleMesh, index: SpatialIndex, query: np.ndarray
) -> tuple[bool, np.ndarray, np.ndarray]:
    """Classify a point against the oriented closed surface.

    Returns (is_interior, nearest point, surface normal). The point is
    interior (feasible) when the normal at its nearest surface point
    points toward it; points within 1e-12 of the surface classify
    exterior, conservatively. The normal comes from the face, edge, or
    vertex pseudonormal depending on where the nearest point lies.
    """
    q = np.asarray(query, dtype=float).reshape(3)
    nearest, face, _ = closest_point(mesh, index, q)
    normal = _region_normal(mesh, face, nearest)
    signed = float(normal @ (q - nearest))
    return signed >= _SURFACE_EPS, nearest, normal


def _region_normal(mesh: TriangleMesh, face: int, point: np.ndarray) -> np.ndarray:
    """Pseudonormal at a surface point known to lie on `face`."""
    tri = mesh.triangles[face]
    a, b, c = mesh.vertices[tri]
    e1 = b - a
    e2 = c - a
    d = point - a
    g11 = e1 @ e1
    g12 = e1 @ e2
    g22 = e2 @ e2
    det = g11 * g22 - g12 * g12
    u = (g22 * (d @ e1) - g12 * (d @ e2)) / det
    v = (g11 * (d @ e2) - g12 * (d @ e1)) / det
    bary = np.array([1.0 - u - v, u, v])
    tol = 1e-9
    on = bary > tol
    vertex_normals, edge_normals = mesh.pseudonormals()
    if on.sum() == 1:
        return vertex_normals[tri[int(np.argmax(bary))]]
    if on.sum() == 2:
        i, j = np.nonzero(on)[0]
        key = (min(int(tri[i]), int(tri[j])), max(int(tri[i]), int(tri[j])))
        return edge_normals[mesh.edge_index[key]]
    return mesh.face_normals[face]


def all_interior(
    mesh: TriangleMesh, index: SpatialIndex, points: np.ndarray
) -> bool:
    """True when every point classifies interior."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    return all(interior_signed_check(mesh, index, p)[0] for p in pts)
