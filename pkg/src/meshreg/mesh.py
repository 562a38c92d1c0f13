"""Triangle meshes: ingest validation, adjacency, silhouettes.

Orientation convention: face normals point toward the free side seen by
the cameras (outward from solid material, i.e. into a cavity viewed from
inside, or away from a solid object viewed from outside).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import EmptyInputError, MeshValidationError, TopologyError

_DEGENERATE_AREA = 1e-12


class TriangleMesh:
    """Indexed triangle mesh with derived normals and edge adjacency.

    Raises MeshValidationError for out-of-range indices or degenerate
    (zero-area) triangles. Orientability and watertightness have their
    own check methods since downstream queries need them selectively.
    """

    def __init__(self, vertices: np.ndarray, triangles: np.ndarray):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.ascontiguousarray(triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.vertices) == 0 or len(self.triangles) == 0:
            raise EmptyInputError("mesh has no vertices or no triangles")
        if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
            raise MeshValidationError("triangle references vertex out of range")

        v0 = self.vertices[self.triangles[:, 0]]
        v1 = self.vertices[self.triangles[:, 1]]
        v2 = self.vertices[self.triangles[:, 2]]
        cross = np.cross(v1 - v0, v2 - v0)
        norms = np.linalg.norm(cross, axis=1)
        scale = max(1.0, float(np.max(np.abs(self.vertices))))
        bad = np.nonzero(norms <= _DEGENERATE_AREA * scale * scale)[0]
        if bad.size:
            raise MeshValidationError(f"degenerate (zero-area) triangle at face {int(bad[0])}")
        self.face_normals = cross / norms[:, None]
        self.face_areas = 0.5 * norms
        self.face_centroids = (v0 + v1 + v2) / 3.0

        self._build_edges()
        self._pseudonormals = None

    def _build_edges(self):
        tri = self.triangles
        # directed edges per face, in winding order
        directed = np.concatenate(
            [tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]], axis=0
        )
        face_of = np.tile(np.arange(len(tri)), 3)
        key = np.sort(directed, axis=1)
        order = np.lexsort((key[:, 1], key[:, 0]))
        key_sorted = key[order]
        uniq, first, counts = np.unique(
            key_sorted, axis=0, return_index=True, return_counts=True
        )
        self.edges = uniq
        n_edges = len(uniq)
        self.edge_faces = np.full((n_edges, 2), -1, dtype=np.int64)
        self._edge_extra: dict[int, list[int]] = {}
        self._edge_flip: dict[tuple[int, int], int] = {}
        faces_sorted = face_of[order]
        directed_sorted = directed[order]
        self._edge_forward = np.zeros((n_edges, 2), dtype=bool)
        for e in range(n_edges):
            start = first[e]
            cnt = counts[e]
            incident = faces_sorted[start : start + cnt]
            self.edge_faces[e, : min(2, cnt)] = incident[: min(2, cnt)]
            if cnt > 2:
                self._edge_extra[e] = list(incident[2:])
            for slot in range(min(2, cnt)):
                d = directed_sorted[start + slot]
                self._edge_forward[e, slot] = d[0] == uniq[e, 0]
        self.edge_index = {
            (int(a), int(b)): e for e, (a, b) in enumerate(self.edges)
        }

    # -- topology checks ---------------------------------------------------

    def nonmanifold_edges(self) -> list[int]:
        return sorted(self._edge_extra.keys())

    def is_watertight(self) -> bool:
        """True when every edge has exactly two incident faces."""
        if self._edge_extra:
            return False
        return bool(np.all(self.edge_faces[:, 1] >= 0))

    def boundary_edges(self) -> np.ndarray:
        return np.nonzero(self.edge_faces[:, 1] < 0)[0]

    def validate_orientation(self):
        """Check consistent winding: shared edges traversed in opposite order."""
        shared = (self.edge_faces[:, 1] >= 0) & ~np.isin(
            np.arange(len(self.edges)), list(self._edge_extra.keys())
        )
        bad = np.nonzero(shared & (self._edge_forward[:, 0] == self._edge_forward[:, 1]))[0]
        if bad.size:
            a, b = self.edges[bad[0]]
            raise MeshValidationError(
                f"inconsistent winding across edge ({int(a)}, {int(b)})"
            )

    # -- derived geometry ---------------------------------------------------

    def pseudonormals(self):
        """Angle-weighted vertex normals and averaged edge normals.

        Used by the signed interior test so that queries whose nearest
        point lands on an edge or vertex still classify correctly.
        """
        if self._pseudonormals is not None:
            return self._pseudonormals
        vn = np.zeros_like(self.vertices)
        tri = self.triangles
        pts = self.vertices
        for corner in range(3):
            a = pts[tri[:, corner]]
            b = pts[tri[:, (corner + 1) % 3]]
            c = pts[tri[:, (corner + 2) % 3]]
            u = b - a
            w = c - a
            cosang = np.einsum("ij,ij->i", u, w) / (
                np.linalg.norm(u, axis=1) * np.linalg.norm(w, axis=1)
            )
            ang = np.arccos(np.clip(cosang, -1.0, 1.0))
            np.add.at(vn, tri[:, corner], ang[:, None] * self.face_normals)
        norms = np.linalg.norm(vn, axis=1)
        norms[norms == 0] = 1.0
        vn /= norms[:, None]

        en = np.zeros((len(self.edges), 3))
        f0 = self.edge_faces[:, 0]
        f1 = self.edge_faces[:, 1]
        en += self.face_normals[f0]
        has2 = f1 >= 0
        en[has2] += self.face_normals[f1[has2]]
        norms = np.linalg.norm(en, axis=1)
        norms[norms == 0] = 1.0
        en /= norms[:, None]
        self._pseudonormals = (vn, en)
        return self._pseudonormals

    def centroid(self) -> np.ndarray:
        """Area-weighted surface centroid."""
        return self.face_areas @ self.face_centroids / self.face_areas.sum()

    def mean_edge_length(self) -> float:
        d = self.vertices[self.edges[:, 0]] - self.vertices[self.edges[:, 1]]
        return float(np.mean(np.linalg.norm(d, axis=1)))


@dataclass(frozen=True)
class OccludingEdge:
    """Mesh edge separating a front-facing from a back-facing triangle.

    `front_face` is the camera-facing triangle; `back_face` is -1 for a
    front-facing boundary edge of an open mesh.
    """

    endpoints: np.ndarray
    edge_id: int
    front_face: int
    back_face: int


def occluding_edges(mesh: TriangleMesh, camera_center: np.ndarray) -> list[OccludingEdge]:
    """Silhouette edges of `mesh` as seen from `camera_center`.

    An interior edge qualifies when its two faces disagree on front/back
    classification; a boundary edge qualifies when its single face is
    front-facing. Raises TopologyError on edges with more than two faces.
    """
    c = np.asarray(camera_center, dtype=float).reshape(3)
    # front-facing test per face, against the face centroid
    view = c[None, :] - mesh.face_centroids
    front = np.einsum("ij,ij->i", mesh.face_normals, view) > 0.0

    f0 = mesh.edge_faces[:, 0]
    f1 = mesh.edge_faces[:, 1]
    has2 = f1 >= 0
    front0 = front[f0]
    front1 = np.zeros(len(f0), dtype=bool)
    front1[has2] = front[f1[has2]]

    keep = np.where(has2, front0 != front1, front0)
    keep_ids = np.nonzero(keep)[0]

    if mesh._edge_extra:
        # the silhouette query touches every edge, so any >2-face edge is fatal
        e = min(mesh._edge_extra.keys())
        a, b = mesh.edges[e]
        raise TopologyError(
            f"non-manifold edge ({int(a)}, {int(b)}) with "
            f"{2 + len(mesh._edge_extra[e])} incident faces"
        )

    result = []
    for e in keep_ids:
        if front0[e]:
            ff, bf = int(f0[e]), int(f1[e])
        else:
            ff, bf = int(f1[e]), int(f0[e])
        result.append(
            OccludingEdge(
                endpoints=mesh.vertices[mesh.edges[e]].copy(),
                edge_id=int(e),
                front_face=ff,
                back_face=bf,
            )
        )
    return result


def occluding_edge_normal(
    mesh: TriangleMesh, edge: OccludingEdge, camera_center: np.ndarray
) -> np.ndarray:
    """3D contour normal of an occluding edge for a given viewpoint.

    The vector is orthogonal to both the viewing ray through the edge
    midpoint and the edge direction (so it is parallel to the image
    plane of a camera looking along that ray), and points from the
    back-facing side toward the front-facing side.
    """
    p0, p1 = edge.endpoints
    mid = 0.5 * (p0 + p1)
    view = mid - np.asarray(camera_center, dtype=float)
    direction = p1 - p0
    n = np.cross(view, direction)
    norm = np.linalg.norm(n)
    if norm < 1e-12:
        raise TopologyError(f"edge {edge.edge_id} is parallel to the view ray")
    n /= norm
    toward_front = mesh.face_centroids[edge.front_face] - mid
    if np.dot(n, toward_front) < 0.0:
        n = -n
    return n


# -- primitive builders used by tests and the synthetic generator ----------


def build_cube(half_extent: float = 1.0, inward: bool = False) -> TriangleMesh:
    """Axis-aligned cube [-h, h]^3; normals outward unless `inward`."""
    h = float(half_extent)
    verts = np.array(
        [[x, y, z] for x in (-h, h) for y in (-h, h) for z in (-h, h)], dtype=float
    )
    # each face split into two triangles, outward winding
    quads = [
        (0, 1, 3, 2),  # -x
        (4, 6, 7, 5),  # +x
        (0, 4, 5, 1),  # -y
        (2, 3, 7, 6),  # +y
        (0, 2, 6, 4),  # -z
        (1, 5, 7, 3),  # +z
    ]
    tris = []
    for a, b, c, d in quads:
        tris.append((a, b, c))
        tris.append((a, c, d))
    tris = np.array(tris, dtype=np.int64)
    if inward:
        tris = tris[:, [0, 2, 1]]
    return TriangleMesh(verts, tris)


_ICO_T = (1.0 + np.sqrt(5.0)) / 2.0
_ICO_VERTS = np.array(
    [
        [-1, _ICO_T, 0], [1, _ICO_T, 0], [-1, -_ICO_T, 0], [1, -_ICO_T, 0],
        [0, -1, _ICO_T], [0, 1, _ICO_T], [0, -1, -_ICO_T], [0, 1, -_ICO_T],
        [_ICO_T, 0, -1], [_ICO_T, 0, 1], [-_ICO_T, 0, -1], [-_ICO_T, 0, 1],
    ],
    dtype=float,
)
_ICO_FACES = np.array(
    [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ],
    dtype=np.int64,
)


def build_icosphere(radius: float = 1.0, subdivisions: int = 2, inward: bool = False) -> TriangleMesh:
    """Subdivided icosahedron projected onto a sphere.

    Face counts: 20 * 4^subdivisions (320 at level 2, 1280 at level 3).
    """
    verts = [v / np.linalg.norm(v) for v in _ICO_VERTS]
    faces = [tuple(f) for f in _ICO_FACES]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                m /= np.linalg.norm(m)
                verts.append(m)
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    verts = np.array(verts) * radius
    tris = np.array(faces, dtype=np.int64)
    if inward:
        tris = tris[:, [0, 2, 1]]
    return TriangleMesh(verts, tris)
