"""Software depth rendering and the per-frame visible contour set."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .camera import CameraFrame
from .mesh import OccludingEdge, TriangleMesh

RASTER_ZNEAR = 1e-4


@dataclass(frozen=True)
class DepthBuffer:
    """Per-pixel nearest surface depth (mm); +inf where nothing projects."""

    values: np.ndarray

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


def render_depth(mesh: TriangleMesh, frame: CameraFrame, znear: float = RASTER_ZNEAR) -> DepthBuffer:
    """Rasterize the mesh into a z-buffer at the frame's resolution."""
    k = frame.intrinsics
    verts_cam = np.ascontiguousarray(frame.extrinsic.apply(mesh.vertices))
    depth = np.full((k.height, k.width), np.inf)
    _kernels.rasterize_depth(
        verts_cam, mesh.triangles, k.fx, k.fy, k.cx, k.cy, k.width, k.height, znear, depth
    )
    return DepthBuffer(values=depth)


@dataclass(frozen=True)
class ContourSampleSet:
    """Visible model-contour samples of one frame, column-wise.

    Each sample carries its projection (pixels + in-image unit normal)
    and the generating 3D geometry (model point, 3D contour normal,
    source edge), which the pose solver needs to re-project the sample
    as the estimate moves.
    """

    frame_id: int
    positions: np.ndarray      # (n, 2) pixels
    normals: np.ndarray        # (n, 2) unit
    model_points: np.ndarray   # (n, 3) mm
    model_normals: np.ndarray  # (n, 3) unit
    depths: np.ndarray         # (n,) mm
    edge_ids: np.ndarray       # (n,)

    def __len__(self) -> int:
        return len(self.positions)

    @staticmethod
    def empty(frame_id: int) -> "ContourSampleSet":
        return ContourSampleSet(
            frame_id=frame_id,
            positions=np.zeros((0, 2)),
            normals=np.zeros((0, 2)),
            model_points=np.zeros((0, 3)),
            model_normals=np.zeros((0, 3)),
            depths=np.zeros(0),
            edge_ids=np.zeros(0, dtype=np.int64),
        )


def visible_contours(
    mesh: TriangleMesh,
    frame: CameraFrame,
    edges: list[OccludingEdge],
    tolerance: float = 1.0,
    depth_buffer: DepthBuffer | None = None,
) -> ContourSampleSet:
    """Sample occluding edges and keep the samples the z-buffer can see.

    Edges are sampled at <= 1 pixel projected spacing (uniform in image
    space, perspective-correct in 3D); a sample survives when its depth
    is within `tolerance` mm of the rendered depth at its pixel. Sample
    normals point from the back-facing side toward the front-facing side
    of their edge, projected orthographically into the image.
    """
    if depth_buffer is None:
        depth_buffer = render_depth(mesh, frame)
    if not edges:
        return ContourSampleSet.empty(frame.frame_id)

    k = frame.intrinsics
    ext = frame.extrinsic
    cam_center = frame.center

    p0 = np.array([e.endpoints[0] for e in edges])
    p1 = np.array([e.endpoints[1] for e in edges])
    edge_ids = np.array([e.edge_id for e in edges], dtype=np.int64)
    front = np.array([e.front_face for e in edges], dtype=np.int64)

    # 3D contour normal per edge: orthogonal to the midpoint view ray and
    # the edge direction, signed toward the front face
    mid = 0.5 * (p0 + p1)
    view = mid - cam_center
    direction = p1 - p0
    n3 = np.cross(view, direction)
    n3_len = np.linalg.norm(n3, axis=1)
    ok = n3_len > 1e-12
    n3[ok] /= n3_len[ok, None]
    toward_front = mesh.face_centroids[front] - mid
    flip = np.einsum("ij,ij->i", n3, toward_front) < 0.0
    n3[flip] = -n3[flip]

    # orthographic projection of the normals, in pixel units
    n_cam = n3 @ ext.rotation.T
    n2 = np.stack([k.fx * n_cam[:, 0], k.fy * n_cam[:, 1]], axis=1)
    n2_len = np.linalg.norm(n2, axis=1)
    ok &= n2_len > 1e-9
    n2[ok] /= n2_len[ok, None]

    # clip the segments to z >= znear in camera space
    c0 = ext.apply(p0)
    c1 = ext.apply(p1)
    z0, z1 = c0[:, 2], c1[:, 2]
    znear = RASTER_ZNEAR
    ok &= np.maximum(z0, z1) > znear
    dz = z1 - z0
    with np.errstate(divide="ignore", invalid="ignore"):
        t_cross = np.where(np.abs(dz) > 1e-300, (znear - z0) / dz, 0.0)
    t_lo = np.where(z0 < znear, t_cross, 0.0)
    t_hi = np.where(z1 < znear, t_cross, 1.0)
    ok &= t_hi > t_lo

    if not np.any(ok):
        return ContourSampleSet.empty(frame.frame_id)
    idx = np.nonzero(ok)[0]
    m0 = p0[idx] + t_lo[idx, None] * (p1[idx] - p0[idx])
    m1 = p0[idx] + t_hi[idx, None] * (p1[idx] - p0[idx])
    c0 = c0[idx] + t_lo[idx, None] * (c1[idx] - c0[idx])
    c1v = ext.apply(m1)
    z0 = c0[:, 2]
    z1 = c1v[:, 2]
    pix0 = np.stack([k.fx * c0[:, 0] / z0 + k.cx, k.fy * c0[:, 1] / z0 + k.cy], axis=1)
    pix1 = np.stack([k.fx * c1v[:, 0] / z1 + k.cx, k.fy * c1v[:, 1] / z1 + k.cy], axis=1)

    length_px = np.linalg.norm(pix1 - pix0, axis=1)
    counts = np.clip(np.ceil(length_px).astype(np.int64) + 1, 2, 4096)

    total = int(counts.sum())
    owner = np.repeat(np.arange(len(idx)), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(total) - starts[owner]
    sigma = local / (counts[owner] - 1)

    # perspective-correct interpolation along each edge
    w0 = (1.0 - sigma) / z0[owner]
    w1 = sigma / z1[owner]
    denom = w0 + w1
    depths = 1.0 / denom
    pix = pix0[owner] + sigma[:, None] * (pix1[owner] - pix0[owner])
    model_pts = (w0[:, None] * m0[owner] + w1[:, None] * m1[owner]) / denom[:, None]

    iu = np.round(pix[:, 0]).astype(np.int64)
    iv = np.round(pix[:, 1]).astype(np.int64)
    in_img = (iu >= 0) & (iu < k.width) & (iv >= 0) & (iv < k.height)
    survive = np.zeros(total, dtype=bool)
    buf = depth_buffer.values
    survive[in_img] = depths[in_img] <= buf[iv[in_img], iu[in_img]] + tolerance

    sel = np.nonzero(survive)[0]
    own = owner[sel]
    return ContourSampleSet(
        frame_id=frame.frame_id,
        positions=pix[sel],
        normals=n2[idx][own],
        model_points=model_pts[sel],
        model_normals=n3[idx][own],
        depths=depths[sel],
        edge_ids=edge_ids[idx][own],
    )
