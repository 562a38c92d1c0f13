"""Correspondence phase: most-likely 3D matches and gated 2D contour matches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Feature3D, NoiseModel
from .mesh import TriangleMesh
from .render import ContourSampleSet
from .spatial import SpatialIndex, most_likely_points
from .transforms import SimilarityTransform

_CHUNK = 256


@dataclass
class Match3Set:
    """3D feature matches, column-wise. `inlier` is updated by rejection."""

    feature_index: np.ndarray     # (n,)
    source_positions: np.ndarray  # (n, 3) untransformed data points
    covariances: np.ndarray       # (n, 3, 3) raw feature covariances
    covariance_scale: float       # balance factor applied in error values
    model_points: np.ndarray      # (n, 3) matched surface points
    values: np.ndarray            # (n,) match error values
    residuals: np.ndarray         # (n, 3) y - T(x)
    inlier: np.ndarray            # (n,) bool

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class Match2Set:
    """2D contour matches, column-wise, grouped across frames.

    `gated` marks points that had no orientation-admissible candidate;
    they are non-inliers whose recorded error saturates the gate.
    """

    contour_index: np.ndarray   # (n,) index within the owning frame
    frame_ids: np.ndarray       # (n,)
    x_positions: np.ndarray     # (n, 2) video pixels
    x_normals: np.ndarray       # (n, 2)
    y_positions: np.ndarray     # (n, 2) matched sample pixels
    y_normals: np.ndarray       # (n, 2)
    model_points: np.ndarray    # (n, 3) matched sample 3D points
    model_normals: np.ndarray   # (n, 3)
    positional: np.ndarray      # (n,)
    orientation: np.ndarray     # (n,)
    inlier: np.ndarray          # (n,) bool
    gated: np.ndarray           # (n,) bool
    matched: np.ndarray         # (n,) bool; False when the frame had no candidates

    def __len__(self) -> int:
        return len(self.positional)

    @property
    def values(self) -> np.ndarray:
        return self.positional + self.orientation

    @property
    def pixel_residuals(self) -> np.ndarray:
        return np.linalg.norm(self.y_positions - self.x_positions, axis=1)


def covariance_balance_factor(n3d: int, initial_trim: float, n2d: int) -> float:
    """Factor multiplying the 3D covariances so both feature sets carry
    equal total influence: n3d * (1 - pt) / n2d.

    Returns 1 when either feature set is empty (nothing to balance).
    """
    if n3d <= 0 or n2d <= 0:
        return 1.0
    return n3d * (1.0 - initial_trim) / n2d


def correspond_3d(
    features: list[Feature3D],
    mesh: TriangleMesh,
    index: SpatialIndex,
    transform: SimilarityTransform,
    covariance_scale: float = 1.0,
) -> Match3Set:
    """Most-likely surface match for every 3D feature under `transform`.

    `covariance_scale` multiplies the feature covariances in the error
    metric (the set-balance factor); it does not affect which point wins.
    """
    n = len(features)
    positions = np.array([f.position for f in features]).reshape(n, 3)
    covs = np.array([f.covariance for f in features]).reshape(n, 3, 3)
    queries = transform.apply(positions)
    rot = transform.rotation
    inv = np.linalg.inv(covs * covariance_scale)
    weights = np.einsum("ij,njk,lk->nil", rot, inv, rot)
    weights = 0.5 * (weights + weights.transpose(0, 2, 1))
    points, _, errs = most_likely_points(mesh, index, queries, weights)
    return Match3Set(
        feature_index=np.arange(n, dtype=np.int64),
        source_positions=positions,
        covariances=covs,
        covariance_scale=covariance_scale,
        model_points=points,
        values=errs,
        residuals=points - queries,
        inlier=np.ones(n, dtype=bool),
    )


def correspond_2d(
    frames,
    contour_sets: dict[int, ContourSampleSet],
    noise: NoiseModel,
) -> Match2Set:
    """Match video contour points to visible model-contour samples.

    Candidates are the frame's visible sample set; only candidates whose
    normal deviates from the video normal by at most the orientation
    gate are admissible. Points with no admissible candidate are flagged
    non-inlier (gated) and score the best unrestricted positional term
    plus a gate-saturated orientation term. Ties take the lowest
    candidate index.
    """
    sigma_inv = np.linalg.inv(noise.sigma2d)
    cos_gate = float(np.cos(noise.orientation_gate))
    kappa = noise.kappa
    gate_orientation = kappa * (1.0 - cos_gate)

    cols: dict[str, list[np.ndarray]] = {k: [] for k in (
        "contour_index", "frame_ids", "x_positions", "x_normals", "y_positions",
        "y_normals", "model_points", "model_normals", "positional", "orientation",
        "inlier", "gated", "matched",
    )}

    for frame in frames:
        n_pts = len(frame.contours)
        if n_pts == 0:
            continue
        samples = contour_sets.get(frame.frame_id)
        x_pos = np.array([c.position for c in frame.contours]).reshape(n_pts, 2)
        x_nrm = np.array([c.normal for c in frame.contours]).reshape(n_pts, 2)

        if samples is None or len(samples) == 0:
            cols["contour_index"].append(np.arange(n_pts, dtype=np.int64))
            cols["frame_ids"].append(np.full(n_pts, frame.frame_id, dtype=np.int64))
            cols["x_positions"].append(x_pos)
            cols["x_normals"].append(x_nrm)
            cols["y_positions"].append(x_pos.copy())
            cols["y_normals"].append(x_nrm.copy())
            cols["model_points"].append(np.zeros((n_pts, 3)))
            cols["model_normals"].append(np.zeros((n_pts, 3)))
            cols["positional"].append(np.zeros(n_pts))
            cols["orientation"].append(np.full(n_pts, gate_orientation))
            cols["inlier"].append(np.zeros(n_pts, dtype=bool))
            cols["gated"].append(np.ones(n_pts, dtype=bool))
            cols["matched"].append(np.zeros(n_pts, dtype=bool))
            continue

        c_pos = samples.positions
        c_nrm = samples.normals
        best = np.empty(n_pts, dtype=np.int64)
        best_pos_term = np.empty(n_pts)
        best_orient = np.empty(n_pts)
        gated = np.empty(n_pts, dtype=bool)
        for lo in range(0, n_pts, _CHUNK):
            hi = min(lo + _CHUNK, n_pts)
            d = c_pos[None, :, :] - x_pos[lo:hi, None, :]
            pos_term = 0.5 * np.einsum("cmi,ij,cmj->cm", d, sigma_inv, d)
            dots = np.clip(x_nrm[lo:hi] @ c_nrm.T, -1.0, 1.0)
            value = pos_term + kappa * (1.0 - dots)
            admissible = dots >= cos_gate
            masked = np.where(admissible, value, np.inf)
            idx = np.argmin(masked, axis=1)
            rows = np.arange(hi - lo)
            g = ~admissible[rows, idx]
            # gated points fall back to the best unrestricted candidate
            idx_free = np.argmin(value, axis=1)
            idx = np.where(g, idx_free, idx)
            best[lo:hi] = idx
            best_pos_term[lo:hi] = pos_term[rows, idx]
            best_orient[lo:hi] = np.where(
                g, gate_orientation, kappa * (1.0 - dots[rows, idx])
            )
            gated[lo:hi] = g

        cols["contour_index"].append(np.arange(n_pts, dtype=np.int64))
        cols["frame_ids"].append(np.full(n_pts, frame.frame_id, dtype=np.int64))
        cols["x_positions"].append(x_pos)
        cols["x_normals"].append(x_nrm)
        cols["y_positions"].append(c_pos[best])
        cols["y_normals"].append(c_nrm[best])
        cols["model_points"].append(samples.model_points[best])
        cols["model_normals"].append(samples.model_normals[best])
        cols["positional"].append(best_pos_term)
        cols["orientation"].append(best_orient)
        cols["inlier"].append(~gated)
        cols["gated"].append(gated)
        cols["matched"].append(np.ones(n_pts, dtype=bool))

    if not cols["positional"]:
        empty2 = np.zeros((0, 2))
        empty3 = np.zeros((0, 3))
        return Match2Set(
            contour_index=np.zeros(0, dtype=np.int64),
            frame_ids=np.zeros(0, dtype=np.int64),
            x_positions=empty2, x_normals=empty2.copy(),
            y_positions=empty2.copy(), y_normals=empty2.copy(),
            model_points=empty3, model_normals=empty3.copy(),
            positional=np.zeros(0), orientation=np.zeros(0),
            inlier=np.zeros(0, dtype=bool), gated=np.zeros(0, dtype=bool),
            matched=np.zeros(0, dtype=bool),
        )
    return Match2Set(**{k: np.concatenate(v, axis=0) for k, v in cols.items()})


def total_error(
    matches3: Match3Set | None,
    matches2: Match2Set | None,
    balance_factor: float = 1.0,
) -> float:
    """Total match error over inliers.

    When the 3D error values were computed under unnormalized
    covariances, pass the balance factor here; values already computed
    under pre-balanced covariances use the default of 1.
    """
    total = 0.0
    if matches3 is not None and len(matches3):
        total += float(matches3.values[matches3.inlier].sum()) / balance_factor
    if matches2 is not None and len(matches2):
        total += float(matches2.values[matches2.inlier].sum())
    return total
