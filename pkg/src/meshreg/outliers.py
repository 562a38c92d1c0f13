"""Robust rejection between the correspondence and registration phases.

3D matches: a worst-error fraction is trimmed first, then chi-square
tests with the match variance of the surviving inliers added to the
feature covariance. 2D matches: independent chi-square position and
orientation tests, with a per-frame cap on the rejected fraction.
"""

from __future__ import annotations

import math

import numpy as np

from .correspondence import Match2Set, Match3Set
from .exceptions import EmptyInlierError
from .geometry import NoiseModel, chi2_inv, normal_quantile_two_sided, von_mises_sigma
from .transforms import SimilarityTransform


def reject_outliers_3d(
    matches: Match3Set,
    transform: SimilarityTransform,
    noise: NoiseModel,
    trim_ratio: float | None = None,
) -> float:
    """Update 3D inlier flags in place; returns sigma^2_match.

    Order of operations: (1) flag out the ceil(trim * n) matches with
    the highest error values (ties to the lower index); (2) compute the
    mean squared Euclidean residual of the survivors; (3) flag out any
    survivor whose residual fails the chi-square test against the raw
    feature covariance inflated by sigma^2_match * I.
    """
    n = len(matches)
    if n == 0:
        raise EmptyInlierError("no 3D matches")
    trim = noise.trim_ratio_3d if trim_ratio is None else trim_ratio
    inlier = np.ones(n, dtype=bool)

    n_trim = int(math.ceil(trim * n)) if trim > 0 else 0
    if n_trim >= n:
        raise EmptyInlierError("trim ratio removed every 3D match")
    if n_trim > 0:
        order = np.lexsort((np.arange(n), -matches.values))
        inlier[order[:n_trim]] = False

    res = matches.residuals[inlier]
    sigma2 = float(np.mean(np.einsum("ni,ni->n", res, res)))

    threshold = chi2_inv(noise.chi2_p, 3)
    rot = transform.rotation
    idx = np.nonzero(inlier)[0]
    u = matches.residuals[idx] @ rot  # rows are R^T r
    cov = matches.covariances[idx] + sigma2 * np.eye(3)
    stat = np.einsum("ni,ni->n", u, np.linalg.solve(cov, u[..., None])[..., 0])
    inlier[idx[stat > threshold]] = False

    if not inlier.any():
        raise EmptyInlierError("chi-square test removed every 3D match")
    matches.inlier[:] = inlier
    return sigma2


def reject_outliers_2d(matches: Match2Set, noise: NoiseModel) -> float:
    """Update 2D inlier flags in place; returns sigma^2_match (pixels^2).

    Position and orientation are tested independently; the inflation
    variance is the mean squared pixel residual of the entry inliers.
    Rejections are capped per frame at the configured fraction of that
    frame's matches, keeping the worst offenders rejected.
    """
    if len(matches) == 0:
        return 0.0
    entry = matches.inlier.copy()
    if not entry.any():
        return 0.0

    d = matches.y_positions - matches.x_positions
    sq = np.einsum("ni,ni->n", d, d)
    sigma2 = float(np.mean(sq[entry]))

    cov = noise.sigma2d + sigma2 * np.eye(2)
    stat = np.einsum("ni,ni->n", d, np.linalg.solve(cov, d.T).T)
    pos_fail = stat > chi2_inv(noise.chi2_p, 2)

    dots = np.clip(
        np.einsum("ni,ni->n", matches.y_normals, matches.x_normals), -1.0, 1.0
    )
    angle = np.arccos(dots)
    gate = normal_quantile_two_sided(noise.chi2_p) * von_mises_sigma(noise.kappa)
    ori_fail = angle > gate

    fail = entry & (pos_fail | ori_fail)
    new_inlier = entry.copy()
    values = matches.values
    for fid in np.unique(matches.frame_ids):
        in_frame = matches.frame_ids == fid
        budget = int(math.floor(noise.contour_outlier_cap * int(in_frame.sum())))
        cand = np.nonzero(fail & in_frame)[0]
        if len(cand) > budget:
            order = np.lexsort((cand, -values[cand]))
            cand = cand[order[:budget]]
        new_inlier[cand] = False
    matches.inlier[:] = new_inlier
    return sigma2
