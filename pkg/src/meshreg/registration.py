"""Outer registration loop: correspond, reject, solve, constrain, repeat."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraFrame, frame_under_registration
from .correspondence import (
    Match2Set,
    Match3Set,
    correspond_2d,
    correspond_3d,
    covariance_balance_factor,
    total_error,
)
from .exceptions import (
    DegenerateGeometryError,
    EmptyInlierError,
    InfeasibleInitializationError,
    MeshregError,
)
from .geometry import Feature3D, NoiseModel
from .mesh import TriangleMesh, occluding_edges
from .outliers import reject_outliers_2d, reject_outliers_3d
from .render import render_depth, visible_contours
from .spatial import SpatialIndex, build_index, interior_signed_check
from .solver import solve_transform
from .transforms import SimilarityTransform, blend_transforms, delta_between

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverConfig:
    """Tunables of the outer loop and the inner Gauss-Newton solve."""

    scale_bounds: tuple[float, float] = (0.5, 2.0)
    max_outer_iterations: int = 100
    convergence_translation: float = 1e-3   # mm
    convergence_rotation: float = 1e-4      # radians
    convergence_scale: float = 1e-4         # |log scale ratio|
    inner_max_steps: int = 100
    inner_gradient_tol: float = 1e-12
    constraint_backup_fraction: float = 0.5
    rng_seed: int = 0
    visibility_tolerance: float = 1.0       # mm
    trim_decay_iterations: int = 10

    def __post_init__(self):
        s_min, s_max = self.scale_bounds
        if not (0 < s_min <= s_max):
            raise MeshregError("scale bounds must satisfy 0 < s_min <= s_max")
        for name in ("convergence_translation", "convergence_rotation", "convergence_scale"):
            if getattr(self, name) <= 0:
                raise MeshregError(f"{name} must be positive")
        if not 0.0 < self.constraint_backup_fraction < 1.0:
            raise MeshregError("constraint_backup_fraction must lie in (0, 1)")


@dataclass
class IterationRecord:
    iteration: int
    total_error: float
    n3d_inliers: int
    n2d_inliers: int
    sigma2_match: float
    mean_contour_all: float
    mean_contour_inliers: float
    delta_translation: float
    delta_rotation: float
    delta_log_scale: float
    backup_fraction: float
    feasible: bool


@dataclass
class RegistrationState:
    transform: SimilarityTransform
    iteration: int = 0
    records: list[IterationRecord] = field(default_factory=list)
    termination_reason: str = "running"


@dataclass
class RegistrationResult:
    transform: SimilarityTransform
    converged: bool
    iterations: int
    termination_reason: str
    mean_residual_3d: float
    mean_contour_all: float
    mean_contour_inliers: float
    history: list[IterationRecord]

    @property
    def contour_ranking_error(self) -> float:
        """Ranking key for multi-start: inlier contour error when the
        problem has contours, mean 3D residual otherwise."""
        if np.isfinite(self.mean_contour_inliers):
            return self.mean_contour_inliers
        return self.mean_residual_3d


def camera_centers_under(
    frames: list[CameraFrame], transform: SimilarityTransform
) -> np.ndarray:
    """Model-space optical centers of the cloud-attached cameras."""
    if not frames:
        return np.zeros((0, 3))
    return transform.apply(np.array([f.center for f in frames]))


def _all_feasible(mesh, index, frames, transform) -> bool:
    return all(
        interior_signed_check(mesh, index, c)[0]
        for c in camera_centers_under(frames, transform)
    )


def enforce_interior(
    frames: list[CameraFrame],
    mesh: TriangleMesh,
    index: SpatialIndex,
    t_prev: SimilarityTransform,
    t_new: SimilarityTransform,
    config: SolverConfig,
) -> tuple[SimilarityTransform, float]:
    """Keep every camera center inside the feasible interior.

    Returns (transform, retained update fraction). When `t_new` is
    infeasible the update is repeatedly blended back toward `t_prev` by
    the configured fraction until the cameras re-enter; the worst case
    returns `t_prev` itself.
    """
    if not frames:
        return t_new, 1.0
    if _all_feasible(mesh, index, frames, t_new):
        return t_new, 1.0
    fraction = config.constraint_backup_fraction
    gamma = fraction
    while gamma > 1e-6:
        candidate = blend_transforms(t_prev, t_new, gamma)
        if _all_feasible(mesh, index, frames, candidate):
            return candidate, gamma
        gamma *= fraction
    if not _all_feasible(mesh, index, frames, t_prev):
        raise InfeasibleInitializationError(
            "previous pose is itself infeasible; cannot back up"
        )
    return t_prev, 0.0


def _contour_sets(mesh, frames_model, config):
    sets = {}
    for f in frames_model:
        edges = occluding_edges(mesh, f.center)
        buffer = render_depth(mesh, f)
        sets[f.frame_id] = visible_contours(
            mesh, f, edges, tolerance=config.visibility_tolerance, depth_buffer=buffer
        )
    return sets


def _correspond_all(features, frames, mesh, index, transform, noise, config, balance, trim):
    frames_model = [frame_under_registration(f, transform) for f in frames]
    matches3 = None
    if features:
        matches3 = correspond_3d(features, mesh, index, transform, covariance_scale=balance)
    matches2 = None
    if any(len(f.contours) for f in frames):
        sets = _contour_sets(mesh, frames_model, config)
        matches2 = correspond_2d(frames_model, sets, noise)
    sigma2 = 0.0
    if matches3 is not None:
        sigma2 = reject_outliers_3d(matches3, transform, noise, trim_ratio=trim)
    if matches2 is not None:
        reject_outliers_2d(matches2, noise)
    return matches3, matches2, sigma2


def _contour_stats(matches2: Match2Set | None) -> tuple[float, float]:
    if matches2 is None or len(matches2) == 0:
        return float("nan"), float("nan")
    px = matches2.pixel_residuals
    usable = matches2.matched
    mean_all = float(px[usable].mean()) if usable.any() else float("nan")
    inl = matches2.inlier
    mean_in = float(px[inl].mean()) if inl.any() else float("nan")
    return mean_all, mean_in


def _residual_stats(matches3: Match3Set | None) -> float:
    if matches3 is None or not matches3.inlier.any():
        return float("nan")
    r = matches3.residuals[matches3.inlier]
    return float(np.linalg.norm(r, axis=1).mean())


def _trim_at(noise: NoiseModel, config: SolverConfig, iteration: int) -> float:
    if config.trim_decay_iterations <= 0:
        return noise.trim_ratio_3d
    return noise.trim_ratio_3d * max(0.0, 1.0 - iteration / config.trim_decay_iterations)


def register(
    features: list[Feature3D],
    frames: list[CameraFrame],
    mesh: TriangleMesh,
    t_init: SimilarityTransform,
    noise: NoiseModel,
    config: SolverConfig,
    index: SpatialIndex | None = None,
) -> RegistrationResult:
    """Full registration from an initial similarity estimate.

    Every outer iteration recomputes the visible contour sets for the
    current pose, matches 3D features and 2D contour points, rejects
    outliers, solves for the transform on the inliers, and backs the
    update off if a camera would leave the interior. Terminates when
    the transform deltas drop below the convergence thresholds or the
    iteration budget runs out.
    """
    if not features and not any(len(f.contours) for f in frames):
        raise EmptyInlierError("nothing to register: no features and no contours")
    if index is None:
        index = build_index(mesh)
    if frames and not _all_feasible(mesh, index, frames, t_init):
        raise InfeasibleInitializationError(
            "a camera center is outside the interior at the initial pose"
        )

    n3d = len(features)
    n2d = sum(len(f.contours) for f in frames)
    balance = covariance_balance_factor(n3d, noise.trim_ratio_3d, n2d)

    state = RegistrationState(transform=t_init)
    converged = False
    for k in range(config.max_outer_iterations):
        trim = _trim_at(noise, config, k)
        try:
            matches3, matches2, sigma2 = _correspond_all(
                features, frames, mesh, index, state.transform, noise, config, balance, trim
            )
            t_solved = solve_transform(
                matches3, matches2, frames, state.transform, config, noise=noise
            )
        except (DegenerateGeometryError, EmptyInlierError) as exc:
            state.termination_reason = (
                "degenerate_geometry" if isinstance(exc, DegenerateGeometryError) else "empty_inliers"
            )
            log.warning("registration aborted at iteration %d: %s", k, exc)
            break

        t_next, backup = enforce_interior(
            frames, mesh, index, state.transform, t_solved, config
        )
        dt, dr, ds = delta_between(state.transform, t_next)
        mean_all, mean_in = _contour_stats(matches2)
        state.records.append(
            IterationRecord(
                iteration=k,
                total_error=total_error(matches3, matches2),
                n3d_inliers=int(matches3.inlier.sum()) if matches3 is not None else 0,
                n2d_inliers=int(matches2.inlier.sum()) if matches2 is not None else 0,
                sigma2_match=sigma2,
                mean_contour_all=mean_all,
                mean_contour_inliers=mean_in,
                delta_translation=dt,
                delta_rotation=dr,
                delta_log_scale=ds,
                backup_fraction=backup,
                feasible=not frames or _all_feasible(mesh, index, frames, t_next),
            )
        )
        state.transform = t_next
        state.iteration = k + 1
        if (
            dt < config.convergence_translation
            and dr < config.convergence_rotation
            and ds < config.convergence_scale
        ):
            converged = True
            state.termination_reason = "converged"
            break
    else:
        state.termination_reason = "max_iterations"

    # final metrics at the returned pose
    try:
        matches3, matches2, _ = _correspond_all(
            features, frames, mesh, index, state.transform, noise, config,
            balance, _trim_at(noise, config, state.iteration),
        )
        mean_all, mean_in = _contour_stats(matches2)
        mean_res = _residual_stats(matches3)
    except (DegenerateGeometryError, EmptyInlierError):
        mean_all = mean_in = mean_res = float("nan")

    return RegistrationResult(
        transform=state.transform,
        converged=converged,
        iterations=state.iteration,
        termination_reason=state.termination_reason,
        mean_residual_3d=mean_res,
        mean_contour_all=mean_all,
        mean_contour_inliers=mean_in,
        history=state.records,
    )


@dataclass
class CandidateOutcome:
    """Outcome of one multi-start candidate, for the ranking table."""

    index: int
    result: RegistrationResult | None
    failure: str | None

    @property
    def ranking_error(self) -> float:
        if self.result is None:
            return float("inf")
        key = self.result.contour_ranking_error
        return key if np.isfinite(key) else float("inf")


def multistart_register(
    candidates: list[SimilarityTransform],
    features: list[Feature3D],
    frames: list[CameraFrame],
    mesh: TriangleMesh,
    noise: NoiseModel,
    config: SolverConfig,
    index: SpatialIndex | None = None,
) -> tuple[RegistrationResult, list[CandidateOutcome]]:
    """Run registration from every candidate and pick the winner.

    Candidates are ranked by inlier mean contour error (failures last,
    index breaking ties); the best result and the full ranking return
    together. Raises when every candidate fails.
    """
    if not candidates:
        raise EmptyInlierError("no initialization candidates")
    if index is None:
        index = build_index(mesh)
    outcomes = []
    for i, t_init in enumerate(candidates):
        try:
            result = register(features, frames, mesh, t_init, noise, config, index=index)
            outcomes.append(CandidateOutcome(index=i, result=result, failure=None))
        except MeshregError as exc:
            log.warning("candidate %d failed: %s", i, exc)
            outcomes.append(CandidateOutcome(index=i, result=None, failure=str(exc)))
    ranking = sorted(outcomes, key=lambda o: (o.ranking_error, o.index))
    best = ranking[0]
    if best.result is None:
        reasons = "; ".join(f"candidate {o.index}: {o.failure}" for o in outcomes)
        raise MeshregError(f"all initialization candidates failed ({reasons})")
    return best.result, ranking
