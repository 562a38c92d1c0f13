"""Feature types, per-match error terms, and the distribution utilities.

The two error terms are the negative log likelihoods (up to constants) of
an anisotropic Gaussian positional model in 3D and of a Gaussian + von
Mises positional/orientation model for projected 2D contour features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .exceptions import DomainError, InvalidCovarianceError
from .transforms import SimilarityTransform


def check_spd(matrix: np.ndarray, name: str = "covariance") -> np.ndarray:
    """Cholesky factor of an SPD matrix; raises InvalidCovarianceError."""
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InvalidCovarianceError(f"{name} must be square, got shape {m.shape}")
    if np.max(np.abs(m - m.T)) > 1e-9 * max(1.0, np.max(np.abs(m))):
        raise InvalidCovarianceError(f"{name} is not symmetric")
    try:
        return np.linalg.cholesky(m)
    except np.linalg.LinAlgError as exc:
        raise InvalidCovarianceError(f"{name} is not positive definite") from exc


@dataclass(frozen=True)
class Feature3D:
    """3D data point with positional covariance (mm, mm^2)."""

    position: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "covariance", np.asarray(self.covariance, dtype=float).reshape(3, 3))
        check_spd(self.covariance)


@dataclass(frozen=True)
class OrientedContourPoint:
    """2D contour feature: pixel position plus unit normal, per frame."""

    position: np.ndarray
    normal: np.ndarray
    frame_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(2))
        n = np.asarray(self.normal, dtype=float).reshape(2)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            n = n / np.linalg.norm(n)
        object.__setattr__(self, "normal", n)


@dataclass(frozen=True)
class NoiseModel:
    """Measurement noise parameters plus the robustness knobs.

    sigma2d is the 2x2 pixel covariance of contour positions, kappa the
    von Mises concentration of contour orientations, sigma3d_default the
    covariance assigned to 3D features that were ingested without one.
    trim_ratio_3d, chi2_p, orientation_gate and contour_outlier_cap drive
    outlier handling during registration.
    """

    sigma2d: np.ndarray = field(default_factory=lambda: 9.0 * np.eye(2))
    kappa: float = 200.0
    sigma3d_default: np.ndarray = field(default_factory=lambda: 0.25 * np.eye(3))
    trim_ratio_3d: float = 0.1
    chi2_p: float = 0.95
    orientation_gate: float = math.radians(45.0)
    contour_outlier_cap: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "sigma2d", np.asarray(self.sigma2d, dtype=float).reshape(2, 2))
        object.__setattr__(self, "sigma3d_default", np.asarray(self.sigma3d_default, dtype=float).reshape(3, 3))
        check_spd(self.sigma2d, "sigma2d")
        check_spd(self.sigma3d_default, "sigma3d_default")
        if self.kappa <= 0:
            raise DomainError("kappa must be positive")
        if not 0.0 <= self.trim_ratio_3d < 1.0:
            raise DomainError("trim_ratio_3d must lie in [0, 1)")
        if not 0.0 < self.chi2_p < 1.0:
            raise DomainError("chi2_p must lie in (0, 1)")
        if not 0.0 < self.contour_outlier_cap <= 1.0:
            raise DomainError("contour_outlier_cap must lie in (0, 1]")


@dataclass(frozen=True)
class MatchError3:
    """Half squared Mahalanobis distance of one 3D match, with residual."""

    value: float
    residual: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "residual", np.asarray(self.residual, dtype=float).reshape(3))
        if self.value < 0:
            raise DomainError("match error must be nonnegative")


@dataclass(frozen=True)
class MatchError2:
    """2D contour match error split into positional and orientation parts."""

    positional_term: float
    orientation_term: float

    @property
    def value(self) -> float:
        return self.positional_term + self.orientation_term


def match_error_3d(
    feature: Feature3D, model_point: np.ndarray, transform: SimilarityTransform
) -> MatchError3:
    """Error of matching `feature` (moved by `transform`) to `model_point`.

    value = 0.5 * r^T (R Sigma R^T)^-1 r   with   r = y - s R x - t.
    """
    r = np.asarray(model_point, dtype=float) - transform.apply(feature.position)
    rot = transform.rotation
    # (R Sigma R^T)^-1 r  ==  R Sigma^-1 R^T r, via one SPD solve
    u = rot.T @ r
    chol = check_spd(feature.covariance)
    w = np.linalg.solve(chol.T, np.linalg.solve(chol, u))
    return MatchError3(value=float(0.5 * u @ w), residual=r)


def match_error_2d(
    contour_point: OrientedContourPoint,
    candidate_position: np.ndarray,
    candidate_normal: np.ndarray,
    noise: NoiseModel,
) -> MatchError2:
    """Projected contour match error against one candidate sample.

    positional = 0.5 * (y - x)^T Sigma2d^-1 (y - x), orientation =
    kappa * (1 - y_n . x_n).
    """
    d = np.asarray(candidate_position, dtype=float) - contour_point.position
    pos = 0.5 * float(d @ np.linalg.solve(noise.sigma2d, d))
    dot = float(np.dot(np.asarray(candidate_normal, dtype=float), contour_point.normal))
    orient = noise.kappa * (1.0 - np.clip(dot, -1.0, 1.0))
    return MatchError2(positional_term=pos, orientation_term=orient)


def chi2_cdf(x: float, dof: int) -> float:
    """Chi-square CDF via the regularized lower incomplete gamma."""
    if x <= 0.0:
        return 0.0
    return float(special.gammainc(dof / 2.0, x / 2.0))


def chi2_inv(p: float, dof: int) -> float:
    """Inverse chi-square CDF by safeguarded Newton on the incomplete gamma.

    Supports any p in (0, 1); dof must be a positive integer.
    """
    if not 0.0 < p < 1.0:
        raise DomainError(f"probability must lie in (0, 1), got {p}")
    if dof < 1 or int(dof) != dof:
        raise DomainError(f"dof must be a positive integer, got {dof}")
    k = int(dof)

    # Wilson-Hilferty starting point
    z = special.ndtri(p)
    x = k * (1.0 - 2.0 / (9.0 * k) + z * math.sqrt(2.0 / (9.0 * k))) ** 3
    x = max(x, 1e-12)

    lo, hi = 0.0, max(10.0 * k, x * 10.0)
    while chi2_cdf(hi, k) < p:
        hi *= 2.0
    log_norm = (k / 2.0) * math.log(2.0) + math.lgamma(k / 2.0)
    for _ in range(200):
        f = chi2_cdf(x, k) - p
        if f > 0:
            hi = x
        else:
            lo = x
        if abs(f) < 1e-15:
            break
        log_pdf = (k / 2.0 - 1.0) * math.log(x) - x / 2.0 - log_norm
        pdf = math.exp(log_pdf) if log_pdf > -700 else 0.0
        if pdf > 0:
            step = f / pdf
            x_new = x - step
        else:
            x_new = (lo + hi) / 2.0
        if not lo < x_new < hi:
            x_new = (lo + hi) / 2.0
        if abs(x_new - x) < 1e-14 * max(1.0, x):
            x = x_new
            break
        x = x_new
    return float(x)


def von_mises_sigma(kappa: float) -> float:
    """Standard deviation 1/sqrt(kappa) of the normal approximation."""
    if kappa <= 0:
        raise DomainError(f"kappa must be positive, got {kappa}")
    return 1.0 / math.sqrt(kappa)


def normal_quantile_two_sided(p: float) -> float:
    """z such that a zero-mean unit normal lies in [-z, z] with mass p."""
    if not 0.0 < p < 1.0:
        raise DomainError(f"probability must lie in (0, 1), got {p}")
    return float(special.ndtri((1.0 + p) / 2.0))
