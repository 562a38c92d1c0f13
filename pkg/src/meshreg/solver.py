"""Fixed-correspondence pose solve by damped Gauss-Newton.

Parameterization: theta = (a, w, t) with scale s = exp(a), rotation
updated by the left exponential map R <- exp([w]x) R, and translation t.
Key identities that keep the least-squares structure exact:

- 3D term:  C3 = 0.5 * u^T Sigma^-1 u   with  u = R^T (y - t) - s x,
  so the weight matrix is constant even though the likelihood rotates
  the covariance with R.
- 2D term: a matched contour sample is a fixed model-space point p with
  a fixed model-space contour normal m; the camera-from-model pose
  induced by the estimate gives camera coordinates
      X = R_B R^T (p - t) - s R_B c_B
  where (R_B, c_B) are the frame's fixed rotation and optical center in
  cloud coordinates. Pixels follow by perspective projection, the
  projected normal by orthographic projection of R_B R^T m.

The orientation part kappa * (1 - cos theta) enters the normal
equations through its small-angle residual sqrt(kappa) * theta; line
search and convergence use the exact objective.
"""

from __future__ import annotations

import numpy as np

from .camera import MIN_DEPTH, CameraFrame
from .correspondence import Match2Set, Match3Set
from .exceptions import DegenerateGeometryError
from .geometry import NoiseModel
from .transforms import SimilarityTransform, rotation_exp, skew

_EIG_RATIO = 1e-12


def _skew_batch(v: np.ndarray) -> np.ndarray:
    n = len(v)
    out = np.zeros((n, 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out


class _Problem3D:
    """Frozen 3D inlier matches prepared for repeated evaluation."""

    def __init__(self, matches: Match3Set):
        keep = matches.inlier
        self.x = matches.source_positions[keep]
        self.y = matches.model_points[keep]
        cov = matches.covariances[keep] * matches.covariance_scale
        self.cov_inv = np.linalg.inv(cov)
        chol = np.linalg.cholesky(cov)
        self.whiten = np.linalg.inv(chol)  # L^-1 with Sigma = L L^T
        self.n = len(self.x)

    def residuals(self, s: float, rot: np.ndarray, t: np.ndarray) -> np.ndarray:
        u = (self.y - t) @ rot - s * self.x
        return np.einsum("nij,nj->ni", self.whiten, u)

    def objective(self, s, rot, t) -> float:
        e = self.residuals(s, rot, t)
        return 0.5 * float(np.einsum("ni,ni->", e, e))

    def jacobian(self, s, rot, t):
        """Whitened residuals and their (n,3,7) Jacobian."""
        u = (self.y - t) @ rot - s * self.x
        j = np.empty((self.n, 3, 7))
        j[:, :, 0] = -s * self.x
        j[:, :, 1:4] = np.einsum("ij,njk->nik", rot.T, _skew_batch(self.y - t))
        j[:, :, 4:7] = -rot.T
        e = np.einsum("nij,nj->ni", self.whiten, u)
        jw = np.einsum("nij,njk->nik", self.whiten, j)
        return e, jw


class _Problem2D:
    """Frozen 2D inlier matches with per-match camera constants."""

    def __init__(self, matches: Match2Set, frames: list[CameraFrame], noise: NoiseModel):
        keep = matches.inlier
        self.p = matches.model_points[keep]
        self.m = matches.model_normals[keep]
        self.x_px = matches.x_positions[keep]
        self.x_n = matches.x_normals[keep]
        by_id = {f.frame_id: f for f in frames}
        fids = matches.frame_ids[keep]
        self.rb = np.array([by_id[i].extrinsic.rotation for i in fids]).reshape(-1, 3, 3)
        self.cb = np.array([by_id[i].center for i in fids]).reshape(-1, 3)
        self.fx = np.array([by_id[i].intrinsics.fx for i in fids])
        self.fy = np.array([by_id[i].intrinsics.fy for i in fids])
        self.cx = np.array([by_id[i].intrinsics.cx for i in fids])
        self.cy = np.array([by_id[i].intrinsics.cy for i in fids])
        self.sigma_inv = np.linalg.inv(noise.sigma2d)
        self.whiten2 = np.linalg.inv(np.linalg.cholesky(noise.sigma2d))
        self.kappa = noise.kappa
        self.n = len(self.p)

    def _camera_points(self, s, rot, t):
        w = (self.p - t) @ rot
        return np.einsum("nij,nj->ni", self.rb, w) - s * np.einsum(
            "nij,nj->ni", self.rb, self.cb
        )

    def _normal_vectors(self, rot):
        n_cam = np.einsum("nij,nj->ni", self.rb, self.m @ rot)
        return np.stack([self.fx * n_cam[:, 0], self.fy * n_cam[:, 1]], axis=1)

    def objective(self, s, rot, t) -> float:
        """Exact objective; +inf when a sample leaves the view frustum."""
        if self.n == 0:
            return 0.0
        cam = self._camera_points(s, rot, t)
        z = cam[:, 2]
        if np.any(z <= MIN_DEPTH):
            return np.inf
        pix = np.stack(
            [self.fx * cam[:, 0] / z + self.cx, self.fy * cam[:, 1] / z + self.cy], axis=1
        )
        d = pix - self.x_px
        pos = 0.5 * float(np.einsum("ni,ij,nj->", d, self.sigma_inv, d))
        v = self._normal_vectors(rot)
        norms = np.linalg.norm(v, axis=1)
        if np.any(norms < 1e-9):
            return np.inf
        dots = np.einsum("ni,ni->n", v / norms[:, None], self.x_n)
        orient = self.kappa * float(np.sum(1.0 - np.clip(dots, -1.0, 1.0)))
        return pos + orient

    def jacobian(self, s, rot, t):
        """Residual rows (2 positional + 1 orientation per match).

        Fails with None when any sample is behind the camera; the caller
        treats that as an infinite-objective state.
        """
        cam = self._camera_points(s, rot, t)
        z = cam[:, 2]
        if np.any(z <= MIN_DEPTH):
            return None, None
        pix = np.stack(
            [self.fx * cam[:, 0] / z + self.cx, self.fy * cam[:, 1] / z + self.cy], axis=1
        )
        e_pos = np.einsum("ij,nj->ni", self.whiten2, pix - self.x_px)

        # dX/dtheta, (n, 3, 7)
        jx = np.empty((self.n, 3, 7))
        jx[:, :, 0] = -s * np.einsum("nij,nj->ni", self.rb, self.cb)
        rbrt = np.einsum("nij,kj->nik", self.rb, rot)
        jx[:, :, 1:4] = np.einsum("nij,njk->nik", rbrt, _skew_batch(self.p - t))
        jx[:, :, 4:7] = -rbrt

        # pixel projection Jacobian, (n, 2, 3)
        jp = np.zeros((self.n, 2, 3))
        jp[:, 0, 0] = self.fx / z
        jp[:, 0, 2] = -self.fx * cam[:, 0] / z**2
        jp[:, 1, 1] = self.fy / z
        jp[:, 1, 2] = -self.fy * cam[:, 1] / z**2
        j_pos = np.einsum("ij,njk,nkl->nil", self.whiten2, jp, jx)

        # orientation rows
        v = self._normal_vectors(rot)
        nv = np.linalg.norm(v, axis=1)
        if np.any(nv < 1e-9):
            return None, None
        vh = v / nv[:, None]
        cross = vh[:, 0] * self.x_n[:, 1] - vh[:, 1] * self.x_n[:, 0]
        dots = np.einsum("ni,ni->n", vh, self.x_n)
        theta = np.arctan2(cross, dots)
        e_or = np.sqrt(self.kappa) * theta
        # dtheta/dv then dv/dw
        dtheta_dv = np.stack([v[:, 1], -v[:, 0]], axis=1) / (nv**2)[:, None]
        dn_dw = np.einsum("nij,njk->nik", rbrt, _skew_batch(self.m))
        dv_dw = np.stack([self.fx[:, None] * dn_dw[:, 0, :], self.fy[:, None] * dn_dw[:, 1, :]], axis=1)
        j_or = np.zeros((self.n, 1, 7))
        j_or[:, 0, 1:4] = np.sqrt(self.kappa) * np.einsum("ni,nik->nk", dtheta_dv, dv_dw)

        e = np.concatenate([e_pos.reshape(-1), e_or])
        j = np.concatenate([j_pos.reshape(-1, 7), j_or.reshape(-1, 7)])
        return e, j


def _objective(p3, p2, s, rot, t) -> float:
    total = 0.0
    if p3 is not None and p3.n:
        total += p3.objective(s, rot, t)
    if p2 is not None and p2.n:
        total += p2.objective(s, rot, t)
    return total


def solve_transform(
    matches3: Match3Set | None,
    matches2: Match2Set | None,
    frames: list[CameraFrame],
    t_init: SimilarityTransform,
    config,
    noise: NoiseModel | None = None,
) -> SimilarityTransform:
    """Minimize the total match error over the similarity transform.

    Correspondences and inlier flags stay frozen; the returned transform
    never has a larger objective than `t_init` and its scale respects
    the configured bounds (log-scale is clamped after each step). Raises
    DegenerateGeometryError when the normal equations are rank deficient.
    """
    p3 = _Problem3D(matches3) if matches3 is not None and matches3.inlier.any() else None
    if matches2 is not None and matches2.inlier.any():
        if noise is None:
            raise ValueError("noise model required when 2D matches are present")
        p2 = _Problem2D(matches2, frames, noise)
    else:
        p2 = None
    if p3 is None and p2 is None:
        raise DegenerateGeometryError("no inlier matches to solve from")

    s_min, s_max = config.scale_bounds
    fixed_scale = abs(s_max - s_min) < 1e-15
    a_min, a_max = np.log(s_min), np.log(s_max)

    s = float(np.clip(t_init.scale, s_min, s_max))
    rot = t_init.rotation.copy()
    t = t_init.translation.copy()
    obj = _objective(p3, p2, s, rot, t)
    if not np.isfinite(obj):
        # init already outside the view frustum: nothing safe to do
        return SimilarityTransform(s, rot, t)

    lam = 1e-6
    checked_rank = False
    for _ in range(config.inner_max_steps):
        blocks = []
        if p3 is not None:
            e3, j3 = p3.jacobian(s, rot, t)
            blocks.append((e3.reshape(-1), j3.reshape(-1, 7)))
        if p2 is not None:
            e2, j2 = p2.jacobian(s, rot, t)
            if e2 is None:
                break
            blocks.append((e2, j2))
        e = np.concatenate([b[0] for b in blocks])
        jac = np.concatenate([b[1] for b in blocks])
        if fixed_scale:
            jac = jac[:, 1:]
        h = jac.T @ jac
        g = jac.T @ e

        if not checked_rank:
            eig = np.linalg.eigvalsh(h)
            if eig[0] <= _EIG_RATIO * max(eig[-1], 1e-30):
                raise DegenerateGeometryError(
                    f"normal equations are rank deficient (eigenvalue ratio {eig[0] / max(eig[-1], 1e-300):.2e})"
                )
            checked_rank = True

        if np.max(np.abs(g)) < config.inner_gradient_tol:
            break

        accepted = False
        for _ in range(60):
            try:
                step = np.linalg.solve(h + lam * np.diag(np.diag(h)) + 1e-300 * np.eye(h.shape[0]), -g)
            except np.linalg.LinAlgError:
                lam = max(lam, 1e-12) * 10.0
                continue
            if fixed_scale:
                da, dw, dt = 0.0, step[0:3], step[3:6]
            else:
                da, dw, dt = step[0], step[1:4], step[4:7]
            s_new = float(np.clip(np.exp(np.log(s) + da), s_min, s_max))
            rot_new = rotation_exp(dw) @ rot
            t_new = t + dt
            obj_new = _objective(p3, p2, s_new, rot_new, t_new)
            if obj_new <= obj:
                improvement = obj - obj_new
                s, rot, t, obj = s_new, rot_new, t_new, obj_new
                lam = max(lam / 3.0, 1e-12)
                accepted = True
                break
            lam = max(lam, 1e-12) * 4.0
            if lam > 1e12:
                break
        if not accepted:
            break
        if improvement <= 1e-15 * max(obj, 1.0):
            break

    if not fixed_scale:
        s = float(np.clip(s, s_min, s_max))
    return SimilarityTransform(scale=s, rotation=rot, translation=t)


# -- exact per-term gradients (used for derivative verification) ----------


def _perturb(transform: SimilarityTransform, delta: np.ndarray) -> SimilarityTransform:
    """Apply the local parameterization (da, dw, dt) to a transform."""
    return SimilarityTransform(
        scale=float(transform.scale * np.exp(delta[0])),
        rotation=rotation_exp(delta[1:4]) @ transform.rotation,
        translation=transform.translation + delta[4:7],
    )


def pose_gradient_3d(
    x: np.ndarray, y: np.ndarray, covariance: np.ndarray, transform: SimilarityTransform
) -> np.ndarray:
    """Exact gradient of the 3D match error in the (a, w, t) chart."""
    s, rot, t = transform.scale, transform.rotation, transform.translation
    u = rot.T @ (np.asarray(y, dtype=float) - t) - s * np.asarray(x, dtype=float)
    w = np.linalg.solve(covariance, u)
    j = np.empty((3, 7))
    j[:, 0] = -s * np.asarray(x, dtype=float)
    j[:, 1:4] = rot.T @ skew(np.asarray(y, dtype=float) - t)
    j[:, 4:7] = -rot.T
    return j.T @ w


def pose_gradient_2d(
    model_point: np.ndarray,
    model_normal: np.ndarray,
    video_position: np.ndarray,
    video_normal: np.ndarray,
    frame: CameraFrame,
    transform: SimilarityTransform,
    noise: NoiseModel,
) -> np.ndarray:
    """Exact gradient of the 2D contour match error in the (a, w, t) chart.

    Unlike the Gauss-Newton residual, this differentiates the true
    kappa * (1 - cos) orientation term.
    """
    s, rot, t = transform.scale, transform.rotation, transform.translation
    rb = frame.extrinsic.rotation
    cb = frame.center
    k = frame.intrinsics
    p = np.asarray(model_point, dtype=float)
    m = np.asarray(model_normal, dtype=float)

    rbrt = rb @ rot.T
    cam = rbrt @ (p - t) - s * (rb @ cb)
    z = cam[2]
    pix = np.array([k.fx * cam[0] / z + k.cx, k.fy * cam[1] / z + k.cy])
    d = pix - np.asarray(video_position, dtype=float)

    jx = np.empty((3, 7))
    jx[:, 0] = -s * (rb @ cb)
    jx[:, 1:4] = rbrt @ skew(p - t)
    jx[:, 4:7] = -rbrt
    jp = np.array(
        [
            [k.fx / z, 0.0, -k.fx * cam[0] / z**2],
            [0.0, k.fy / z, -k.fy * cam[1] / z**2],
        ]
    )
    grad = (np.linalg.solve(noise.sigma2d, d) @ jp) @ jx

    n_cam = rbrt @ m
    v = np.array([k.fx * n_cam[0], k.fy * n_cam[1]])
    nv = np.linalg.norm(v)
    vh = v / nv
    xn = np.asarray(video_normal, dtype=float)
    # d(kappa (1 - vh . xn))/dv = -kappa * xn^T (I - vh vh^T) / |v|
    dvh = (np.eye(2) - np.outer(vh, vh)) / nv
    dori_dv = -noise.kappa * (xn @ dvh)
    dn_dw = rbrt @ skew(m)
    dv_dw = np.vstack([k.fx * dn_dw[0, :], k.fy * dn_dw[1, :]])
    grad_or = np.zeros(7)
    grad_or[1:4] = dori_dv @ dv_dw
    return grad + grad_or
