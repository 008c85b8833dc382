"""Robust perspective-n-point: EPnP minimal solves inside RANSAC plus
Levenberg-Marquardt refinement of the best hypothesis.

The minimal solver follows the EPnP recipe (control points from PCA,
null-space betas with Gauss-Newton polishing) so no polynomial root finding
is needed; a planar control-point variant handles coplanar minimal samples,
which faceted objects produce constantly. A 6-point DLT stands in when the
minimal solve degenerates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

from .geometry import (Intrinsics, Pose, project_batch, reorthonormalize,
                       rotation_from_axis_angle)


class PnPError(ValueError):
    pass


class MatchingFailure(PnPError):
    """RANSAC found no hypothesis with enough inliers."""


@dataclass
class PoseEstimate:
    pose: Pose
    inliers: int
    reproj_err_px: float
    n_correspondences: int
    runtime_ms: float | None = None


def _kabsch(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rigid transform R, t with dst ~= src @ R.T + t."""
    sc = src.mean(axis=0)
    dc = dst.mean(axis=0)
    H = (src - sc).T @ (dst - dc)
    U, _, Vt = np.linalg.svd(H)
    R = Vt.T @ U.T
    if np.linalg.det(R) < 0:
        Vt[-1] *= -1
        R = Vt.T @ U.T
    return R, dc - R @ sc


def _control_points(pts: np.ndarray) -> tuple[np.ndarray, bool]:
    """Centroid + principal axes; drops to 3 points for planar sets."""
    c0 = pts.mean(axis=0)
    centered = pts - c0
    cov = centered.T @ centered / len(pts)
    w, v = np.linalg.eigh(cov)
    w = w[::-1]
    v = v[:, ::-1]
    if w[0] <= 1e-12:  # all points coincident (or collinear handled below)
        raise PnPError("degenerate 3D point configuration")
    planar = w[2] / w[0] < 1e-8
    if w[1] / w[0] < 1e-8:
        raise PnPError("collinear 3D points")
    axes = 2 if planar else 3
    ctrl = [c0]
    for k in range(axes):
        ctrl.append(c0 + np.sqrt(max(w[k], 1e-300)) * v[:, k])
    return np.array(ctrl), planar


def _barycentric(pts: np.ndarray, ctrl: np.ndarray) -> np.ndarray:
    """Coordinates alpha with pts = alpha @ ctrl and rows summing to 1."""
    m = len(ctrl)
    A = np.vstack([ctrl.T, np.ones(m)])          # 4 x m
    B = np.vstack([pts.T, np.ones(len(pts))])    # 4 x n
    if m == 4:
        alpha = np.linalg.solve(A, B)
    else:
        alpha = _solve_normal(A, B)
    return alpha.T                               # n x m


def _build_M(alphas: np.ndarray, px: np.ndarray, K: Intrinsics) -> np.ndarray:
    n, m = alphas.shape
    M = np.zeros((2 * n, 3 * m))
    for j in range(m):
        a = alphas[:, j]
        M[0::2, 3 * j] = a * K.fx
        M[0::2, 3 * j + 2] = a * (K.cx - px[:, 0])
        M[1::2, 3 * j + 1] = a * K.fy
        M[1::2, 3 * j + 2] = a * (K.cy - px[:, 1])
    return M


def _pair_indices(m: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(m) for j in range(i + 1, m)]


def _solve_normal(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Least squares via damped normal equations (small systems only)."""
    AtA = A.T @ A
    AtA[np.diag_indices_from(AtA)] += 1e-12
    try:
        return np.linalg.solve(AtA, A.T @ b)
    except np.linalg.LinAlgError:
        sol, *_ = np.linalg.lstsq(A, b, rcond=None)
        return sol


def _gauss_newton_betas(betas: np.ndarray, dv: np.ndarray, dist2: np.ndarray,
                        iters: int = 8) -> np.ndarray:
    """Polish betas on the control-point distance constraints.

    dv: (P, K, 3) null-vector differences per control pair; dist2: (P,)
    squared world distances. Damped normal equations, linear solves only.
    """
    betas = betas.copy()
    k = len(betas)
    damp = 1e-12 * np.eye(k)
    for _ in range(iters):
        diff = np.einsum("k,pkx->px", betas, dv)
        r = (diff * diff).sum(axis=1) - dist2
        J = 2 * np.einsum("px,pkx->pk", diff, dv)
        try:
            step = np.linalg.solve(J.T @ J + damp, -J.T @ r)
        except np.linalg.LinAlgError:
            break
        betas = betas + step
        if np.max(np.abs(step)) < 1e-10:
            break
    return betas


def _betas_init(dv: np.ndarray, dist2: np.ndarray, case: int) -> np.ndarray:
    """Closed-form beta seeds, cases mirroring the usual EPnP approximations."""
    n_k = dv.shape[1]
    betas = np.zeros(n_k)
    d_vv = np.einsum("pkx,plx->pkl", dv, dv)
    if case == 1:
        denom = d_vv[:, 0, 0].sum()
        if denom <= 0:
            raise PnPError("null-space degenerate")
        betas[0] = (np.sqrt(d_vv[:, 0, 0] * dist2)).sum() / denom
        return betas
    if case == 2:
        L = np.stack([d_vv[:, 0, 0], 2 * d_vv[:, 0, 1], d_vv[:, 1, 1]], axis=1)
        sol = _solve_normal(L, dist2)
        b11, b12, b22 = sol
        if b11 < 0 and b22 < 0:
            b11, b12, b22 = -b11, -b12, -b22
        betas[0] = np.sqrt(max(b11, 0))
        betas[1] = np.sqrt(max(b22, 0)) * (1 if b12 >= 0 else -1)
        return betas
    L = np.stack([d_vv[:, 0, 0], 2 * d_vv[:, 0, 1], d_vv[:, 1, 1],
                  2 * d_vv[:, 0, 2], 2 * d_vv[:, 1, 2]], axis=1)
    sol = _solve_normal(L, dist2)
    b11, b12, b22, b13, b23 = sol
    if b11 < 0 and b22 < 0:
        b11, b12, b22, b13, b23 = -b11, -b12, -b22, -b13, -b23
    betas[0] = np.sqrt(max(b11, 0))
    betas[1] = np.sqrt(max(b22, 0)) * (1 if b12 >= 0 else -1)
    if betas[0] > 1e-12:
        betas[2] = b13 / betas[0]
    return betas


def epnp(points: np.ndarray, pixels: np.ndarray, K: Intrinsics) -> Pose:
    """EPnP pose from n >= 4 correspondences (planar sets included)."""
    pts = np.asarray(points, dtype=np.float64)
    px = np.asarray(pixels, dtype=np.float64)
    if len(pts) < 4:
        raise PnPError(f"epnp needs >= 4 points, got {len(pts)}")
    ctrl, planar = _control_points(pts)
    m = len(ctrl)
    alphas = _barycentric(pts, ctrl)
    M = _build_M(alphas, px, K)
    # Full SVD: with minimal samples M is wide and the true null space only
    # appears among the trailing right singular vectors.
    _, _, Vt = np.linalg.svd(M, full_matrices=True)
    n_null = 2 if planar else 4
    null = Vt[-n_null:][::-1]                  # rows: v1 (smallest) first
    vs = null.reshape(n_null, m, 3)

    pairs = _pair_indices(m)
    dv = np.stack([[vs[k, i] - vs[k, j] for (i, j) in pairs]
                   for k in range(n_null)], axis=1)       # (P, K, 3)
    dist2 = np.array([((ctrl[i] - ctrl[j]) ** 2).sum() for (i, j) in pairs])

    cases = (1, 2) if planar else (1, 2, 3)
    best_pose = None
    best_err = np.inf
    for case in cases:
        try:
            betas = _betas_init(dv, dist2, case)
        except PnPError:
            continue
        betas = _gauss_newton_betas(betas, dv, dist2)
        cc = np.einsum("k,kmx->mx", betas, vs)
        pts_cam = alphas @ cc
        if pts_cam[:, 2].mean() < 0:
            pts_cam = -pts_cam
        R, t = _kabsch(pts, pts_cam)
        pose = Pose(reorthonormalize(R), t, validate=False)
        uv, z = project_batch(pts, pose, K)
        if (z <= 0).any():
            continue
        err = float(np.linalg.norm(uv - px, axis=1).mean())
        if err < best_err:
            best_err = err
            best_pose = pose
    if best_pose is None:
        raise PnPError("no EPnP candidate with positive depths")
    return best_pose


def dlt_pnp(points: np.ndarray, pixels: np.ndarray, K: Intrinsics) -> Pose:
    """Direct linear transform on >= 6 non-coplanar correspondences."""
    pts = np.asarray(points, dtype=np.float64)
    px = np.asarray(pixels, dtype=np.float64)
    if len(pts) < 6:
        raise PnPError(f"dlt needs >= 6 points, got {len(pts)}")
    xn = (px[:, 0] - K.cx) / K.fx
    yn = (px[:, 1] - K.cy) / K.fy
    n = len(pts)
    A = np.zeros((2 * n, 12))
    hom = np.hstack([pts, np.ones((n, 1))])
    A[0::2, 0:4] = hom
    A[0::2, 8:12] = -xn[:, None] * hom
    A[1::2, 4:8] = hom
    A[1::2, 8:12] = -yn[:, None] * hom
    _, _, Vt = np.linalg.svd(A)
    P = Vt[-1].reshape(3, 4)
    Mrot = P[:, :3]
    scale = np.linalg.norm(Mrot[2])
    if scale < 1e-12 or abs(np.linalg.det(Mrot)) < 1e-18:
        raise PnPError("dlt: singular projection matrix")
    P = P / scale * np.sign(np.linalg.det(Mrot))
    R = reorthonormalize(P[:, :3])
    t = P[:, 3]
    pose = Pose(R, t, validate=False)
    _, z = project_batch(pts, pose, K)
    if (z <= 0).mean() > 0.5:
        pose = Pose(R, -t, validate=False)  # should not occur after det fix
    return pose


def refine_pose_lm(pose: Pose, points: np.ndarray, pixels: np.ndarray,
                   K: Intrinsics) -> Pose:
    """Levenberg-Marquardt on total squared reprojection error.

    Optimizes a local perturbation (axis-angle, translation) around the
    input pose; never returns a higher-cost pose than it was given.
    """
    pts = np.asarray(points, dtype=np.float64)
    px = np.asarray(pixels, dtype=np.float64)
    R0, t0 = pose.R, pose.t

    def residuals(x):
        R = R0 @ rotation_from_axis_angle(x[:3])
        p_cam = pts @ R.T + (t0 + x[3:])
        z = np.maximum(p_cam[:, 2], 1e-9)
        u = K.fx * p_cam[:, 0] / z + K.cx
        v = K.fy * p_cam[:, 1] / z + K.cy
        return np.concatenate([u - px[:, 0], v - px[:, 1]])

    res = least_squares(residuals, np.zeros(6), method="lm", max_nfev=400)
    R = reorthonormalize(R0 @ rotation_from_axis_angle(res.x[:3]))
    return Pose(R, t0 + res.x[3:], validate=False)


def pnp_ransac(points: np.ndarray, pixels: np.ndarray, K: Intrinsics,
               rng: np.random.Generator, iters: int = 500,
               inlier_px: float = 2.0) -> PoseEstimate:
    """Minimal-sample RANSAC over 2D-3D matches, then LM on the inliers.

    Draws 4 correspondences per iteration (6 for the DLT fallback when the
    minimal solve degenerates), scores by reprojection distance, keeps the
    earliest best hypothesis, refines it, and enforces cheirality.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    if n < 6:
        raise PnPError(f"need at least 6 correspondences, got {n}")

    best_count = 0
    best_pose = None
    best_inliers = None
    for _ in range(iters):
        idx = rng.choice(n, size=4, replace=False)
        pose = None
        try:
            pose = epnp(pts[idx], px[idx], K)
        except (PnPError, np.linalg.LinAlgError):
            try:
                idx6 = rng.choice(n, size=6, replace=False)
                pose = dlt_pnp(pts[idx6], px[idx6], K)
            except (PnPError, np.linalg.LinAlgError):
                continue
        uv, z = project_batch(pts, pose, K)
        err = np.linalg.norm(uv - px, axis=1)
        inl = (err < inlier_px) & (z > 1e-9) & np.isfinite(err)
        count = int(inl.sum())
        if count > best_count:
            best_count = count
            best_pose = pose
            best_inliers = inl

    if best_pose is None or best_count < 6:
        raise MatchingFailure(
            f"no pose hypothesis with >= 6 inliers ({best_count} best of {n})")

    refined = refine_pose_lm(best_pose, pts[best_inliers], px[best_inliers], K)
    uv, z = project_batch(pts[best_inliers], refined, K)
    if (z <= 0).any():
        raise PnPError("refined pose puts inliers behind the camera")
    err = float(np.linalg.norm(uv - px[best_inliers], axis=1).mean())
    return PoseEstimate(pose=refined, inliers=best_count,
                        reproj_err_px=err, n_correspondences=n)
