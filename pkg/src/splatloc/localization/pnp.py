"""Absolute pose from 2D-3D correspondences: 6-point DLT inside RANSAC, then
Levenberg-Marquardt refinement of the robustly weighted reprojection error on the inliers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

from ..geometry import CameraPose, PinholeIntrinsics

MIN_SAMPLE = 6
MIN_INLIERS = 12
BATCH = 64
DEGENERACY_TOL = 1e-6
IRLS_ROUNDS = 5
ROBUST_FRACTION = 0.2  # Cauchy scale as a fraction of the inlier threshold


class RansacFailed(RuntimeError):
    def __init__(self, message: str, inliers: int = 0):
        super().__init__(message)
        self.inliers = inliers


class TooFewCorrespondences(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PnPResult:
    pose: CameraPose          # world-from-camera
    inliers: np.ndarray       # indices into the correspondence list
    iterations: int


def _normalize_points(X: np.ndarray):
    mu = X.mean(axis=0)
    scale = np.sqrt(3.0) / max(np.sqrt(((X - mu) ** 2).sum(axis=1).mean()), 1e-12)
    return (X - mu) * scale, mu, scale


def dlt_pose_batch(Xn: np.ndarray, x: np.ndarray):
    """Camera-from-world ``(R, t)`` hypotheses from batches of 6 correspondences.

    ``Xn`` is ``(B, 6, 3)`` world points, ``x`` is ``(B, 6, 2)`` normalized image
    coordinates. Returns rotations ``(B, 3, 3)``, translations ``(B, 3)`` and a validity
    mask (false for reflections, points behind the camera or degenerate samples).
    """
    B = Xn.shape[0]
    Xh = np.concatenate([Xn, np.ones((B, MIN_SAMPLE, 1))], axis=2)
    A = np.zeros((B, 2 * MIN_SAMPLE, 12))
    A[:, 0::2, 0:4] = -Xh
    A[:, 0::2, 8:12] = x[:, :, 0:1] * Xh
    A[:, 1::2, 4:8] = -Xh
    A[:, 1::2, 8:12] = x[:, :, 1:2] * Xh
    _, SA, Vt = np.linalg.svd(A)
    P = Vt[:, -1].reshape(B, 3, 4)
    # a one-dimensional null space is required; coincident or coplanar samples leave a larger one
    determined = SA[:, -2] > DEGENERACY_TOL * SA[:, 0]
    # cheirality: the sampled points must lie in front of the camera
    depth = np.einsum("bj,bnj->bn", P[:, 2], Xh)
    flip = np.sum(depth > 0, axis=1) < MIN_SAMPLE / 2
    P[flip] *= -1.0
    M = P[:, :, :3]
    U, S, Vt2 = np.linalg.svd(M)
    R = U @ Vt2
    det = np.linalg.det(R)
    scale = S.mean(axis=1)
    valid = (det > 0) & (scale > 1e-12) & determined
    t = P[:, :, 3] / np.where(scale > 0, scale, 1.0)[:, None]
    return R, t, valid


def reprojection_errors(R: np.ndarray, t: np.ndarray, X: np.ndarray, uv: np.ndarray, K: PinholeIntrinsics):
    """Pixel errors of camera-from-world ``(R, t)``; ``inf`` for points not in front.

    ``R`` and ``t`` may carry a leading batch axis, giving one error row per hypothesis.
    """
    pc = X @ np.swapaxes(R, -1, -2) + t[..., None, :]
    z = pc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * pc[..., 0] / z + K.cx
        v = K.fy * pc[..., 1] / z + K.cy
        err = np.hypot(u - uv[..., 0], v - uv[..., 1])
    return np.where(z > 0, err, np.inf)


def _refine(R: np.ndarray, t: np.ndarray, X: np.ndarray, uv: np.ndarray, K: PinholeIntrinsics,
            scale: float, rounds: int = IRLS_ROUNDS):
    """Levenberg-Marquardt on Cauchy-reweighted reprojection residuals.

    Each round fixes per-point weights ``1 / (1 + (e / scale)^2)`` from the current
    errors and solves the weighted problem with LM; noiseless data keeps unit weights.
    """
    def residual(p, sw):
        Rm = Rotation.from_rotvec(p[:3]).as_matrix()
        pc = X @ Rm.T + p[3:]
        z = pc[:, 2]
        return np.concatenate([sw * (K.fx * pc[:, 0] / z + K.cx - uv[:, 0]),
                               sw * (K.fy * pc[:, 1] / z + K.cy - uv[:, 1])])

    p = np.concatenate([Rotation.from_matrix(R).as_rotvec(), t])
    for _ in range(rounds):
        r = residual(p, np.ones(len(X))).reshape(2, -1)
        sw = 1.0 / np.sqrt(1.0 + (np.hypot(r[0], r[1]) / scale) ** 2)
        prev = p
        p = least_squares(residual, p, method="lm", args=(sw,), xtol=1e-15, ftol=1e-15, gtol=1e-15,
                          max_nfev=200).x
        if np.abs(p - prev).max() < 1e-12:
            break
    return Rotation.from_rotvec(p[:3]).as_matrix(), p[3:]


def pnp_ransac(points3d, points2d, K: PinholeIntrinsics, threshold_px: float = 3.0, max_iters: int = 2000,
               seed: int = 0, weights=None, min_inliers: int = MIN_INLIERS,
               confidence: float = 0.9999) -> PnPResult:
    """Robust world-from-camera pose.

    Minimal samples are drawn with probability proportional to ``weights`` (uniform
    by default). Hypotheses are scored by inlier count (summed weights when given);
    the sampling loop stops early once the adaptive bound for ``confidence`` is met.
    The best hypothesis is refined on its inliers with Cauchy-weighted LM (scale a fifth
    of ``threshold_px``), and the returned inlier set is
    exactly the correspondences reprojecting within ``threshold_px`` of the final pose.
    """
    X = np.asarray(points3d, dtype=np.float64).reshape(-1, 3)
    uv = np.asarray(points2d, dtype=np.float64).reshape(-1, 2)
    n = len(X)
    if len(uv) != n:
        raise ValueError("points3d and points2d differ in length")
    if n < MIN_SAMPLE:
        raise TooFewCorrespondences(f"need at least {MIN_SAMPLE} correspondences, got {n}")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64).reshape(n)
    if np.any(w < 0) or not np.any(w > 0):
        raise ValueError("weights must be non-negative and not all zero")
    prob = w / w.sum()
    rng = np.random.default_rng(seed)
    Xn, mu, s = _normalize_points(X)
    xn = np.stack([(uv[:, 0] - K.cx) / K.fx, (uv[:, 1] - K.cy) / K.fy], axis=1)

    best_score, best_R, best_t, best_count = -1.0, None, None, 0
    needed = max_iters
    done = 0
    positive = int(np.count_nonzero(w > 0))
    while done < min(needed, max_iters):
        b = min(BATCH, max_iters - done)
        idx = np.empty((b, MIN_SAMPLE), dtype=np.int64)
        for i in range(b):
            idx[i] = rng.choice(n, size=MIN_SAMPLE, replace=False, p=prob) if positive >= MIN_SAMPLE \
                else rng.choice(n, size=MIN_SAMPLE, replace=False)
        Rn, tn, valid = dlt_pose_batch(Xn[idx], xn[idx])
        # undo the point normalization X_n = s (X - mu)
        R = Rn
        t = tn / s - np.einsum("bij,j->bi", Rn, mu)
        err = reprojection_errors(R, t, X, uv, K)
        inl = err <= threshold_px
        score = (inl * w).sum(axis=1)
        score[~valid] = -1.0
        k = int(np.argmax(score))
        done += b
        if score[k] > best_score:
            best_score, best_R, best_t, best_count = float(score[k]), R[k], t[k], int(inl[k].sum())
            ratio = best_count / n
            if ratio >= 1.0:
                needed = done
            elif ratio > 0:
                needed = int(np.ceil(np.log(1 - confidence) / np.log(1 - ratio ** MIN_SAMPLE)))
    if best_R is None or best_count < min_inliers:
        raise RansacFailed(f"best hypothesis has {best_count} inliers (< {min_inliers})", best_count)

    R, t = best_R, best_t
    inliers = np.flatnonzero(reprojection_errors(R, t, X, uv, K) <= threshold_px)
    for _ in range(3):
        if len(inliers) < MIN_SAMPLE:
            break
        R, t = _refine(R, t, X[inliers], uv[inliers], K, ROBUST_FRACTION * threshold_px)
        new = np.flatnonzero(reprojection_errors(R, t, X, uv, K) <= threshold_px)
        if np.array_equal(new, inliers):
            break
        inliers = new
    inliers = np.flatnonzero(reprojection_errors(R, t, X, uv, K) <= threshold_px)
    if len(inliers) < min_inliers:
        raise RansacFailed(f"refined pose keeps {len(inliers)} inliers (< {min_inliers})", len(inliers))
    pose = CameraPose.from_rt(R.T, -R.T @ t)
    return PnPResult(pose, inliers, done)
