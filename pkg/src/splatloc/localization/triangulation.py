"""Linear multi-view triangulation from known camera poses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import Z_NEAR, CameraPose, PinholeIntrinsics

MIN_ANGLE_DEG = 1.0
MAX_REPROJ_PX = 2.0


@dataclass(frozen=True, eq=False)
class Track:
    point: np.ndarray                          # world coordinates
    observations: tuple[tuple[int, np.ndarray], ...]  # (view index, (u, v))


def projection_matrix(pose: CameraPose, K: PinholeIntrinsics) -> np.ndarray:
    R = pose.R
    return K.K @ np.hstack([R.T, (-R.T @ pose.translation)[:, None]])


def triangulate_point(observations, poses, K: PinholeIntrinsics) -> np.ndarray:
    """DLT estimate in normalized image coordinates; ``observations`` are ``(view, (u, v))``."""
    Kinv = np.linalg.inv(K.K)
    rows = []
    for vi, uv in observations:
        pose = poses[vi]
        R = pose.R
        P = np.hstack([R.T, (-R.T @ pose.translation)[:, None]])
        x = Kinv @ np.array([uv[0], uv[1], 1.0])
        rows.append(x[0] * P[2] - P[0])
        rows.append(x[1] * P[2] - P[1])
    A = np.array(rows)
    _, _, Vt = np.linalg.svd(A)
    X = Vt[-1]
    if abs(X[3]) < 1e-15:
        return np.full(3, np.nan)
    return X[:3] / X[3]


def triangulation_angle(point: np.ndarray, centers) -> float:
    """Largest angle in degrees between rays from the given centers to ``point``."""
    rays = np.asarray(centers, dtype=np.float64) - point
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    cos = np.clip(rays @ rays.T, -1.0, 1.0)
    return float(np.degrees(np.arccos(cos.min())))


def triangulate_track(obs, poses, K: PinholeIntrinsics, min_angle: float = MIN_ANGLE_DEG,
                      max_reproj: float = MAX_REPROJ_PX) -> np.ndarray | None:
    """World point of one track, or ``None`` when it fails the acceptance tests."""
    obs = [(int(v), np.asarray(uv, dtype=np.float64)) for v, uv in obs]
    if len({v for v, _ in obs}) < 2:
        return None
    centers = np.array([poses[v].translation for v, _ in obs])
    if np.ptp(centers, axis=0).max() == 0.0:
        return None
    X = triangulate_point(obs, poses, K)
    if not np.all(np.isfinite(X)) or triangulation_angle(X, centers) < min_angle:
        return None
    for v, uv in obs:
        pc = poses[v].world_to_camera(X)
        if pc[2] <= Z_NEAR:
            return None
        u = K.fx * pc[0] / pc[2] + K.cx
        w = K.fy * pc[1] / pc[2] + K.cy
        if np.hypot(u - uv[0], w - uv[1]) > max_reproj:
            return None
    return X


def triangulate(tracks, poses, K: PinholeIntrinsics, min_angle: float = MIN_ANGLE_DEG,
                max_reproj: float = MAX_REPROJ_PX) -> list[Track]:
    """Triangulate every track of ``(view index, (u, v))`` observations.

    A track survives only if it spans at least two distinct views, the widest ray pair
    meets ``min_angle`` degrees, and the point lies in front of every camera and
    reprojects within ``max_reproj`` pixels in each of them.
    """
    out = []
    for obs in tracks:
        obs = tuple((int(v), np.asarray(uv, dtype=np.float64)) for v, uv in obs)
        X = triangulate_track(obs, poses, K, min_angle, max_reproj)
        if X is not None:
            out.append(Track(X, obs))
    return out
