"""Rigid and similarity transforms, quaternions, the pinhole camera and Umeyama alignment.

Conventions used across the package:

* quaternions are stored ``(w, x, y, z)``, unit norm, canonical sign ``w >= 0``;
* a :class:`CameraPose` is world-from-camera, so its translation is the camera
  center in world coordinates;
* camera frame is x right, y down, z forward; pixel centers sit on integer
  coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

Z_NEAR = 0.01


class BehindCamera(ValueError):
    """Raised when a point lies at or behind the near plane."""


class DegenerateConfiguration(ValueError):
    """Raised when a point set cannot determine an alignment."""


def canonical_quaternion(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(4)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0.0:
        raise ValueError(f"invalid quaternion {q!r}")
    q = q / n
    # pick the hemisphere with the first non-zero component positive
    for c in q:
        if c != 0.0:
            if c < 0.0:
                q = -q
            break
    return q + 0.0  # drops -0.0


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quats_to_matrices(q: np.ndarray) -> np.ndarray:
    """Batched :func:`quat_to_matrix` for an ``(N, 4)`` array (not renormalized)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def matrix_to_quat(R) -> np.ndarray:
    """Shepperd's method; the input should be a proper rotation."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return canonical_quaternion(q)


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return canonical_quaternion(np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis]))


def rotation_angle(R) -> float:
    """Angle of a rotation matrix in radians, in ``[0, pi]``."""
    q = matrix_to_quat(R)
    return float(2.0 * np.arctan2(np.linalg.norm(q[1:]), abs(q[0])))


@dataclass(frozen=True, eq=False)
class CameraPose:
    """World-from-camera rigid transform."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", canonical_quaternion(self.rotation))
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> CameraPose:
        return cls()

    @classmethod
    def from_matrix(cls, T) -> CameraPose:
        T = np.asarray(T, dtype=np.float64)
        return cls(matrix_to_quat(T[:3, :3]), T[:3, 3])

    @classmethod
    def from_rt(cls, R, t) -> CameraPose:
        return cls(matrix_to_quat(R), t)

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    @property
    def center(self) -> np.ndarray:
        return self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> CameraPose:
        R = self.R
        return CameraPose.from_rt(R.T, -R.T @ self.translation)

    def compose(self, other: CameraPose) -> CameraPose:
        """``self ∘ other``: applies ``other`` first, then ``self``."""
        q = quat_multiply(self.rotation, other.rotation)
        t = self.R @ other.translation + self.translation
        return CameraPose(q, t)

    __matmul__ = compose

    def world_to_camera(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return (p - self.translation) @ self.R

    def camera_to_world(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.R.T + self.translation

    def __eq__(self, other) -> bool:
        if not isinstance(other, CameraPose):
            return NotImplemented
        return bool(np.array_equal(self.rotation, other.rotation)
                    and np.array_equal(self.translation, other.translation))

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))

    def __repr__(self) -> str:
        q = ", ".join(f"{v:.6g}" for v in self.rotation)
        t = ", ".join(f"{v:.6g}" for v in self.translation)
        return f"CameraPose(q=[{q}], t=[{t}])"


def pose_compose(a: CameraPose, b: CameraPose) -> CameraPose:
    return a.compose(b)


@dataclass(frozen=True)
class PinholeIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, factor: float) -> PinholeIntrinsics:
        """Intrinsics for an image resampled by ``factor`` (pixel centers on integers)."""
        w = int(round(self.width * factor))
        h = int(round(self.height * factor))
        return PinholeIntrinsics(self.fx * factor, self.fy * factor,
                                 (self.cx + 0.5) * factor - 0.5, (self.cy + 0.5) * factor - 0.5, w, h)


def project_point(p_world, pose: CameraPose, K: PinholeIntrinsics, z_near: float = Z_NEAR):
    """Project one world point; returns ``(u, v, z)`` with ``z`` the camera-frame depth."""
    x, y, z = pose.world_to_camera(np.asarray(p_world, dtype=np.float64))
    if z <= z_near:
        raise BehindCamera(f"point at camera depth {z:.4g} m is behind the near plane")
    return K.fx * x / z + K.cx, K.fy * y / z + K.cy, float(z)


def project_points(points_world, pose: CameraPose, K: PinholeIntrinsics):
    """Vectorized projection without culling; returns ``(uv (N,2), z (N,))``."""
    pc = pose.world_to_camera(points_world)
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([K.fx * pc[:, 0] / z + K.cx, K.fy * pc[:, 1] / z + K.cy], axis=1)
    return uv, z


def back_project(u, v, z, K: PinholeIntrinsics) -> np.ndarray:
    """Camera-frame point(s) for pixel coordinates and depth."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    return np.stack([(u - K.cx) / K.fx * z, (v - K.cy) / K.fy * z, z], axis=-1)


@dataclass(frozen=True, eq=False)
class Sim3Transform:
    """``x -> scale * R x + translation``."""

    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", canonical_quaternion(self.rotation))
        object.__setattr__(self, "translation", np.array(self.translation, dtype=np.float64).reshape(3))

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return self.scale * p @ self.R.T + self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.scale * self.R
        T[:3, 3] = self.translation
        return T


def umeyama_align(source: Sequence, target: Sequence, with_scale: bool = True) -> Sim3Transform:
    """Least-squares similarity (or rigid) transform mapping ``source`` onto ``target``.

    Umeyama, "Least-squares estimation of transformation parameters between two
    point patterns", PAMI 1991.
    """
    src = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise ValueError(f"point sets differ in length: {len(src)} vs {len(dst)}")
    n = len(src)
    if n < 3:
        raise DegenerateConfiguration(f"need at least 3 correspondences, got {n}")

    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d

    sv = np.linalg.svd(xs.T @ xs / n, compute_uv=False)
    if sv[0] <= 0.0 or sv[1] < 1e-10 * sv[0]:
        raise DegenerateConfiguration("source points are collinear or coincident")

    cov = xd.T @ xs / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if with_scale:
        var_s = (xs ** 2).sum() / n
        scale = float(np.trace(np.diag(D) @ S) / var_s)
    else:
        scale = 1.0
    t = mu_d - scale * R @ mu_s
    return Sim3Transform(scale, matrix_to_quat(R), t)


def yaw_pitch_pose(position, yaw: float, pitch: float = 0.0) -> CameraPose:
    """Camera at ``position`` looking along world heading ``yaw`` (radians from +x, z up).

    The camera is level (no roll); positive pitch looks up.
    """
    forward = np.array([np.cos(yaw) * np.cos(pitch), np.sin(yaw) * np.cos(pitch), np.sin(pitch)])
    right = np.array([np.sin(yaw), -np.cos(yaw), 0.0])
    down = np.cross(forward, right)
    R = np.stack([right, down, forward], axis=1)
    return CameraPose.from_rt(R, position)
