"""Tile-based software rasterizer for Gaussian maps, with an analytic backward pass.

Projection follows the EWA local-affine approximation: the camera-frame
covariance ``W Σ W^T`` is pushed through the Jacobian of the pinhole map at the
splat mean. The optional anti-aliasing filter dilates every screen-space
covariance by ``s·I`` and rescales opacity by the determinant ratio so that the
integrated footprint is preserved.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import raster
from .gaussians import GaussianMap, GaussianPrimitive, covariance_3d, sigmoid
from .geometry import Z_NEAR, CameraPose, PinholeIntrinsics, quats_to_matrices

DEPTH_EPS = 1e-10
GUARD_BAND = 1.3


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("SPLATLOC_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class RenderConfig:
    antialias_enabled: bool = True
    antialias_s: float = 0.3
    alpha_cutoff: float = 1.0 / 255.0
    transmittance_stop: float = 1e-4
    tile_size: int = 16

    def __post_init__(self):
        if self.antialias_s < 0:
            raise ValueError("antialias_s must be non-negative")
        if not 0.0 < self.alpha_cutoff < 1.0:
            raise ValueError("alpha_cutoff must lie in (0, 1)")
        if self.tile_size < 1:
            raise ValueError("tile_size must be at least 1")

    @property
    def dilation(self) -> float:
        return self.antialias_s if self.antialias_enabled else 0.0


@dataclass(frozen=True, eq=False)
class ExposureAffine:
    """Per-view color correction ``c' = A c + b`` stored as a 3x4 matrix ``[A | b]``."""

    matrix: np.ndarray = field(default_factory=lambda: np.hstack([np.eye(3), np.zeros((3, 1))]))

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64).reshape(3, 4)
        if not np.all(np.isfinite(m)):
            raise ValueError("exposure matrix must be finite")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> ExposureAffine:
        return cls()

    @classmethod
    def from_gain_bias(cls, gain, bias) -> ExposureAffine:
        A = np.diag(np.broadcast_to(np.asarray(gain, dtype=np.float64), (3,)))
        b = np.broadcast_to(np.asarray(bias, dtype=np.float64), (3,))
        return cls(np.hstack([A, b[:, None]]))

    @property
    def A(self) -> np.ndarray:
        return self.matrix[:, :3]

    @property
    def b(self) -> np.ndarray:
        return self.matrix[:, 3]


def apply_exposure(color: np.ndarray, e: ExposureAffine) -> np.ndarray:
    out = np.asarray(color, dtype=np.float64) @ e.A.T + e.b
    return np.clip(out, 0.0, 1.0)


@dataclass(eq=False)
class RenderedFrame:
    color: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    view_pose: CameraPose
    intrinsics: PinholeIntrinsics

    def identical_to(self, other: RenderedFrame) -> bool:
        return (np.array_equal(self.color, other.color) and np.array_equal(self.depth, other.depth)
                and np.array_equal(self.alpha, other.alpha))


# -- single-primitive reference path -------------------------------------------------

@dataclass(frozen=True, eq=False)
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float


def _guard_band(K: PinholeIntrinsics):
    """Limits on x/z and y/z used inside the projection Jacobian (30% beyond the image).

    Splats far outside the view and close to the camera plane would otherwise get
    unbounded screen covariances from the local-affine approximation.
    """
    m = GUARD_BAND
    return ((-m * (K.cx + 0.5) / K.fx, m * (K.width - 0.5 - K.cx) / K.fx),
            (-m * (K.cy + 0.5) / K.fy, m * (K.height - 0.5 - K.cy) / K.fy))


def project_gaussian(g: GaussianPrimitive, pose: CameraPose, K: PinholeIntrinsics,
                     z_near: float = Z_NEAR) -> ProjectedGaussian | None:
    """Screen-space mean, covariance and depth of one primitive; ``None`` when culled."""
    W = pose.R.T
    x, y, z = W @ (g.position - pose.translation)
    if z <= z_near:
        return None
    (xl, xh), (yl, yh) = _guard_band(K)
    tx, ty = np.clip(x / z, xl, xh), np.clip(y / z, yl, yh)
    J = np.array([[K.fx / z, 0.0, -K.fx * tx / z],
                  [0.0, K.fy / z, -K.fy * ty / z]])
    T = J @ W
    cov = T @ covariance_3d(g) @ T.T
    cov = 0.5 * (cov + cov.T)
    mean = np.array([K.fx * x / z + K.cx, K.fy * y / z + K.cy])
    return ProjectedGaussian(mean, cov, float(z))


def apply_antialias(cov2d, opacity: float, s: float):
    """Dilate ``cov2d`` by ``s·I`` and attenuate opacity by ``sqrt(det(cov)/det(cov'))``."""
    cov2d = np.asarray(cov2d, dtype=np.float64)
    if s == 0.0:
        return cov2d.copy(), float(opacity)
    dilated = cov2d + s * np.eye(2)
    det = max(np.linalg.det(cov2d), 0.0)
    return dilated, float(opacity * np.sqrt(det / np.linalg.det(dilated)))


# -- batched forward ----------------------------------------------------------------

@dataclass(eq=False)
class _Projection:
    index: np.ndarray       # primitive ids of visible splats, in depth order
    means: np.ndarray       # (K, 2)
    conics: np.ndarray      # (K, 3): a, b, c of the inverse dilated covariance
    opacities: np.ndarray   # dilated opacity
    colors: np.ndarray
    depths: np.ndarray
    radii: np.ndarray
    # saved for the backward pass
    cam_points: np.ndarray
    J: np.ndarray
    V: np.ndarray           # camera-frame 3D covariance
    cov: np.ndarray         # undilated 2D covariance
    cov_d: np.ndarray       # dilated 2D covariance
    ratio: np.ndarray       # opacity attenuation factor
    base_opacity: np.ndarray
    M: np.ndarray           # R·S factor of the 3D covariance
    Rg: np.ndarray
    scales: np.ndarray
    qn: np.ndarray
    qnorm: np.ndarray


@dataclass(eq=False)
class RasterState:
    """Everything :func:`rasterize_backward` needs from a forward pass."""

    gmap_size: int
    pose: CameraPose
    K: PinholeIntrinsics
    cfg: RenderConfig
    proj: _Projection
    tile_start: np.ndarray
    tile_end: np.ndarray
    pair_splat: np.ndarray
    tiles_x: int
    depth_acc: np.ndarray
    final_T: np.ndarray
    last: np.ndarray
    background: np.ndarray
    threads: int


def _project_all(gmap: GaussianMap, pose: CameraPose, K: PinholeIntrinsics, cfg: RenderConfig) -> _Projection:
    W = pose.R.T
    cam = (gmap.positions - pose.translation) @ W.T
    z = cam[:, 2]
    keep = np.flatnonzero(z > Z_NEAR)

    cam = cam[keep]
    x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
    q = gmap.rotations[keep]
    qnorm = np.linalg.norm(q, axis=1)
    qn = q / qnorm[:, None]
    Rg = quats_to_matrices(qn)
    scales = np.exp(gmap.log_scales[keep])
    M = Rg * scales[:, None, :]
    Sigma = M @ np.swapaxes(M, 1, 2)
    V = W @ Sigma @ W.T
    n = len(keep)
    (xl, xh), (yl, yh) = _guard_band(K)
    with np.errstate(invalid="ignore", divide="ignore"):
        tx = np.clip(x / z, xl, xh)
        ty = np.clip(y / z, yl, yh)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = K.fx / z
    J[:, 0, 2] = -K.fx * tx / z
    J[:, 1, 1] = K.fy / z
    J[:, 1, 2] = -K.fy * ty / z
    cov = J @ V @ np.swapaxes(J, 1, 2)
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))

    s = cfg.dilation
    cov_d = cov + s * np.eye(2)
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2
    det_d = cov_d[:, 0, 0] * cov_d[:, 1, 1] - cov_d[:, 0, 1] ** 2
    base_op = sigmoid(gmap.opacity_logits[keep])
    if s > 0.0:
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = np.sqrt(np.maximum(det, 0.0) / det_d)
    else:
        ratio = np.ones(n)
    ok = det_d > 1e-12
    with np.errstate(invalid="ignore", divide="ignore"):
        inv_det = 1.0 / det_d
    conics = np.stack([cov_d[:, 1, 1] * inv_det, -cov_d[:, 0, 1] * inv_det, cov_d[:, 0, 0] * inv_det], axis=1)
    mid = 0.5 * (cov_d[:, 0, 0] + cov_d[:, 1, 1])
    lam = mid + np.sqrt(np.maximum(mid * mid - det_d, 0.0))
    radii = np.ceil(3.0 * np.sqrt(np.maximum(lam, 0.0)))
    means = np.stack([K.fx * x / z + K.cx, K.fy * y / z + K.cy], axis=1)
    with np.errstate(invalid="ignore"):
        ok &= np.isfinite(radii) & np.all(np.isfinite(means), axis=1)
        ok &= np.ceil(means[:, 0] - radii) <= K.width - 1
        ok &= np.floor(means[:, 0] + radii) >= 0
        ok &= np.ceil(means[:, 1] - radii) <= K.height - 1
        ok &= np.floor(means[:, 1] + radii) >= 0
    ok &= base_op * ratio >= cfg.alpha_cutoff

    sel = np.flatnonzero(ok)
    order = sel[np.lexsort((keep[sel], z[sel]))]
    idx = keep[order]
    return _Projection(
        index=idx, means=means[order], conics=np.ascontiguousarray(conics[order]),
        opacities=base_op[order] * ratio[order], colors=np.ascontiguousarray(gmap.colors[idx]),
        depths=z[order].copy(), radii=radii[order], cam_points=cam[order], J=J[order], V=V[order],
        cov=cov[order], cov_d=cov_d[order], ratio=ratio[order], base_opacity=base_op[order],
        M=M[order], Rg=Rg[order], scales=scales[order], qn=qn[order], qnorm=qnorm[order],
    )


def _bin_tiles(proj: _Projection, K: PinholeIntrinsics, tile_size: int):
    tiles_x = -(-K.width // tile_size)
    tiles_y = -(-K.height // tile_size)
    n_tiles = tiles_x * tiles_y
    m, r = proj.means, proj.radii
    x0 = np.clip(np.ceil(m[:, 0] - r), 0, K.width - 1).astype(np.int64) // tile_size
    x1 = np.clip(np.floor(m[:, 0] + r), 0, K.width - 1).astype(np.int64) // tile_size
    y0 = np.clip(np.ceil(m[:, 1] - r), 0, K.height - 1).astype(np.int64) // tile_size
    y1 = np.clip(np.floor(m[:, 1] + r), 0, K.height - 1).astype(np.int64) // tile_size
    nx = x1 - x0 + 1
    ny = y1 - y0 + 1
    counts = nx * ny
    total = int(counts.sum())
    splat = np.repeat(np.arange(len(m), dtype=np.int64), counts)
    local = np.arange(total, dtype=np.int64) - np.repeat(np.cumsum(counts) - counts, counts)
    nx_r = np.repeat(nx, counts)
    tile_ids = (np.repeat(y0, counts) + local // nx_r) * tiles_x + np.repeat(x0, counts) + local % nx_r
    order = np.argsort(tile_ids, kind="stable")
    tile_ids = tile_ids[order]
    pair_splat = splat[order]
    bounds = np.arange(n_tiles + 1)
    edges = np.searchsorted(tile_ids, bounds)
    return tiles_x, n_tiles, edges[:-1].astype(np.int64), edges[1:].astype(np.int64), pair_splat


@lru_cache(maxsize=8)
def _pool(threads: int) -> ThreadPoolExecutor:
    return ThreadPoolExecutor(max_workers=threads, thread_name_prefix="splat")


def _run_tiles(fn, n_tiles: int, threads: int) -> None:
    chunks = np.array_split(np.arange(n_tiles, dtype=np.int64), max(1, min(threads, n_tiles)))
    if len(chunks) == 1:
        fn(chunks[0])
        return
    for f in [_pool(threads).submit(fn, c) for c in chunks]:
        f.result()


def rasterize(gmap: GaussianMap, pose: CameraPose, K: PinholeIntrinsics, cfg: RenderConfig | None = None,
              threads: int | None = None) -> tuple[RenderedFrame, RasterState]:
    cfg = cfg or RenderConfig()
    threads = threads or default_threads()
    proj = _project_all(gmap, pose, K, cfg)
    tiles_x, n_tiles, t_start, t_end, pair_splat = _bin_tiles(proj, K, cfg.tile_size)
    H, W = K.height, K.width
    color = np.empty((H, W, 3))
    dacc = np.empty((H, W))
    T = np.empty((H, W))
    last = np.empty((H, W), dtype=np.int64)
    bg = np.ascontiguousarray(gmap.background, dtype=np.float64)

    def work(tiles):
        raster.composite_tiles(tiles, t_start, t_end, pair_splat, proj.means, proj.conics, proj.opacities,
                               proj.colors, proj.depths, proj.radii, bg, W, H, cfg.tile_size, tiles_x,
                               cfg.alpha_cutoff, cfg.transmittance_stop, color, dacc, T, last)

    _run_tiles(work, n_tiles, threads)
    alpha = 1.0 - T
    depth = np.where(alpha > 0.0, dacc / np.maximum(alpha, DEPTH_EPS), 0.0)
    frame = RenderedFrame(color, depth, alpha, pose, K)
    state = RasterState(len(gmap), pose, K, cfg, proj, t_start, t_end, pair_splat, tiles_x,
                        dacc, T, last, bg, threads)
    return frame, state


def render(gmap: GaussianMap, pose: CameraPose, K: PinholeIntrinsics, cfg: RenderConfig | None = None,
           threads: int | None = None) -> RenderedFrame:
    return rasterize(gmap, pose, K, cfg, threads)[0]


# -- backward -----------------------------------------------------------------------

@dataclass(eq=False)
class PrimitiveGrads:
    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> PrimitiveGrads:
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n), np.zeros((n, 3)))

    def groups(self) -> dict[str, np.ndarray]:
        return {"position": self.positions, "rotation": self.rotations, "log_scale": self.log_scales,
                "opacity_logit": self.opacity_logits, "color": self.colors}


def _quat_grad(qn: np.ndarray, G: np.ndarray) -> np.ndarray:
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    g = lambda i, j: G[:, i, j]  # noqa: E731
    gw = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1))
    gx = 2 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2)
              + z * g(2, 0) + w * g(2, 1) - 2 * x * g(2, 2))
    gy = 2 * (-2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
              - w * g(2, 0) + z * g(2, 1) - 2 * y * g(2, 2))
    gz = 2 * (-2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2 * z * g(1, 1)
              + y * g(1, 2) + x * g(2, 0) + y * g(2, 1))
    return np.stack([gw, gx, gy, gz], axis=1)


def _inv2(C: np.ndarray) -> np.ndarray:
    det = C[:, 0, 0] * C[:, 1, 1] - C[:, 0, 1] * C[:, 1, 0]
    out = np.empty_like(C)
    out[:, 0, 0] = C[:, 1, 1]
    out[:, 1, 1] = C[:, 0, 0]
    out[:, 0, 1] = -C[:, 0, 1]
    out[:, 1, 0] = -C[:, 1, 0]
    return out / det[:, None, None]


def rasterize_backward(state: RasterState, grad_color: np.ndarray, grad_depth: np.ndarray | None = None,
                       grad_alpha: np.ndarray | None = None) -> PrimitiveGrads:
    """Gradients of a scalar loss w.r.t. every primitive parameter, given its gradient
    w.r.t. the rendered color, depth and alpha images. Primitives that contribute to no
    pixel get exactly zero."""
    proj = state.proj
    K = state.K
    H, W = K.height, K.width
    n_vis = len(proj.index)
    grads = PrimitiveGrads.zeros(state.gmap_size)
    if n_vis == 0:
        return grads

    alpha = 1.0 - state.final_T
    safe_alpha = np.maximum(alpha, DEPTH_EPS)
    grad_dacc = np.zeros((H, W))
    grad_T = np.zeros((H, W))
    if grad_depth is not None:
        grad_dacc = np.where(alpha > 0.0, grad_depth / safe_alpha, 0.0)
        grad_a = np.where(alpha > DEPTH_EPS, -grad_depth * state.depth_acc / safe_alpha ** 2, 0.0)
        grad_T = grad_T - grad_a
    if grad_alpha is not None:
        grad_T = grad_T - grad_alpha
    grad_color = np.ascontiguousarray(grad_color, dtype=np.float64)

    P = len(state.pair_splat)
    g_mean = np.zeros((P, 2))
    g_conic = np.zeros((P, 3))
    g_op = np.zeros(P)
    g_col = np.zeros((P, 3))
    g_z = np.zeros(P)
    cfg = state.cfg

    def work(tiles):
        raster.composite_tiles_backward(tiles, state.tile_start, state.pair_splat, proj.means, proj.conics,
                                        proj.opacities, proj.colors, proj.depths, proj.radii,
                                        state.background, W, H, cfg.tile_size, state.tiles_x,
                                        cfg.alpha_cutoff, state.final_T, state.last,
                                        grad_color, grad_dacc, grad_T,
                                        g_mean, g_conic, g_op, g_col, g_z)

    _run_tiles(work, len(state.tile_start), state.threads)

    ps = state.pair_splat

    def reduce(a):
        if a.ndim == 1:
            return np.bincount(ps, weights=a, minlength=n_vis)
        return np.stack([np.bincount(ps, weights=a[:, i], minlength=n_vis) for i in range(a.shape[1])], axis=1)

    gm, gq, go, gc, gz = reduce(g_mean), reduce(g_conic), reduce(g_op), reduce(g_col), reduce(g_z)

    # conic -> dilated covariance
    Q = np.zeros((n_vis, 2, 2))
    Q[:, 0, 0], Q[:, 0, 1], Q[:, 1, 0], Q[:, 1, 1] = proj.conics[:, 0], proj.conics[:, 1], proj.conics[:, 1], proj.conics[:, 2]
    GQ = np.zeros((n_vis, 2, 2))
    GQ[:, 0, 0], GQ[:, 0, 1], GQ[:, 1, 0], GQ[:, 1, 1] = gq[:, 0], 0.5 * gq[:, 1], 0.5 * gq[:, 1], gq[:, 2]
    G_cov = -Q @ GQ @ Q

    # anti-aliasing: opacity' = opacity * sqrt(det C / det C')
    g_base_op = go * proj.ratio
    if cfg.dilation > 0.0:
        det = proj.cov[:, 0, 0] * proj.cov[:, 1, 1] - proj.cov[:, 0, 1] ** 2
        good = det > 1e-18
        if np.any(good):
            coef = (go * proj.base_opacity * 0.5 * proj.ratio)[good][:, None, None]
            G_cov[good] += coef * (_inv2(proj.cov[good]) - _inv2(proj.cov_d[good]))

    # 2D covariance -> camera covariance and Jacobian
    J, V = proj.J, proj.V
    Jt = np.swapaxes(J, 1, 2)
    G_V = Jt @ G_cov @ J
    G_J = 2.0 * G_cov @ J @ V
    Wr = state.pose.R.T
    G_Sigma = Wr.T @ G_V @ Wr
    G_M = 2.0 * G_Sigma @ proj.M
    g_s = np.einsum("nik,nik->nk", G_M, proj.Rg)
    g_ls = g_s * proj.scales
    G_R = G_M * proj.scales[:, None, :]
    g_qn = _quat_grad(proj.qn, G_R)
    g_rot = (g_qn - proj.qn * np.sum(proj.qn * g_qn, axis=1, keepdims=True)) / proj.qnorm[:, None]

    # camera-frame mean
    x, y, z = proj.cam_points[:, 0], proj.cam_points[:, 1], proj.cam_points[:, 2]
    fx, fy = K.fx, K.fy
    (xl, xh), (yl, yh) = _guard_band(K)
    tx, ty = x / z, y / z
    free_x = (tx >= xl) & (tx <= xh)
    free_y = (ty >= yl) & (ty <= yh)
    tx, ty = np.clip(tx, xl, xh), np.clip(ty, yl, yh)
    # J02 = -fx * tx / z with tx = clip(x / z): d/dx and d/dz, zero slope where clipped
    dJ02_dx = np.where(free_x, -fx / (z * z), 0.0)
    dJ02_dz = fx * tx / (z * z) + np.where(free_x, fx * x / z ** 3, 0.0)
    dJ12_dy = np.where(free_y, -fy / (z * z), 0.0)
    dJ12_dz = fy * ty / (z * z) + np.where(free_y, fy * y / z ** 3, 0.0)
    gcx = gm[:, 0] * fx / z + G_J[:, 0, 2] * dJ02_dx
    gcy = gm[:, 1] * fy / z + G_J[:, 1, 2] * dJ12_dy
    gcz = (-(gm[:, 0] * fx * x + gm[:, 1] * fy * y) / (z * z)
           - G_J[:, 0, 0] * fx / (z * z) + G_J[:, 0, 2] * dJ02_dz
           - G_J[:, 1, 1] * fy / (z * z) + G_J[:, 1, 2] * dJ12_dz
           + gz)
    g_cam = np.stack([gcx, gcy, gcz], axis=1)
    g_pos = g_cam @ Wr

    o = proj.base_opacity
    idx = proj.index
    grads.positions[idx] = g_pos
    grads.rotations[idx] = g_rot
    grads.log_scales[idx] = g_ls
    grads.opacity_logits[idx] = g_base_op * o * (1.0 - o)
    grads.colors[idx] = gc
    return grads
