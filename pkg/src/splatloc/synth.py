"""Synthetic indoor scenes authored directly as Gaussians, camera trajectories and
perturbation injectors. Everything is a pure function of the seeds involved."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .gaussians import GaussianMap, logit
from .geometry import CameraPose, PinholeIntrinsics, matrix_to_quat, yaw_pitch_pose
from .optimize import TrainView
from .render import ExposureAffine, RenderConfig, render

FACES = ("-x", "+x", "-y", "+y", "-z", "+z")


class WaypointOutsideScene(ValueError):
    pass


@dataclass(frozen=True)
class BoxSpec:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    base_color: tuple[float, float, float] = (0.8, 0.8, 0.8)
    texture_frequency: float | None = None  # texture cells per meter; None uses the scene default
    faces: tuple[str, ...] = FACES
    face_colors: tuple[tuple[str, tuple[float, float, float]], ...] = ()  # per-face base color overrides

    def color_of(self, face: str) -> np.ndarray:
        return np.asarray(dict(self.face_colors).get(face, self.base_color), dtype=np.float64)


def default_boxes() -> tuple[BoxSpec, ...]:
    return (
        BoxSpec((0.0, 0.0, 1.5), (12.0, 8.0, 3.0), (0.85, 0.8, 0.7),
                face_colors=(("-x", (0.9, 0.55, 0.5)), ("+x", (0.5, 0.65, 0.95)), ("-y", (0.6, 0.9, 0.6)),
                             ("+y", (0.95, 0.9, 0.5)), ("-z", (0.6, 0.5, 0.4)), ("+z", (0.9, 0.9, 0.9)))),
        BoxSpec((-1.5, 0.0, 1.5), (0.5, 0.5, 3.0), (0.9, 0.5, 0.35), faces=("-x", "+x", "-y", "+y")),
        BoxSpec((1.5, 0.0, 1.5), (0.5, 0.5, 3.0), (0.4, 0.6, 0.9), faces=("-x", "+x", "-y", "+y")),
        BoxSpec((0.0, 0.0, 0.5), (1.0, 1.0, 1.0), (0.5, 0.85, 0.45), faces=("-x", "+x", "-y", "+y", "+z")),
        BoxSpec((-4.5, 3.5, 0.5), (1.0, 1.0, 1.0), (0.9, 0.8, 0.3), faces=("-x", "+x", "-y", "+z")),
        BoxSpec((4.5, -3.5, 0.75), (1.0, 1.0, 1.5), (0.7, 0.45, 0.8), faces=("-x", "+x", "+y", "+z")),
    )


@dataclass(frozen=True)
class SceneSpec:
    extent: tuple[float, float, float] = (12.0, 8.0, 3.0)
    boxes: tuple[BoxSpec, ...] = field(default_factory=default_boxes)
    gaussians_per_m2: float = 150.0
    texture_frequency: float = 2.0  # texture cells per meter unless a box overrides it
    grain: float = 0.25  # std-dev of independent per-Gaussian brightness noise (fine surface grain)
    seed: int = 0
    opacity: float = 0.9
    tangent_sigma_factor: float = 0.6  # tangent std-dev as a fraction of grid spacing
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if min(self.extent) <= 0:
            raise ValueError("scene extent must be positive")
        if self.gaussians_per_m2 < 0:
            raise ValueError("density must be non-negative")
        if self.texture_frequency <= 0:
            raise ValueError("texture frequency must be positive")

    @property
    def lower(self) -> np.ndarray:
        ex, ey, _ = self.extent
        return np.array([-ex / 2, -ey / 2, 0.0])

    @property
    def upper(self) -> np.ndarray:
        ex, ey, ez = self.extent
        return np.array([ex / 2, ey / 2, ez])


def _face_frames(box: BoxSpec):
    """Yields (face name, origin corner, u axis, v axis, normal, u length, v length)."""
    c = np.asarray(box.center, dtype=np.float64)
    h = np.asarray(box.size, dtype=np.float64) / 2
    e = np.eye(3)
    for name in box.faces:
        axis = "xyz".index(name[1])
        sign = 1.0 if name[0] == "+" else -1.0
        ua, va = [a for a in range(3) if a != axis]
        normal = sign * e[axis]
        u, v = e[ua], e[va]
        if np.dot(np.cross(u, v), normal) < 0:
            ua, va = va, ua
            u, v = e[ua], e[va]
        origin = c - h[ua] * u - h[va] * v
        origin[axis] = c[axis] + sign * h[axis]
        yield name, origin, u, v, normal, 2 * h[ua], 2 * h[va], axis


BLOCK_WEIGHT = 0.45


def _value_noise(rng: np.random.Generator, u: np.ndarray, v: np.ndarray, freq: float,
                 extent_u: float, extent_v: float) -> np.ndarray:
    """Blocky cell noise at ``freq`` plus a smooth colored octave at ``freq / 4``; RGB in [0, 1]."""
    nu, nv = int(np.ceil(extent_u * freq)) + 2, int(np.ceil(extent_v * freq)) + 2
    cells = rng.uniform(size=(nu, nv, 3))
    iu = np.clip(np.floor(u * freq).astype(int), 0, nu - 1)
    iv = np.clip(np.floor(v * freq).astype(int), 0, nv - 1)
    block = cells[iu, iv]
    lf = freq / 4.0
    cu, cv = int(np.ceil(extent_u * lf)) + 2, int(np.ceil(extent_v * lf)) + 2
    coarse = rng.uniform(size=(cu, cv, 3))
    fu, fv = u * lf, v * lf
    i0, j0 = np.clip(np.floor(fu).astype(int), 0, cu - 2), np.clip(np.floor(fv).astype(int), 0, cv - 2)
    tu, tv = fu - i0, fv - j0
    tu, tv = (tu * tu * (3 - 2 * tu))[:, None], (tv * tv * (3 - 2 * tv))[:, None]
    smooth = ((1 - tu) * (1 - tv) * coarse[i0, j0] + tu * (1 - tv) * coarse[i0 + 1, j0]
              + (1 - tu) * tv * coarse[i0, j0 + 1] + tu * tv * coarse[i0 + 1, j0 + 1])
    return BLOCK_WEIGHT * block + (1.0 - BLOCK_WEIGHT) * smooth


def generate_scene(spec: SceneSpec) -> GaussianMap:
    """Cover the requested box faces with tangent-aligned, flattened Gaussians."""
    meta = {"seed": str(spec.seed), "dataset": "synthetic"}
    if spec.gaussians_per_m2 == 0 or not spec.boxes:
        return GaussianMap.empty(spec.background, meta)
    rng = np.random.default_rng(spec.seed)
    spacing = 1.0 / np.sqrt(spec.gaussians_per_m2)
    sigma_t = spec.tangent_sigma_factor * spacing
    sigma_n = sigma_t / 10.0
    pos, rot, ls, col = [], [], [], []
    for box in spec.boxes:
        for face, origin, u, v, normal, lu, lv, axis in _face_frames(box):
            nu, nv = max(1, int(round(lu / spacing))), max(1, int(round(lv / spacing)))
            gu, gv = np.meshgrid((np.arange(nu) + 0.5) * lu / nu, (np.arange(nv) + 0.5) * lv / nv, indexing="ij")
            gu = gu.ravel() + rng.uniform(-0.3, 0.3, gu.size) * lu / nu
            gv = gv.ravel() + rng.uniform(-0.3, 0.3, gv.size) * lv / nv
            p = origin + gu[:, None] * u + gv[:, None] * v
            p[:, axis] = origin[axis]
            pos.append(p)
            R = np.stack([u, v, normal], axis=1)
            rot.append(np.tile(matrix_to_quat(R), (len(p), 1)))
            ls.append(np.tile(np.log([sigma_t, sigma_t, sigma_n]), (len(p), 1)))
            freq = box.texture_frequency if box.texture_frequency is not None else spec.texture_frequency
            tex = _value_noise(rng, gu, gv, freq, lu, lv)
            if spec.grain > 0:
                tex = tex * (1.0 + spec.grain * rng.standard_normal(len(tex)))[:, None]
            col.append(np.clip(box.color_of(face) * (0.25 + 0.75 * tex), 0.0, 1.0))
    n = sum(len(p) for p in pos)
    return GaussianMap(np.concatenate(pos), np.concatenate(rot), np.concatenate(ls),
                       np.full(n, float(logit(spec.opacity))), np.concatenate(col),
                       np.asarray(spec.background, dtype=np.float64), meta)


def point_on_box_surface(p, box: BoxSpec, tol: float = 1e-9) -> bool:
    c = np.asarray(box.center)
    h = np.asarray(box.size) / 2
    d = np.abs(np.asarray(p) - c)
    inside = np.all(d <= h + tol)
    on_face = np.any(np.abs(d - h) <= tol)
    return bool(inside and on_face)


# -- trajectories -------------------------------------------------------------------

@dataclass(frozen=True)
class TrajectorySpec:
    waypoints: tuple[tuple[float, float], ...]
    speed: float = 0.5
    frame_rate: float = 10.0
    camera_height: float = 1.2
    lateral_offset: float = 0.0  # meters to the right of travel
    reverse: bool = False
    corner_blend: float = 0.5  # meters over which heading turns at a corner
    pitch: float = 0.0


def default_mapping_waypoints() -> tuple[tuple[float, float], ...]:
    return ((-4.0, -2.0), (4.0, -2.0), (4.0, 2.0), (-4.0, 2.0), (-4.0, -2.0))


def _wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


def generate_trajectory(spec: TrajectorySpec, scene: SceneSpec) -> list[tuple[float, CameraPose]]:
    """Poses at frame-rate spacing along the waypoint polyline, facing the direction of travel."""
    wp = np.asarray(spec.waypoints, dtype=np.float64)
    lo, hi = scene.lower, scene.upper
    for x, y in wp:
        if not (lo[0] <= x <= hi[0] and lo[1] <= y <= hi[1]):
            raise WaypointOutsideScene(f"waypoint ({x}, {y}) lies outside the scene extent")
    if not lo[2] < spec.camera_height < hi[2]:
        raise WaypointOutsideScene(f"camera height {spec.camera_height} outside the scene")
    if len(wp) < 2:
        raise ValueError("need at least two waypoints")
    seg = np.diff(wp, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    if np.any(seg_len == 0):
        raise ValueError("repeated waypoint")
    heading = np.arctan2(seg[:, 1], seg[:, 0])
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = cum[-1]
    step = spec.speed / spec.frame_rate
    n = int(np.floor(total / step + 1e-9)) + 1
    b = spec.corner_blend

    poses = []
    for k in range(n):
        s = min(k * step, total)
        i = min(int(np.searchsorted(cum, s, side="right")) - 1, len(seg) - 1)
        xy = wp[i] + (s - cum[i]) / seg_len[i] * seg[i]
        yaw = heading[i]
        # blend heading across the nearest interior vertex
        for vtx in (i, i + 1):
            if 0 < vtx < len(seg) and abs(s - cum[vtx]) < b:
                h0, h1 = heading[vtx - 1], heading[vtx]
                t = (s - cum[vtx] + b) / (2 * b)
                yaw = h0 + t * _wrap(h1 - h0)
                break
        poses.append((xy, float(_wrap(yaw))))

    if spec.reverse:
        poses = [(xy, float(_wrap(yaw + np.pi))) for xy, yaw in reversed(poses)]
    out = []
    for k, (xy, yaw) in enumerate(poses):
        right = np.array([np.sin(yaw), -np.cos(yaw)])
        p = xy + spec.lateral_offset * right
        out.append((k / spec.frame_rate, yaw_pitch_pose([p[0], p[1], spec.camera_height], yaw, spec.pitch)))
    return out


def heading_of(pose: CameraPose) -> float:
    f = pose.R[:, 2]
    return float(np.arctan2(f[1], f[0]))


# -- rendering datasets -------------------------------------------------------------

@dataclass(frozen=True)
class Perturbations:
    exposure: bool = False
    gain_range: tuple[float, float] = (0.7, 1.3)
    bias_range: tuple[float, float] = (-0.05, 0.05)
    depth_noise: float = 0.0  # depth std-dev per squared meter of depth
    supersample: int = 1
    psf_variance: float = 0.0  # optical blur variance, px^2 at output resolution
    seed: int = 0


def _area_downsample(img: np.ndarray, f: int) -> np.ndarray:
    H, W = img.shape[0] // f, img.shape[1] // f
    return img[:H * f, :W * f].reshape(H, f, W, f, *img.shape[2:]).mean(axis=(1, 3))


def render_dataset(gmap: GaussianMap, trajectory, K: PinholeIntrinsics,
                   perturbations: Perturbations | None = None, render_cfg: RenderConfig | None = None,
                   threads: int | None = None) -> list[TrainView]:
    """Ground-truth renders along ``trajectory`` with optional exposure and depth noise.

    With ``supersample = f`` each view is rendered at ``f`` times the resolution and
    area-averaged, emulating pixel integration of a real sensor; ``psf_variance``
    adds a Gaussian optical blur before integration (color only).
    """
    pert = perturbations or Perturbations()
    rng = np.random.default_rng(pert.seed)
    views = []
    for i, item in enumerate(trajectory):
        pose = item[1] if isinstance(item, tuple) else item
        if pert.supersample > 1:
            f = pert.supersample
            hi = render(gmap, pose, K.scaled(f), render_cfg, threads)
            alpha = _area_downsample(hi.alpha, f)
            color = hi.color
            if pert.psf_variance > 0:
                color = gaussian_filter(color, sigma=(np.sqrt(pert.psf_variance) * f,) * 2 + (0,),
                                        mode="nearest")
            color = _area_downsample(color, f)
            wd = _area_downsample(hi.depth * hi.alpha, f)
            depth = np.where(alpha > 0, wd / np.maximum(alpha, 1e-12), 0.0)
        else:
            fr = render(gmap, pose, K, render_cfg, threads)
            color, depth, alpha = fr.color, fr.depth, fr.alpha
        applied = None
        if pert.exposure:
            gain = rng.uniform(*pert.gain_range)
            bias = rng.uniform(*pert.bias_range)
            applied = ExposureAffine.from_gain_bias(gain, bias)
            color = np.clip(color * gain + bias, 0.0, 1.0)
        if pert.depth_noise > 0:
            noisy = depth + rng.normal(size=depth.shape) * pert.depth_noise * depth ** 2
            depth = np.where(depth > 0, np.maximum(noisy, 0.0), 0.0)
        views.append(TrainView(color, depth, pose, K, name=f"{i:06d}", applied_exposure=applied))
    return views


def perturb_map(gmap: GaussianMap, position_sigma: float = 0.02, color_sigma: float = 0.0,
                seed: int = 0) -> GaussianMap:
    """Copy of ``gmap`` with Gaussian noise on positions and colors (colors clipped)."""
    rng = np.random.default_rng(seed)
    out = gmap.copy()
    out.positions += rng.normal(scale=position_sigma, size=out.positions.shape)
    if color_sigma > 0:
        out.colors = np.clip(out.colors + rng.normal(scale=color_sigma, size=out.colors.shape), 0.0, 1.0)
    return out


def default_intrinsics(width: int = 320, height: int = 240) -> PinholeIntrinsics:
    f = 0.75 * width
    return PinholeIntrinsics(f, f, (width - 1) / 2, (height - 1) / 2, width, height)


def sample_room_poses(scene: SceneSpec, n: int, seed: int = 0, margin: float = 0.7, height: float = 1.2,
                      height_jitter: float = 0.3, max_pitch: float = 0.2) -> list[CameraPose]:
    """Seeded poses anywhere in the room with uniform yaw, so observed surfaces range from
    close-up to the far end of the hall (mixed observation distances)."""
    rng = np.random.default_rng(seed)
    lo, hi = scene.lower + margin, scene.upper - margin
    out = []
    for _ in range(n):
        p = [rng.uniform(lo[0], hi[0]), rng.uniform(lo[1], hi[1]), height + rng.uniform(-height_jitter, height_jitter)]
        out.append(yaw_pitch_pose(p, rng.uniform(-np.pi, np.pi), rng.uniform(-max_pitch, max_pitch)))
    return out
