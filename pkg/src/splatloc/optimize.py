"""Map refinement: L1 photometric + depth losses, per-view exposure affines, Adam."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .gaussians import LOG_SCALE_BOUNDS, GaussianMap, prune
from .geometry import CameraPose, PinholeIntrinsics
from .render import ExposureAffine, PrimitiveGrads, RenderConfig, rasterize, rasterize_backward

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15
DEPTH_SUPPORT_ALPHA = 0.5


class EmptyMask(ValueError):
    pass


class Diverged(RuntimeError):
    pass


@dataclass(eq=False)
class TrainView:
    image: np.ndarray
    depth: np.ndarray
    pose: CameraPose
    intrinsics: PinholeIntrinsics
    exposure: ExposureAffine = field(default_factory=ExposureAffine.identity)
    name: str = ""
    applied_exposure: ExposureAffine | None = None  # synthetic ground truth, if known

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        H, W = self.intrinsics.height, self.intrinsics.width
        if self.image.shape != (H, W, 3) or self.depth.shape != (H, W):
            raise ValueError(f"view {self.name!r}: image/depth shape does not match {W}x{H} intrinsics")
        if np.any(self.depth < 0):
            raise ValueError(f"view {self.name!r}: negative depth")


@dataclass(frozen=True)
class OptimConfig:
    iterations: int = 1500
    lr_position: float = 5e-4
    lr_rotation: float = 2e-3
    lr_log_scale: float = 5e-3
    lr_opacity_logit: float = 2e-2
    lr_color: float = 5e-3
    lr_exposure: float = 1e-2
    lambda_depth: float = 0.5
    exposure_enabled: bool = True
    antialias_enabled: bool = True
    antialias_s: float = 0.3
    tile_size: int = 16
    seed: int = 0
    prune_interval: int = 500
    prune_opacity: float = 0.005
    tag: str = ""

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        for name in ("lr_position", "lr_rotation", "lr_log_scale", "lr_opacity_logit", "lr_color", "lr_exposure"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lambda_depth < 0:
            raise ValueError("lambda_depth must be non-negative")

    @classmethod
    def preset(cls, name: str, **overrides) -> OptimConfig:
        """Ablation configurations: (a) color+depth, (b) + exposure, (c) + anti-aliasing."""
        flags = {"a": (False, False), "b": (True, False), "c": (True, True)}
        if name not in flags:
            raise ValueError(f"unknown config {name!r}; expected a, b or c")
        exposure, aa = flags[name]
        return cls(exposure_enabled=exposure, antialias_enabled=aa, tag=name, **overrides)

    @property
    def render_config(self) -> RenderConfig:
        return RenderConfig(antialias_enabled=self.antialias_enabled, antialias_s=self.antialias_s,
                            tile_size=self.tile_size)


def photometric_loss(rendered: np.ndarray, observed: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Mean absolute difference over masked pixels and all channels."""
    if rendered.shape != observed.shape:
        raise ValueError("image shapes differ")
    diff = np.abs(rendered - observed)
    if mask is None:
        if diff.size == 0:
            raise EmptyMask("no valid pixel")
        return float(diff.mean())
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMask("no valid pixel")
    return float(diff[mask].mean())


def depth_loss(rendered_depth: np.ndarray, observed_depth: np.ndarray,
               rendered_alpha: np.ndarray) -> tuple[float, int]:
    """Mean L1 over pixels with valid observed depth and rendered alpha above 0.5.

    Returns ``(loss, support)``; an empty support yields ``(0.0, 0)``.
    """
    if rendered_depth.shape != observed_depth.shape:
        raise ValueError("depth shapes differ")
    support = (observed_depth > 0) & (rendered_alpha > DEPTH_SUPPORT_ALPHA)
    n = int(support.sum())
    if n == 0:
        return 0.0, 0
    return float(np.abs(rendered_depth[support] - observed_depth[support]).mean()), n


@dataclass(eq=False)
class ViewGradients:
    photometric: float
    depth: float
    total: float
    primitives: PrimitiveGrads
    exposure: np.ndarray | None
    color: np.ndarray


def render_backward(gmap: GaussianMap, view: TrainView, render_cfg: RenderConfig | None = None,
                    lambda_depth: float = 0.5, exposure_enabled: bool = True,
                    threads: int | None = None) -> ViewGradients:
    """Loss ``photometric + lambda_depth * depth`` for one view and its gradients."""
    frame, state = rasterize(gmap, view.pose, view.intrinsics, render_cfg, threads)
    raw = frame.color
    if exposure_enabled:
        e = view.exposure
        pre = raw @ e.A.T + e.b
        color = np.clip(pre, 0.0, 1.0)
    else:
        color = raw
    photo = photometric_loss(color, view.image)
    resid = color - view.image
    g_color = np.sign(resid) / resid.size
    g_exposure = None
    if exposure_enabled:
        inside = (pre >= 0.0) & (pre <= 1.0)
        g_pre = g_color * inside
        g_raw = g_pre @ e.A
        gv = g_pre.reshape(-1, 3)
        g_exposure = np.hstack([gv.T @ raw.reshape(-1, 3), gv.sum(axis=0)[:, None]])
    else:
        g_raw = g_color

    d_loss, support = depth_loss(frame.depth, view.depth, frame.alpha)
    g_depth = None
    if support and lambda_depth > 0:
        mask = (view.depth > 0) & (frame.alpha > DEPTH_SUPPORT_ALPHA)
        g_depth = np.where(mask, np.sign(frame.depth - view.depth), 0.0) * (lambda_depth / support)
    total = photo + lambda_depth * d_loss
    prim = rasterize_backward(state, g_raw, g_depth)
    return ViewGradients(photo, d_loss, total, prim, g_exposure, color)


class _Adam:
    def __init__(self, shape, lr: float):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0
        self.lr = lr

    def step(self, param: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m *= ADAM_BETA1
        self.m += (1 - ADAM_BETA1) * grad
        self.v *= ADAM_BETA2
        self.v += (1 - ADAM_BETA2) * grad * grad
        mhat = self.m / (1 - ADAM_BETA1 ** self.t)
        vhat = self.v / (1 - ADAM_BETA2 ** self.t)
        param -= self.lr * mhat / (np.sqrt(vhat) + ADAM_EPS)

    def keep(self, index) -> None:
        self.m = self.m[index]
        self.v = self.v[index]


@dataclass(eq=False)
class OptimResult:
    gmap: GaussianMap
    exposures: list[ExposureAffine]
    history: list[tuple[int, float, float, float]]

    def write_history_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write("iter,photometric,depth,total\n")
            for it, p, d, t in self.history:
                f.write(f"{it},{p:.9g},{d:.9g},{t:.9g}\n")


def optimize_map(init: GaussianMap, views: list[TrainView], cfg: OptimConfig,
                 threads: int | None = None, callback=None) -> OptimResult:
    """Refine ``init`` against ``views``.

    Each iteration is one Adam step on one view; views are visited in epochs of a
    seeded permutation. Rotations are renormalized after every step, colors clamped
    to [0, 1] and log-scales to the representable range.
    """
    if not views:
        raise ValueError("need at least one training view")
    if len(init) == 0:
        raise ValueError("initial map is empty")
    gmap = init.copy()
    gmap.metadata["config"] = cfg.tag or "custom"
    exposures = [v.exposure.matrix.copy() for v in views]
    rcfg = cfg.render_config
    rng = np.random.default_rng(cfg.seed)

    groups = {
        "positions": cfg.lr_position, "rotations": cfg.lr_rotation, "log_scales": cfg.lr_log_scale,
        "opacity_logits": cfg.lr_opacity_logit, "colors": cfg.lr_color,
    }
    adams = {name: _Adam(getattr(gmap, name).shape, lr) for name, lr in groups.items()}
    exp_adams = [_Adam((3, 4), cfg.lr_exposure) for _ in views]

    history: list[tuple[int, float, float, float]] = []
    order: list[int] = []
    for it in range(1, cfg.iterations + 1):
        if not order:
            order = list(rng.permutation(len(views)))
        vi = int(order.pop(0))
        view = replace(views[vi], exposure=ExposureAffine(exposures[vi]))
        vg = render_backward(gmap, view, rcfg, cfg.lambda_depth, cfg.exposure_enabled, threads)
        if not np.isfinite(vg.total):
            raise Diverged(f"loss became non-finite at iteration {it}")
        history.append((it, vg.photometric, vg.depth, vg.total))

        for name, grad in (("positions", vg.primitives.positions), ("rotations", vg.primitives.rotations),
                           ("log_scales", vg.primitives.log_scales),
                           ("opacity_logits", vg.primitives.opacity_logits), ("colors", vg.primitives.colors)):
            adams[name].step(getattr(gmap, name), grad)
        gmap.rotations /= np.linalg.norm(gmap.rotations, axis=1, keepdims=True)
        np.clip(gmap.colors, 0.0, 1.0, out=gmap.colors)
        np.clip(gmap.log_scales, *LOG_SCALE_BOUNDS, out=gmap.log_scales)
        if cfg.exposure_enabled:
            exp_adams[vi].step(exposures[vi], vg.exposure)
        if not all(np.all(np.isfinite(getattr(gmap, n))) for n in groups):
            raise Diverged(f"parameters became non-finite at iteration {it}")

        if cfg.prune_interval and it % cfg.prune_interval == 0 and it < cfg.iterations:
            keep = np.flatnonzero(gmap.opacities >= cfg.prune_opacity)
            if len(keep) < len(gmap):
                log.debug("iteration %d: pruning %d primitives", it, len(gmap) - len(keep))
                gmap = gmap.subset(keep)
                for a in adams.values():
                    a.keep(keep)
        if callback is not None:
            callback(it, gmap, vg)

    gmap = prune(gmap, cfg.prune_opacity) if cfg.prune_interval else gmap
    return OptimResult(gmap, [ExposureAffine(e) for e in exposures], history)


def init_from_views(views: list[TrainView], stride: int = 4, opacity: float = 0.9,
                    background=(0.0, 0.0, 0.0)) -> GaussianMap:
    """Initial map from RGB-D views: one Gaussian per ``stride``-th valid depth pixel,
    flattened towards the camera, sized to the back-projected pixel footprint."""
    from .gaussians import logit
    from .geometry import back_project, matrix_to_quat

    pos, rot, ls, col = [], [], [], []
    for v in views:
        ys, xs = np.nonzero(v.depth[::stride, ::stride] > 0)
        if len(ys) == 0:
            continue
        u, w = xs * stride, ys * stride
        z = v.depth[w, u]
        pos.append(v.pose.camera_to_world(back_project(u.astype(float), w.astype(float), z, v.intrinsics)))
        q = matrix_to_quat(v.pose.R)  # third axis along the viewing direction
        rot.append(np.tile(q, (len(z), 1)))
        s = np.clip(0.5 * stride * z / v.intrinsics.fx, np.exp(LOG_SCALE_BOUNDS[0]), np.exp(LOG_SCALE_BOUNDS[1]))
        ls.append(np.log(np.stack([s, s, np.maximum(s / 10, np.exp(LOG_SCALE_BOUNDS[0]))], axis=1)))
        col.append(np.clip(v.image[w, u], 0.0, 1.0))
    if not pos:
        return GaussianMap.empty(background, {"dataset": "ingested"})
    n = sum(len(p) for p in pos)
    return GaussianMap(np.concatenate(pos), np.concatenate(rot), np.concatenate(ls),
                       np.full(n, float(logit(opacity))), np.concatenate(col),
                       np.asarray(background, dtype=np.float64), {"dataset": "ingested"})
