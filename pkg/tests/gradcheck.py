"""Central finite-difference check of the rasterizer and exposure gradients on a 3-splat, 8x8 instance."""
from __future__ import annotations

import numpy as np

from splatloc.gaussians import GaussianMap, logit
from splatloc.geometry import CameraPose, PinholeIntrinsics
from splatloc.optimize import TrainView, render_backward
from splatloc.render import ExposureAffine, RenderConfig, rasterize, rasterize_backward

H_STEP = 1e-5
K8 = PinholeIntrinsics(10.0, 10.0, 3.5, 3.5, 8, 8)
GROUPS = ("positions", "rotations", "log_scales", "opacity_logits", "colors")


def three_splats(seed: int = 0) -> GaussianMap:
    """Large splats covering the whole image, so no pixel sits on a cutoff boundary."""
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(3, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianMap(
        np.array([[0.1, -0.05, 2.0], [-0.1, 0.1, 2.5], [0.05, 0.1, 3.0]]) + 0.02 * rng.normal(size=(3, 3)),
        q,
        np.log(rng.uniform(0.6, 1.0, (3, 3))),
        logit(rng.uniform(0.3, 0.7, 3)),
        rng.uniform(0.2, 0.8, (3, 3)),
        background=(0.1, 0.2, 0.3),
    )


def _rel(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def primitive_errors(cfg: RenderConfig, seed: int = 0) -> dict[str, float]:
    """Max relative error per parameter group for a random linear loss on color, depth and alpha."""
    gmap = three_splats(seed)
    rng = np.random.default_rng(seed + 1)
    gc = rng.normal(size=(8, 8, 3))
    gd = rng.normal(size=(8, 8))
    ga = rng.normal(size=(8, 8))
    pose = CameraPose()

    def loss(m):
        f = render_frame(m)
        return float(np.sum(gc * f.color) + np.sum(gd * f.depth) + np.sum(ga * f.alpha))

    def render_frame(m):
        return rasterize(m, pose, K8, cfg, threads=1)[0]

    _, state = rasterize(gmap, pose, K8, cfg, threads=1)
    grads = rasterize_backward(state, gc, gd, ga)
    errors = {}
    for name, g in zip(GROUPS, (grads.positions, grads.rotations, grads.log_scales, grads.opacity_logits,
                                grads.colors)):
        base = getattr(gmap, name)
        numeric = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus, minus = gmap.copy(), gmap.copy()
            getattr(plus, name)[idx] += H_STEP
            getattr(minus, name)[idx] -= H_STEP
            numeric[idx] = (loss(plus) - loss(minus)) / (2 * H_STEP)
        errors[name] = _rel(g, numeric)
    return errors


def exposure_error(seed: int = 0) -> float:
    gmap = three_splats(seed)
    rng = np.random.default_rng(seed + 2)
    observed = rng.uniform(0, 1, (8, 8, 3))
    m = np.hstack([np.eye(3) * 0.9 + 0.02 * rng.normal(size=(3, 3)), 0.03 * rng.normal(size=(3, 1))])
    cfg = RenderConfig(antialias_s=0.3)

    def run(matrix):
        view = TrainView(observed, np.zeros((8, 8)), CameraPose(), K8, ExposureAffine(matrix))
        return render_backward(gmap, view, cfg, lambda_depth=0.0, exposure_enabled=True, threads=1)

    analytic = run(m).exposure
    numeric = np.zeros((3, 4))
    for idx in np.ndindex(3, 4):
        p, q = m.copy(), m.copy()
        p[idx] += H_STEP
        q[idx] -= H_STEP
        numeric[idx] = (run(p).total - run(q).total) / (2 * H_STEP)
    return _rel(analytic, numeric)
