from __future__ import annotations

import numpy as np
import pytest

from splatloc.evaluation import compute_psnr
from splatloc.gaussians import GaussianMap, GaussianPrimitive, logit
from splatloc.geometry import CameraPose, PinholeIntrinsics
from splatloc.optimize import (Diverged, EmptyMask, OptimConfig, TrainView, depth_loss, init_from_views,
                               optimize_map, photometric_loss, render_backward)
from splatloc.render import RenderConfig, render
from splatloc.synth import BoxSpec, Perturbations, SceneSpec, generate_scene, perturb_map, render_dataset, \
    sample_room_poses

import gradcheck

K64 = PinholeIntrinsics(48.0, 48.0, 31.5, 23.5, 64, 48)


@pytest.fixture(scope="module")
def small_room():
    room = BoxSpec((0, 0, 1.25), (4, 3, 2.5), (0.8, 0.75, 0.7),
                   face_colors=(("-x", (0.9, 0.55, 0.5)), ("+x", (0.5, 0.65, 0.95)),
                                ("-y", (0.6, 0.9, 0.6)), ("+y", (0.95, 0.9, 0.5))))
    spec = SceneSpec(extent=(4, 3, 2.5), boxes=(room,), gaussians_per_m2=60)
    gt = generate_scene(spec)
    poses = sample_room_poses(spec, 60, seed=1, margin=0.6, height=1.25)
    return gt, poses[:50], poses[50:]


def heldout_psnr(gmap, poses, gt):
    out = []
    for p in poses:
        ref = render(gt, p, K64).color
        out.append(compute_psnr(np.clip(render(gmap, p, K64).color, 0, 1), ref))
    return float(np.mean(out))


def test_photometric_loss_examples():
    a = np.random.default_rng(0).uniform(0, 0.9, (6, 7, 3))
    assert photometric_loss(a, a) == 0.0
    assert photometric_loss(a + 0.1, a) == pytest.approx(0.1, abs=1e-12)
    with pytest.raises(EmptyMask):
        photometric_loss(a, a, np.zeros((6, 7), dtype=bool))
    mask = np.zeros((6, 7), dtype=bool)
    mask[2, 3] = True
    b = a.copy()
    b[2, 3] += 0.3
    assert photometric_loss(b, a, mask) == pytest.approx(0.3)


def test_depth_loss_examples():
    full = np.ones((4, 4))
    assert depth_loss(np.full((4, 4), 1.5), np.full((4, 4), 1.5), full) == (0.0, 16)
    loss, n = depth_loss(np.full((4, 4), 2.0), np.full((4, 4), 1.5), full)
    assert loss == pytest.approx(0.5) and n == 16
    assert depth_loss(np.full((4, 4), 2.0), np.zeros((4, 4)), full) == (0.0, 0)
    # low rendered alpha removes the pixel from the support
    alpha = full.copy()
    alpha[0] = 0.4
    assert depth_loss(np.full((4, 4), 2.0), np.full((4, 4), 1.5), alpha)[1] == 12


@pytest.mark.parametrize("aa", [True, False])
def test_rasterizer_gradients_match_finite_differences(aa):
    cfg = RenderConfig(antialias_enabled=aa, antialias_s=0.3)
    for name, err in gradcheck.primitive_errors(cfg).items():
        assert err < 1e-4, name


def test_exposure_gradient_matches_finite_differences():
    assert gradcheck.exposure_error() < 1e-4


def test_zero_residual_gives_zero_gradients():
    gmap = gradcheck.three_splats()
    frame = render(gmap, CameraPose(), gradcheck.K8, RenderConfig())
    view = TrainView(frame.color, frame.depth, CameraPose(), gradcheck.K8)
    vg = render_backward(gmap, view, RenderConfig())
    assert vg.total == 0.0
    for g in vg.primitives.groups().values():
        assert np.all(np.abs(g) <= 1e-12)
    assert np.all(np.abs(vg.exposure) <= 1e-12)


def test_occluded_splat_color_gradient_vanishes():
    K = PinholeIntrinsics(20.0, 20.0, 3.5, 3.5, 8, 8)

    def s(z, opacity, color, sigma=3.0):
        return GaussianPrimitive((0, 0, z), (1, 0, 0, 0), np.log([sigma] * 3), float(logit(opacity)), color)

    # three wide, nearly opaque splats drive transmittance below the stop everywhere
    gmap = GaussianMap.from_primitives([s(1.0, 0.99, (1, 0, 0)), s(1.1, 0.99, (0, 1, 0)),
                                        s(1.2, 0.99, (0, 0, 1)), s(3.0, 0.9, (1, 1, 1), 0.5)])
    view = TrainView(np.full((8, 8, 3), 0.5), np.zeros((8, 8)), CameraPose(), K)
    cfg = RenderConfig(antialias_enabled=False)
    vg = render_backward(gmap, view, cfg, exposure_enabled=False)
    assert np.abs(vg.primitives.colors[3]).max() <= cfg.transmittance_stop
    assert np.abs(vg.primitives.colors[0]).max() > 1e-3
    h = 1e-5
    for c in range(3):
        plus, minus = gmap.copy(), gmap.copy()
        plus.colors[3, c] += h
        minus.colors[3, c] -= h
        fd = (render_backward(plus, view, cfg, exposure_enabled=False).total
              - render_backward(minus, view, cfg, exposure_enabled=False).total) / (2 * h)
        assert abs(fd - vg.primitives.colors[3, c]) <= 1e-9


def test_ground_truth_is_a_fixed_point(small_room):
    gt, train, _ = small_room
    views = render_dataset(gt, train[:5], K64, render_cfg=OptimConfig.preset("a").render_config)
    res = optimize_map(gt, views, OptimConfig.preset("a", iterations=10, prune_interval=0))
    totals = [t for *_, t in res.history]
    assert max(totals) - totals[0] <= 1e-6
    assert np.array_equal(res.gmap.positions, gt.positions)


def test_optimization_improves_heldout_psnr(small_room):
    gt, train, held = small_room
    views = render_dataset(gt, train, K64)
    init = perturb_map(gt, position_sigma=0.02, seed=3)
    res = optimize_map(init, views, OptimConfig.preset("a", iterations=200))
    before, after = heldout_psnr(init, held, gt), heldout_psnr(res.gmap, held, gt)
    assert after >= before + 3.0, (before, after)
    assert np.mean([t for *_, t in res.history[-20:]]) < np.mean([t for *_, t in res.history[:20]])


def test_exposure_compensation_helps_under_gain_changes(small_room):
    gt, train, held = small_room
    views = render_dataset(gt, train, K64, Perturbations(exposure=True, seed=4))
    init = perturb_map(gt, position_sigma=0.02, seed=3)
    psnr = {c: heldout_psnr(optimize_map(init, views, OptimConfig.preset(c, iterations=300)).gmap, held, gt)
            for c in "ab"}
    assert psnr["b"] > psnr["a"], psnr


def test_optimization_deterministic_across_runs_and_threads(small_room):
    gt, train, _ = small_room
    views = render_dataset(gt, train[:5], K64)
    init = perturb_map(gt, position_sigma=0.02, seed=3)
    cfg = OptimConfig.preset("c", iterations=15, seed=7)
    a = optimize_map(init, views, cfg, threads=1)
    b = optimize_map(init, views, cfg, threads=1)
    c = optimize_map(init, views, cfg, threads=4)
    assert a.gmap.identical_to(b.gmap) and a.gmap.identical_to(c.gmap)
    assert a.history == c.history
    assert all(np.array_equal(x.matrix, y.matrix) for x, y in zip(a.exposures, c.exposures))


def test_non_finite_loss_raises_diverged(small_room):
    gt, train, _ = small_room
    v = render_dataset(gt, train[:1], K64)[0]
    v.image[0, 0, 0] = np.nan
    with pytest.raises(Diverged):
        optimize_map(gt, [v], OptimConfig.preset("a", iterations=1))


def test_optim_config_validation():
    with pytest.raises(ValueError):
        OptimConfig(iterations=0)
    with pytest.raises(ValueError):
        OptimConfig(lr_color=0)
    with pytest.raises(ValueError):
        OptimConfig(lambda_depth=-1)
    with pytest.raises(ValueError):
        OptimConfig.preset("d")
    assert not OptimConfig.preset("a").exposure_enabled
    assert OptimConfig.preset("b").exposure_enabled and not OptimConfig.preset("b").antialias_enabled
    assert OptimConfig.preset("c").antialias_enabled


def test_init_from_views_lands_on_surfaces(small_room):
    gt, train, _ = small_room
    views = render_dataset(gt, train[:3], K64)
    init = init_from_views(views, stride=4)
    assert len(init) > 100
    lo, hi = gt.bounding_box()
    assert np.all(init.positions >= lo - 0.1) and np.all(init.positions <= hi + 0.1)


def test_history_csv(small_room, tmp_path):
    gt, train, _ = small_room
    views = render_dataset(gt, train[:2], K64)
    res = optimize_map(perturb_map(gt, 0.02), views, OptimConfig.preset("a", iterations=3))
    res.write_history_csv(tmp_path / "l.csv")
    lines = (tmp_path / "l.csv").read_text().splitlines()
    assert lines[0] == "iter,photometric,depth,total" and len(lines) == 4
