from __future__ import annotations

import numpy as np
import pytest

from splatloc.evaluation import compute_psnr
from splatloc.render import render
from splatloc.synth import (Perturbations, SceneSpec, TrajectorySpec, WaypointOutsideScene, default_intrinsics,
                            generate_scene, generate_trajectory, heading_of, point_on_box_surface,
                            render_dataset, sample_room_poses)


@pytest.fixture(scope="module")
def scene():
    spec = SceneSpec()
    return spec, generate_scene(spec)


@pytest.fixture(scope="module")
def K():
    return default_intrinsics(64, 48)


def test_empty_spec_gives_empty_map():
    assert len(generate_scene(SceneSpec(gaussians_per_m2=0))) == 0
    assert len(generate_scene(SceneSpec(boxes=()))) == 0


def test_every_gaussian_lies_on_a_box_surface(scene):
    spec, gmap = scene
    assert len(gmap) > 20000
    on = np.zeros(len(gmap), dtype=bool)
    for box in spec.boxes:
        on |= np.array([point_on_box_surface(p, box) for p in gmap.positions])
    assert on.all()


def test_scene_is_anisotropic_and_textured(scene):
    _, gmap = scene
    s = gmap.scales
    assert np.allclose(s[:, 2] * 10, s[:, 0])
    assert gmap.colors.std(axis=0).min() > 0.05


def test_scene_deterministic_given_seed():
    a = generate_scene(SceneSpec(seed=3, gaussians_per_m2=20))
    b = generate_scene(SceneSpec(seed=3, gaussians_per_m2=20))
    c = generate_scene(SceneSpec(seed=4, gaussians_per_m2=20))
    assert a.identical_to(b)
    assert not np.array_equal(a.colors, c.colors)


def test_scene_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec(extent=(0, 1, 1))
    with pytest.raises(ValueError):
        SceneSpec(gaussians_per_m2=-1)
    with pytest.raises(ValueError):
        SceneSpec(texture_frequency=0)


def test_single_segment_trajectory_spacing():
    traj = generate_trajectory(TrajectorySpec(((-5.0, 0.0), (5.0, 0.0)), speed=1.0, frame_rate=10.0), SceneSpec())
    assert len(traj) == 101
    pos = np.array([p.center for _, p in traj])
    assert np.allclose(np.linalg.norm(np.diff(pos, axis=0), axis=1), 0.1, atol=1e-12)
    assert np.allclose([heading_of(p) for _, p in traj], 0.0, atol=1e-12)
    assert traj[-1][0] == pytest.approx(10.0)


def test_reverse_trajectory():
    wp = ((-4.0, -2.0), (4.0, -2.0), (4.0, 2.0))
    fwd = generate_trajectory(TrajectorySpec(wp), SceneSpec())
    rev = generate_trajectory(TrajectorySpec(wp, reverse=True), SceneSpec())
    assert len(fwd) == len(rev)
    for (_, a), (_, b) in zip(fwd, reversed(rev)):
        assert np.allclose(a.center, b.center, atol=1e-12)
        d = (heading_of(b) - heading_of(a) - np.pi + np.pi) % (2 * np.pi) - np.pi
        assert abs(d) < 1e-9


def test_lateral_offset_is_perpendicular():
    wp = ((-4.0, -2.0), (4.0, -2.0), (4.0, 2.0))
    base = generate_trajectory(TrajectorySpec(wp), SceneSpec())
    off = generate_trajectory(TrajectorySpec(wp, lateral_offset=1.0), SceneSpec())
    for (_, a), (_, b) in zip(base, off):
        d = b.center - a.center
        assert np.linalg.norm(d) == pytest.approx(1.0, abs=1e-12)
        assert abs(d @ a.R[:, 2]) < 1e-12  # perpendicular to the heading
        assert d @ a.R[:, 0] > 0           # towards the camera's right


def test_waypoint_outside_scene():
    with pytest.raises(WaypointOutsideScene):
        generate_trajectory(TrajectorySpec(((0.0, 0.0), (20.0, 0.0))), SceneSpec())


def test_render_dataset_without_perturbation_equals_raw(scene, K):
    _, gmap = scene
    traj = generate_trajectory(TrajectorySpec(((-4.0, -2.0), (4.0, -2.0)), speed=4.0, frame_rate=1.0), SceneSpec())
    views = render_dataset(gmap, traj, K)
    for v, (_, p) in zip(views, traj):
        raw = render(gmap, p, K)
        assert np.array_equal(v.image, raw.color) and np.array_equal(v.depth, raw.depth)
        assert compute_psnr(raw.color, v.image) == float("inf")


def test_exposure_perturbation_is_invertible(scene, K):
    _, gmap = scene
    poses = sample_room_poses(SceneSpec(), 3, seed=2)
    raw = render_dataset(gmap, poses, K)
    pert = render_dataset(gmap, poses, K, Perturbations(exposure=True, seed=5))
    for r, p in zip(raw, pert):
        A, b = p.applied_exposure.A, p.applied_exposure.b
        assert 0.7 <= A[0, 0] <= 1.3 and -0.05 <= b[0] <= 0.05
        inside = (r.image @ A.T + b > 0) & (r.image @ A.T + b < 1)
        back = (p.image - b) @ np.linalg.inv(A).T
        assert np.abs(back - r.image)[inside].max() <= 1 / 255


def test_depth_noise_zero_keeps_depth(scene, K):
    _, gmap = scene
    poses = sample_room_poses(SceneSpec(), 2, seed=2)
    a = render_dataset(gmap, poses, K, Perturbations(depth_noise=0.0))
    noisy = render_dataset(gmap, poses, K, Perturbations(depth_noise=0.01, seed=1))
    for v, p in zip(a, poses):
        assert np.array_equal(v.depth, render(gmap, p, K).depth)
    assert not np.array_equal(a[0].depth, noisy[0].depth)
    assert np.all(noisy[0].depth[a[0].depth == 0] == 0)


def test_room_poses_inside_margin():
    spec = SceneSpec()
    poses = sample_room_poses(spec, 200, seed=0)
    c = np.array([p.center for p in poses])
    assert np.all(c[:, :2] >= spec.lower[:2] + 0.7) and np.all(c[:, :2] <= spec.upper[:2] - 0.7)
    assert [p.center.tolist() for p in sample_room_poses(spec, 5, seed=0)] == c[:5].tolist()
