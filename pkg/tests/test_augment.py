from __future__ import annotations

import numpy as np
import pytest

from splatloc.augment import (KEYFRAME, RENDERED, ReferenceView, SamplingConfig, generate_reference_set,
                              pose_offsets, read_reference_set, sample_poses, write_reference_set)
from splatloc.geometry import CameraPose, yaw_pitch_pose
from splatloc.synth import SceneSpec, default_intrinsics, generate_scene, render_dataset, sample_room_poses

from conftest import random_pose


@pytest.fixture(scope="module")
def scene_and_keyframes():
    spec = SceneSpec(gaussians_per_m2=40)
    gmap = generate_scene(spec)
    K = default_intrinsics(48, 36)
    kfs = render_dataset(gmap, sample_room_poses(spec, 10, seed=9), K)
    return gmap, kfs, K


def test_zero_ranges_copy_the_keyframe(rng):
    kf = random_pose(rng)
    cfg = SamplingConfig(longitudinal_range=0, lateral_range=0, yaw_range=0)
    poses = sample_poses(kf, cfg)
    assert len(poses) == 25
    for p in poses:
        assert np.allclose(p.matrix(), kf.matrix(), atol=1e-15)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_default_bounds_identity_keyframe(seed):
    for p in sample_poses(CameraPose(), SamplingConfig(seed=seed)):
        lon, lat, ver, yaw = pose_offsets(CameraPose(), p)
        assert abs(lon) <= 0.5 and abs(lat) <= 2.0 and ver == pytest.approx(0, abs=1e-12)
        assert -180 <= yaw <= 180


def test_offsets_follow_keyframe_axes():
    kf = yaw_pitch_pose((1.0, 2.0, 1.2), 0.7)
    cfg = SamplingConfig(samples_per_keyframe=200, seed=4)
    offs = np.array([pose_offsets(kf, p) for p in sample_poses(kf, cfg, 3)])
    assert np.all(np.abs(offs[:, 0]) <= 0.5) and np.all(np.abs(offs[:, 1]) <= 2.0)
    assert np.allclose(offs[:, 2], 0, atol=1e-12)
    # the offsets spread over the full allowed ranges
    assert np.abs(offs[:, 1]).max() > 1.8 and np.abs(offs[:, 3]).max() > 170
    # yaw is about the keyframe's up axis: heights and the level horizon are kept
    for p in sample_poses(kf, cfg, 3):
        assert p.center[2] == pytest.approx(1.2, abs=1e-12)
        assert p.R[2, 0] == pytest.approx(0, abs=1e-12)


def test_sampling_determinism():
    kf = CameraPose()
    a = sample_poses(kf, SamplingConfig(seed=1), 5)
    b = sample_poses(kf, SamplingConfig(seed=1), 5)
    c = sample_poses(kf, SamplingConfig(seed=2), 5)
    d = sample_poses(kf, SamplingConfig(seed=1), 6)
    assert a == b
    assert a != c and a != d


def test_sampling_config_validation():
    with pytest.raises(ValueError):
        SamplingConfig(samples_per_keyframe=-1)
    with pytest.raises(ValueError):
        SamplingConfig(lateral_range=-0.1)


def test_no_samples_gives_keyframes_only(scene_and_keyframes):
    gmap, kfs, _ = scene_and_keyframes
    refs = generate_reference_set(gmap, kfs, SamplingConfig(samples_per_keyframe=0))
    assert len(refs) == len(kfs) and all(r.provenance == KEYFRAME for r in refs)


def test_counts_and_keyframes_present_once(scene_and_keyframes):
    gmap, kfs, _ = scene_and_keyframes
    refs = generate_reference_set(gmap, kfs, SamplingConfig(seed=3), min_coverage=0.0)
    assert len(refs) == 10 + 250 and refs.dropped == 0
    assert [r.pose for r in refs.keyframes] == [k.pose for k in kfs]
    rendered = [r for r in refs if r.provenance == RENDERED]
    assert all(0.0 <= r.alpha_coverage <= 1.0 and r.source_keyframe_index is not None for r in rendered)
    assert all(np.all(r.depth[r.depth > 0] > 0.01) for r in rendered)


def test_outward_facing_render_is_dropped(scene_and_keyframes):
    gmap, kfs, K = scene_and_keyframes
    outside = yaw_pitch_pose((7.0, 0.0, 1.2), 0.0)  # beyond the +x wall, facing away from the room
    kf = render_dataset(gmap, [outside], K)[0]
    cfg = SamplingConfig(samples_per_keyframe=3, longitudinal_range=0.2, lateral_range=0.2, yaw_range=10)
    refs = generate_reference_set(gmap, [kf], cfg, min_coverage=0.2)
    assert len(refs) == 1 and refs.dropped == 3


def test_reference_set_reproducible(scene_and_keyframes):
    gmap, kfs, _ = scene_and_keyframes
    cfg = SamplingConfig(samples_per_keyframe=2, seed=8)
    a = generate_reference_set(gmap, kfs[:3], cfg)
    b = generate_reference_set(gmap, kfs[:3], cfg)
    assert len(a) == len(b)
    for x, y in zip(a, b):
        assert x.pose == y.pose and np.array_equal(x.image, y.image) and np.array_equal(x.depth, y.depth)


def test_reference_set_disk_round_trip(scene_and_keyframes, tmp_path):
    gmap, kfs, _ = scene_and_keyframes
    refs = generate_reference_set(gmap, kfs[:2], SamplingConfig(samples_per_keyframe=2, seed=1), min_coverage=0)
    write_reference_set(tmp_path, refs)
    back = read_reference_set(tmp_path)
    assert len(back) == len(refs)
    for r, b in zip(refs, back):
        assert b.provenance == r.provenance and b.source_keyframe_index == r.source_keyframe_index
        assert np.allclose(b.pose.matrix(), r.pose.matrix(), atol=1e-12)
        assert np.abs(b.image - r.image).max() <= 0.5 / 255 + 1e-12
    header = (tmp_path / "manifest.txt").read_text().splitlines()[0]
    assert header.startswith("# index")


def test_reference_view_validation():
    img = np.zeros((4, 4, 3))
    K = default_intrinsics(4, 4)
    with pytest.raises(ValueError):
        ReferenceView(img, CameraPose(), K, RENDERED)
    with pytest.raises(ValueError):
        ReferenceView(img, CameraPose(), K, "other")
    with pytest.raises(ValueError):
        ReferenceView(img, CameraPose(), K, KEYFRAME, 0, 1.5)
