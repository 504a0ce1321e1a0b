from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splatloc.geometry import (BehindCamera, CameraPose, DegenerateConfiguration, PinholeIntrinsics,
                               Sim3Transform, back_project, canonical_quaternion, matrix_to_quat,
                               pose_compose, project_point, quat_to_matrix, rotation_angle, umeyama_align,
                               yaw_pitch_pose)

from conftest import random_pose, rz

unit_quats = st.lists(st.floats(-1, 1, allow_nan=False), min_size=4, max_size=4).filter(
    lambda v: np.linalg.norm(v) > 1e-3)
vec3 = st.lists(st.floats(-5, 5, allow_nan=False), min_size=3, max_size=3)


def test_quaternion_canonical_sign_and_norm():
    q = canonical_quaternion([-2.0, 0.0, 0.0, 0.0])
    assert np.array_equal(q, [1.0, 0.0, 0.0, 0.0])
    q = canonical_quaternion([0.0, -1.0, 1.0, 0.0])
    assert q[1] > 0 and abs(np.linalg.norm(q) - 1) < 1e-12
    with pytest.raises(ValueError):
        canonical_quaternion([0, 0, 0, 0])


@given(unit_quats)
def test_matrix_quaternion_round_trip(q):
    q = canonical_quaternion(q)
    R = quat_to_matrix(q)
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert abs(np.linalg.det(R) - 1) < 1e-12
    assert np.allclose(quat_to_matrix(matrix_to_quat(R)), R, atol=1e-12)


def test_pose_invariants(rng):
    p = random_pose(rng)
    assert abs(np.linalg.norm(p.rotation) - 1) < 1e-9 and p.rotation[0] >= 0


def test_compose_identity_and_inverse(rng):
    p = random_pose(rng)
    assert pose_compose(CameraPose.identity(), p) == p or np.allclose(
        pose_compose(CameraPose.identity(), p).matrix(), p.matrix(), atol=0)
    e = pose_compose(p, p.inverse())
    assert np.allclose(e.matrix(), np.eye(4), atol=1e-12)


def test_compose_matches_matrix_product():
    a = CameraPose(rz(90), (1, 0, 0))
    b = CameraPose(rz(90), (0, 0, 0))
    c = pose_compose(a, b)
    assert np.allclose(c.matrix(), a.matrix() @ b.matrix(), atol=1e-12)
    assert np.allclose(c.rotation, rz(180), atol=1e-12)
    assert np.allclose(c.translation, (1, 0, 0), atol=1e-12)
    assert c.rotation[0] >= 0


def test_compose_applies_right_operand_first(rng):
    a, b = random_pose(rng), random_pose(rng)
    x = rng.normal(size=3)
    assert np.allclose((a @ b).camera_to_world(x), a.camera_to_world(b.camera_to_world(x)), atol=1e-12)


@settings(max_examples=50)
@given(st.integers(0, 2**31 - 1))
def test_compose_is_associative(seed):
    r = np.random.default_rng(seed)
    a, b, c = (random_pose(r) for _ in range(3))
    assert np.allclose(((a @ b) @ c).matrix(), (a @ (b @ c)).matrix(), atol=1e-12)


def test_project_point_examples(K640):
    assert project_point((0, 0, 2), CameraPose(), K640) == (320.0, 240.0, 2.0)
    u, v, z = project_point((0.1, 0, 1), CameraPose(), K640)
    assert (u, v, z) == pytest.approx((370.0, 240.0, 1.0), abs=1e-12)
    with pytest.raises(BehindCamera):
        project_point((0, 0, -1), CameraPose(), K640)
    with pytest.raises(BehindCamera):
        project_point((0, 0, 0.01), CameraPose(), K640)


@given(vec3)
def test_project_then_back_project(p):
    K = PinholeIntrinsics(500.0, 480.0, 320.0, 240.0, 640, 480)
    pose = CameraPose(rz(30), (0.5, -0.2, -6.0))
    pc = pose.world_to_camera(np.asarray(p, dtype=float))
    if pc[2] <= 0.011:
        return
    u, v, z = project_point(p, pose, K)
    assert np.allclose(back_project(u, v, z, K), pc, atol=1e-10)


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        PinholeIntrinsics(0, 1, 1, 1, 4, 4)
    with pytest.raises(ValueError):
        PinholeIntrinsics(1, 1, 5, 1, 4, 4)


def test_scaled_intrinsics_keep_pixel_centers():
    K = PinholeIntrinsics(200.0, 200.0, 159.5, 119.5, 320, 240)
    Ks = K.scaled(0.25)
    assert (Ks.width, Ks.height) == (80, 60)
    assert Ks.cx == pytest.approx(39.5) and Ks.cy == pytest.approx(29.5)


def test_umeyama_self_alignment(rng):
    pts = rng.normal(size=(20, 3))
    S = umeyama_align(pts, pts)
    assert S.scale == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(S.apply(pts), pts, atol=1e-12)


@pytest.mark.parametrize("n", [3, 30])
def test_umeyama_recovers_constructed_sim3(rng, n):
    truth = Sim3Transform(2.0, rz(90), (1.0, 2.0, 3.0))
    src = rng.normal(size=(n, 3))
    S = umeyama_align(src, truth.apply(src))
    assert abs(S.scale - 2.0) < 1e-9
    assert np.allclose(S.R, truth.R, atol=1e-9)
    assert np.allclose(S.translation, (1, 2, 3), atol=1e-9)


def test_umeyama_rigid_fixes_scale(rng):
    src = rng.normal(size=(10, 3))
    S = umeyama_align(src, 3.0 * src, with_scale=False)
    assert S.scale == 1.0


def test_umeyama_degenerate_inputs():
    with pytest.raises(DegenerateConfiguration):
        umeyama_align(np.zeros((2, 3)), np.zeros((2, 3)))
    line = np.outer(np.arange(5.0), (1, 2, 3))
    with pytest.raises(DegenerateConfiguration):
        umeyama_align(line, line)
    with pytest.raises(ValueError):
        umeyama_align(np.zeros((4, 3)), np.zeros((5, 3)))


def test_umeyama_is_locally_optimal(rng):
    src = rng.normal(size=(30, 3))
    dst = Sim3Transform(1.3, rz(40), (0.2, 0.1, -1)).apply(src) + 0.05 * rng.normal(size=(30, 3))
    S = umeyama_align(src, dst)
    best = np.mean(np.sum((S.apply(src) - dst) ** 2, axis=1))
    for _ in range(100):
        dq = S.rotation + 0.01 * rng.normal(size=4)
        P = Sim3Transform(S.scale * np.exp(0.01 * rng.normal()), dq, S.translation + 0.01 * rng.normal(size=3))
        assert np.mean(np.sum((P.apply(src) - dst) ** 2, axis=1)) >= best - 1e-12


def test_rotation_angle():
    assert rotation_angle(quat_to_matrix(rz(30))) == pytest.approx(np.radians(30), abs=1e-12)
    assert rotation_angle(quat_to_matrix(rz(180))) == pytest.approx(np.pi, abs=1e-12)


def test_yaw_pitch_pose_looks_along_heading():
    p = yaw_pitch_pose((1, 2, 1.2), np.pi / 2)
    assert np.allclose(p.R[:, 2], (0, 1, 0), atol=1e-12)   # forward
    assert np.allclose(p.R[:, 1], (0, 0, -1), atol=1e-12)  # camera y points down
    assert np.allclose(p.center, (1, 2, 1.2))
