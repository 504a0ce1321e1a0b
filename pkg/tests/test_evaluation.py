from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splatloc.evaluation import (ThresholdSpec, compute_ate, compute_psnr, format_recall_row, pose_error,
                                 recall_table)
from splatloc.geometry import CameraPose, DegenerateConfiguration, Sim3Transform

from conftest import random_pose, rz

HAND_COUNT = [(0.4, 0.01), (2, 0.04), (4, 0.2), (20, 2)]


def test_pose_error_examples(rng):
    p = random_pose(rng)
    assert pose_error(p, p) == pytest.approx((0.0, 0.0), abs=1e-6)
    a = CameraPose(rz(0), (0, 0, 0))
    b = CameraPose(rz(5), (0.5, 0, 0))
    rot, trans = pose_error(a, b)
    assert rot == pytest.approx(5.0, abs=1e-12) and trans == pytest.approx(0.5, abs=1e-15)
    flip = CameraPose(rz(180), (0, 0, 0))
    assert pose_error(a, flip) == pytest.approx((180.0, 0.0), abs=1e-12)


def hand_count(errors, pairs):
    """Independent counting oracle: rotation AND translation within each pair."""
    return [100.0 * sum(e is not None and e[0] <= d and e[1] <= m for e in errors) / len(errors) for d, m in pairs]


def test_recall_hand_count():
    # (2 deg, 0.04 m) misses 1.5 deg / 0.05 m on rotation, so the second column is 25 rather than 50
    assert recall_table(HAND_COUNT) == [25.0, 25.0, 50.0, 75.0, 75.0]
    assert recall_table(HAND_COUNT) == hand_count(HAND_COUNT, ThresholdSpec().pairs)
    assert recall_table([(0.0, 0.0)] * 7) == [100.0] * 5


def test_recall_counts_failures_and_is_inclusive():
    assert recall_table([(0.5, 0.02), None]) == [50.0] * 5
    assert recall_table([None, None]) == [0.0] * 5
    with pytest.raises(ValueError):
        recall_table([])


def test_recall_row_formatting():
    assert format_recall_row([40.9, 77.5, 85.7, 90.4, 92.4]) == "40.9 77.5 85.7 90.4 92.4"
    assert format_recall_row(recall_table(HAND_COUNT)) == "25.0 25.0 50.0 75.0 75.0"


def random_error_list(rng):
    n = int(rng.integers(1, 60))
    out = []
    for _ in range(n):
        out.append(None if rng.uniform() < 0.2 else (float(rng.exponential(5)), float(rng.exponential(0.5))))
    return out


def test_recall_monotone_over_random_lists():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        row = recall_table(random_error_list(rng))
        assert all(0.0 <= v <= 100.0 for v in row)
        assert all(b >= a for a, b in zip(row, row[1:]))


def test_threshold_spec_validation():
    assert ThresholdSpec().labels()[0] == "0.5deg/0.02m"
    with pytest.raises(ValueError):
        ThresholdSpec(((1, 0.1), (1, 0.2)))
    with pytest.raises(ValueError):
        ThresholdSpec(())


def test_ate_self_is_zero(rng):
    traj = [random_pose(rng) for _ in range(10)]
    res = compute_ate(traj, traj)
    assert res.rmse == pytest.approx(0, abs=1e-12) and res.max == pytest.approx(0, abs=1e-12)


def test_ate_noise_matches_monte_carlo_oracle():
    rng = np.random.default_rng(42)
    n, sigma = 200, 0.1
    ref = np.cumsum(rng.normal(scale=0.5, size=(n, 3)), axis=0)
    noisy = ref + rng.normal(scale=sigma, size=(n, 3))
    # oracle: the same noise model sampled independently, aligned the same way
    oracle = []
    for _ in range(200):
        other = ref + rng.normal(scale=sigma, size=(n, 3))
        oracle.append(compute_ate(other, ref).rmse)
    expect = float(np.mean(oracle))
    assert compute_ate(noisy, ref).rmse == pytest.approx(expect, rel=0.15)
    assert expect == pytest.approx(sigma * np.sqrt(3), rel=0.15)


@settings(max_examples=30)
@given(st.integers(0, 2**31 - 1), st.floats(0.2, 5.0))
def test_ate_invariant_to_similarity_of_both(seed, scale):
    r = np.random.default_rng(seed)
    ref = r.normal(size=(15, 3)) * 3
    est = ref + 0.05 * r.normal(size=(15, 3))
    T = Sim3Transform(scale, r.normal(size=4), r.normal(size=3))
    a = compute_ate(est, ref)
    b = compute_ate(T.apply(est), T.apply(ref))
    assert b.rmse == pytest.approx(scale * a.rmse, rel=1e-6, abs=1e-12)
    rigid = Sim3Transform(1.0, r.normal(size=4), r.normal(size=3))
    c = compute_ate(rigid.apply(est), rigid.apply(ref))
    assert c.rmse == pytest.approx(a.rmse, rel=1e-6, abs=1e-12)


def test_ate_recovers_scaled_trajectory():
    rng = np.random.default_rng(1)
    ref = rng.normal(size=(20, 3))
    est = Sim3Transform(0.5, rz(30), (1, 1, 0)).apply(ref)
    assert compute_ate(est, ref).rmse < 1e-12
    assert compute_ate(est, ref, with_scale=False).rmse > 0.1


def test_ate_errors():
    with pytest.raises(ValueError):
        compute_ate(np.zeros((3, 3)), np.zeros((4, 3)))
    with pytest.raises(DegenerateConfiguration):
        compute_ate(np.zeros((2, 3)), np.zeros((2, 3)))


def test_psnr_examples():
    a = np.random.default_rng(0).uniform(0.1, 0.9, (8, 8, 3))
    assert compute_psnr(a, a) == float("inf")
    assert compute_psnr(a, a + 10 / 255) == pytest.approx(20 * np.log10(25.5), abs=1e-9)
    assert compute_psnr(a, a + 10 / 255) == pytest.approx(28.13, abs=0.005)
    with pytest.raises(ValueError):
        compute_psnr(a, a[:4])


@given(st.integers(0, 2**31 - 1))
def test_psnr_symmetric(seed):
    r = np.random.default_rng(seed)
    a, b = r.uniform(size=(5, 5, 3)), r.uniform(size=(5, 5, 3))
    assert compute_psnr(a, b) == compute_psnr(b, a)
