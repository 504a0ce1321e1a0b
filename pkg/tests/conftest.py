from __future__ import annotations

import numpy as np
import pytest

from splatloc.gaussians import GaussianMap, logit
from splatloc.geometry import CameraPose, PinholeIntrinsics, quat_from_axis_angle


def random_pose(rng: np.random.Generator, spread: float = 2.0) -> CameraPose:
    q = rng.normal(size=4)
    return CameraPose(q / np.linalg.norm(q), rng.uniform(-spread, spread, 3))


def random_map(rng: np.random.Generator, n: int, center=(0.0, 0.0, 3.0), spread: float = 1.0,
               scale=(0.02, 0.15)) -> GaussianMap:
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q[q[:, 0] < 0] *= -1
    return GaussianMap(
        np.asarray(center) + rng.uniform(-spread, spread, (n, 3)),
        q,
        np.log(rng.uniform(*scale, (n, 3))),
        logit(rng.uniform(0.2, 0.95, n)),
        rng.uniform(0, 1, (n, 3)),
    )


def rz(deg: float) -> np.ndarray:
    return quat_from_axis_angle((0, 0, 1), np.radians(deg))


@pytest.fixture
def K640() -> PinholeIntrinsics:
    return PinholeIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)


@pytest.fixture
def K_small() -> PinholeIntrinsics:
    return PinholeIntrinsics(40.0, 40.0, 15.5, 11.5, 32, 24)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
