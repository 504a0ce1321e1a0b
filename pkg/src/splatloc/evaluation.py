"""Pose errors, threshold recall, trajectory error and image fidelity."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraPose, Sim3Transform, rotation_angle, umeyama_align

DEFAULT_THRESHOLDS = ((0.5, 0.02), (1.5, 0.05), (3.0, 0.1), (5.0, 0.5), (10.0, 1.0))


def pose_error(estimate: CameraPose, reference: CameraPose) -> tuple[float, float]:
    """``(rotation degrees in [0, 180], distance between camera centers in meters)``."""
    rel = estimate.R.T @ reference.R
    rot = float(np.degrees(rotation_angle(rel)))
    return min(max(rot, 0.0), 180.0), float(np.linalg.norm(estimate.center - reference.center))


@dataclass(frozen=True)
class ThresholdSpec:
    pairs: tuple[tuple[float, float], ...] = DEFAULT_THRESHOLDS

    def __post_init__(self):
        pairs = tuple((float(d), float(m)) for d, m in self.pairs)
        if not pairs:
            raise ValueError("need at least one threshold")
        for (d0, m0), (d1, m1) in zip(pairs, pairs[1:]):
            if not (d1 > d0 and m1 > m0):
                raise ValueError("thresholds must increase strictly in both components")
        object.__setattr__(self, "pairs", pairs)

    def labels(self) -> list[str]:
        return [f"{d:g}deg/{m:g}m" for d, m in self.pairs]


def recall_table(errors, spec: ThresholdSpec | None = None) -> list[float]:
    """Percentage of all queries within each (degrees, meters) pair, inclusive.

    ``errors`` holds ``(deg, m)`` tuples, with ``None`` for failed queries; failures
    stay in the denominator.
    """
    spec = spec or ThresholdSpec()
    errors = list(errors)
    if not errors:
        raise ValueError("recall over an empty query list is undefined")
    ok = np.array([e for e in errors if e is not None], dtype=np.float64).reshape(-1, 2)
    n = len(errors)
    return [100.0 * float(np.count_nonzero((ok[:, 0] <= d) & (ok[:, 1] <= m))) / n for d, m in spec.pairs]


def format_recall_row(row) -> str:
    return " ".join(f"{v:.1f}" for v in row)


@dataclass(frozen=True, eq=False)
class AteResult:
    rmse: float
    max: float
    residuals: np.ndarray
    alignment: Sim3Transform


def compute_ate(estimated, reference, with_scale: bool = True) -> AteResult:
    """Align ``estimated`` camera centers onto ``reference`` and summarize the residuals.

    Both inputs are sequences of poses or of 3-vectors in corresponding order.
    """
    est = _centers(estimated)
    ref = _centers(reference)
    if est.shape != ref.shape:
        raise ValueError(f"trajectory lengths differ: {len(est)} vs {len(ref)}")
    S = umeyama_align(est, ref, with_scale=with_scale)
    res = np.linalg.norm(S.apply(est) - ref, axis=1)
    return AteResult(float(np.sqrt(np.mean(res ** 2))), float(res.max()), res, S)


def _centers(traj) -> np.ndarray:
    items = list(traj)
    if items and isinstance(items[0], CameraPose):
        return np.array([p.center for p in items])
    if items and isinstance(items[0], tuple) and isinstance(items[0][1], CameraPose):
        return np.array([p.center for _, p in items])
    return np.asarray(items, dtype=np.float64).reshape(-1, 3)


def compute_psnr(a: np.ndarray, b: np.ndarray) -> float:
    """``10 log10(1 / MSE)`` for images in [0, 1]; identical images give ``inf``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image shapes differ")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


@dataclass(eq=False)
class MethodResult:
    """Localization outcome of one method: per-query errors (``None`` = failed)."""

    name: str
    errors: list
    statuses: list[str] = field(default_factory=list)

    def recall(self, spec: ThresholdSpec) -> list[float]:
        return recall_table(self.errors, spec)


@dataclass(eq=False)
class EvalReport:
    thresholds: ThresholdSpec = field(default_factory=ThresholdSpec)
    methods: list[MethodResult] = field(default_factory=list)
    ate: dict[str, tuple[float, float]] = field(default_factory=dict)    # name -> (rmse, max)
    psnr: dict[str, float] = field(default_factory=dict)                 # config -> dB

    def recall_rows(self) -> list[tuple[str, list[float]]]:
        return [(m.name, m.recall(self.thresholds)) for m in self.methods if m.errors]
