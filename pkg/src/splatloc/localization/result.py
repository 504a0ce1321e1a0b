"""Localization outcome shared by both back-ends, plus the results.csv format."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..geometry import CameraPose

SUCCESS = "success"
RETRIEVAL_FAILED = "retrieval_failed"
INSUFFICIENT_MATCHES = "insufficient_matches"
RANSAC_FAILED = "ransac_failed"
STATUSES = (SUCCESS, RETRIEVAL_FAILED, INSUFFICIENT_MATCHES, RANSAC_FAILED)

RESULTS_HEADER = "query_id,status,tx,ty,tz,qw,qx,qy,qz,inliers,elapsed_ms"


@dataclass(frozen=True, eq=False)
class LocalizationResult:
    status: str
    pose: CameraPose | None = None
    inlier_count: int = 0
    num_3d_points: int = 0
    elapsed_ms: float = 0.0
    method: str = ""

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ValueError(f"unknown status {self.status!r}")
        if self.status == SUCCESS and self.pose is None:
            raise ValueError("a successful result needs a pose")

    @property
    def ok(self) -> bool:
        return self.status == SUCCESS


def write_results_csv(path, rows) -> None:
    """``rows`` are ``(query_id, LocalizationResult)``; failed queries get empty pose fields."""
    lines = [RESULTS_HEADER]
    for qid, r in rows:
        if r.pose is not None:
            t = r.pose.translation
            q = r.pose.rotation
            pose = ",".join(f"{v:.9f}" for v in (*t, *q))
        else:
            pose = ",,,,,,"
        lines.append(f"{qid},{r.status},{pose},{r.inlier_count},{r.elapsed_ms:.1f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_results_csv(path) -> list[tuple[str, LocalizationResult]]:
    out = []
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != RESULTS_HEADER:
        raise ValueError(f"{path}: unexpected header")
    for line in lines[1:]:
        if not line.strip():
            continue
        f = line.split(",")
        pose = None
        if f[2]:
            tx, ty, tz, qw, qx, qy, qz = map(float, f[2:9])
            pose = CameraPose(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz]))
        out.append((f[0], LocalizationResult(f[1], pose, int(f[9]), 0, float(f[10]))))
    return out
