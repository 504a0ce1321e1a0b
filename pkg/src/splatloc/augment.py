"""Reference-set augmentation: perturbed poses around keyframes rendered from the map."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .gaussians import GaussianMap
from .geometry import CameraPose, PinholeIntrinsics, quat_from_axis_angle, quat_multiply
from .io import (DatasetError, read_color, read_depth, read_intrinsics, write_color, write_depth,
                 write_intrinsics)
from .optimize import TrainView
from .render import RenderConfig, render

log = logging.getLogger(__name__)

KEYFRAME = "keyframe"
RENDERED = "rendered"
RENDER_DEPTH_MIN_ALPHA = 0.5  # rendered depth is marked invalid below this coverage


@dataclass(frozen=True)
class SamplingConfig:
    samples_per_keyframe: int = 25
    longitudinal_range: float = 0.5
    lateral_range: float = 2.0
    yaw_range: float = 180.0  # degrees
    vertical_range: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.samples_per_keyframe < 0:
            raise ValueError("samples_per_keyframe must be >= 0")
        for name in ("longitudinal_range", "lateral_range", "yaw_range", "vertical_range"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass(eq=False)
class ReferenceView:
    image: np.ndarray
    pose: CameraPose
    intrinsics: PinholeIntrinsics
    provenance: str = KEYFRAME
    source_keyframe_index: int | None = None
    alpha_coverage: float = 1.0
    depth: np.ndarray | None = None
    name: str = ""
    features: dict = field(default_factory=dict, repr=False)  # per-localizer caches

    def __post_init__(self):
        if self.provenance not in (KEYFRAME, RENDERED):
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.provenance == RENDERED and self.source_keyframe_index is None:
            raise ValueError("rendered views need a source keyframe index")
        if not 0.0 <= self.alpha_coverage <= 1.0:
            raise ValueError("alpha_coverage must lie in [0, 1]")


class ReferenceSet(list):
    """List of :class:`ReferenceView` that also remembers how many renders were dropped."""

    def __init__(self, views=(), dropped: int = 0):
        super().__init__(views)
        self.dropped = dropped

    @property
    def keyframes(self) -> list[ReferenceView]:
        return [v for v in self if v.provenance == KEYFRAME]


def sample_poses(keyframe: CameraPose, cfg: SamplingConfig, keyframe_index: int = 0) -> list[CameraPose]:
    """Uniform offsets in the keyframe frame: along its forward and right axes, vertically
    along its up axis, plus a yaw about that up axis.

    The stream is seeded by ``(cfg.seed, keyframe_index)`` so each keyframe gets its own
    reproducible batch regardless of processing order.
    """
    rng = np.random.default_rng([cfg.seed, keyframe_index])
    n = cfg.samples_per_keyframe
    lon = rng.uniform(-cfg.longitudinal_range, cfg.longitudinal_range, n)
    lat = rng.uniform(-cfg.lateral_range, cfg.lateral_range, n)
    ver = rng.uniform(-cfg.vertical_range, cfg.vertical_range, n)
    yaw = np.deg2rad(rng.uniform(-cfg.yaw_range, cfg.yaw_range, n))
    R = keyframe.R
    right, up, forward = R[:, 0], -R[:, 1], R[:, 2]
    out = []
    for i in range(n):
        t = keyframe.translation + lon[i] * forward + lat[i] * right + ver[i] * up
        # the camera up axis is -y; rotating about it by +yaw turns the view left
        q = quat_multiply(keyframe.rotation, quat_from_axis_angle((0.0, -1.0, 0.0), yaw[i]))
        out.append(CameraPose(q, t))
    return out


def pose_offsets(keyframe: CameraPose, pose: CameraPose) -> tuple[float, float, float, float]:
    """``(longitudinal, lateral, vertical, yaw_degrees)`` of ``pose`` relative to ``keyframe``."""
    R = keyframe.R
    d = pose.translation - keyframe.translation
    rel = R.T @ pose.R
    yaw = np.degrees(np.arctan2(-rel[0, 2], rel[0, 0]))
    return float(d @ R[:, 2]), float(d @ R[:, 0]), float(-(d @ R[:, 1])), float(yaw)


def generate_reference_set(gmap: GaussianMap, keyframes: list[TrainView], cfg: SamplingConfig,
                           render_cfg: RenderConfig | None = None, min_coverage: float = 0.2,
                           threads: int | None = None) -> ReferenceSet:
    """All keyframes plus renders at sampled poses whose alpha coverage reaches ``min_coverage``."""
    if not 0.0 <= min_coverage <= 1.0:
        raise ValueError("min_coverage must lie in [0, 1]")
    refs = ReferenceSet()
    for k, kf in enumerate(keyframes):
        refs.append(ReferenceView(kf.image, kf.pose, kf.intrinsics, KEYFRAME, k, 1.0, kf.depth,
                                  name=kf.name or f"kf{k:06d}"))
    for k, kf in enumerate(keyframes):
        for j, pose in enumerate(sample_poses(kf.pose, cfg, k)):
            frame = render(gmap, pose, kf.intrinsics, render_cfg, threads)
            coverage = float(frame.alpha.mean())
            if coverage < min_coverage:
                refs.dropped += 1
                continue
            depth = np.where(frame.alpha >= RENDER_DEPTH_MIN_ALPHA, frame.depth, 0.0)
            refs.append(ReferenceView(np.clip(frame.color, 0.0, 1.0), pose, kf.intrinsics, RENDERED, k,
                                      min(max(coverage, 0.0), 1.0), depth, name=f"r{k:06d}_{j:02d}"))
    if refs.dropped:
        log.info("dropped %d rendered views below coverage %.2f", refs.dropped, min_coverage)
    return refs


# -- on-disk layout ----------------------------------------------------------------

MANIFEST = "manifest.txt"


def write_reference_set(root, refs: list[ReferenceView]) -> None:
    """``images/``, ``depths/``, ``intrinsics.txt`` and a manifest with one line per view:
    ``index timestamp tx ty tz qx qy qz qw provenance source_kf alpha_coverage``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "depths").mkdir(parents=True, exist_ok=True)
    lines = ["# index timestamp tx ty tz qx qy qz qw provenance source_kf alpha_coverage"]
    for i, v in enumerate(refs):
        write_color(root / "images" / f"{i:06d}.png", v.image)
        depth = v.depth if v.depth is not None else np.zeros(v.image.shape[:2])
        write_depth(root / "depths" / f"{i:06d}.png", depth)
        w, x, y, z = v.pose.rotation
        t = v.pose.translation
        src = -1 if v.source_keyframe_index is None else v.source_keyframe_index
        nums = " ".join(repr(float(a)) for a in (i, t[0], t[1], t[2], x, y, z, w))
        lines.append(f"{i} {nums} {v.provenance} {src} {v.alpha_coverage!r}")
    (root / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
    if refs:
        write_intrinsics(root / "intrinsics.txt", refs[0].intrinsics)


def read_reference_set(root) -> ReferenceSet:
    root = Path(root)
    path = root / MANIFEST
    if not path.exists():
        raise DatasetError([f"{path}: missing"])
    K = read_intrinsics(root / "intrinsics.txt")
    refs = ReferenceSet()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 12:
            raise DatasetError([f"{path}:{lineno}: expected 12 fields, found {len(parts)}"])
        i = int(parts[0])
        _, tx, ty, tz, qx, qy, qz, qw = map(float, parts[1:9])
        src = int(parts[10])
        pose = CameraPose(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz]))
        refs.append(ReferenceView(read_color(root / "images" / f"{i:06d}.png"), pose, K, parts[9],
                                  None if src < 0 else src, float(parts[11]),
                                  read_depth(root / "depths" / f"{i:06d}.png"), name=f"{i:06d}"))
    return refs
