"""Gaussian scene map: primitives, covariances, pruning and PLY serialization."""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import canonical_quaternion, quat_to_matrix, quats_to_matrices

FORMAT_VERSION = 1
MIN_SCALE = 1e-6
MAX_SCALE = 1e3
LOG_SCALE_BOUNDS = (float(np.log(MIN_SCALE)), float(np.log(MAX_SCALE)))

_PROPERTIES = (
    "x", "y", "z",
    "rot_w", "rot_x", "rot_y", "rot_z",
    "log_scale_x", "log_scale_y", "log_scale_z",
    "opacity_logit",
    "r", "g", "b",
)


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class VersionError(ValueError):
    pass


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True, eq=False)
class GaussianPrimitive:
    position: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    color: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64).reshape(3))
        object.__setattr__(self, "rotation", canonical_quaternion(self.rotation))
        object.__setattr__(self, "log_scale", np.asarray(self.log_scale, dtype=np.float64).reshape(3))
        object.__setattr__(self, "opacity_logit", float(self.opacity_logit))
        object.__setattr__(self, "color", np.asarray(self.color, dtype=np.float64).reshape(3))

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)


def covariance_3d(g: GaussianPrimitive) -> np.ndarray:
    """``R diag(s^2) R^T``, exactly symmetric."""
    M = quat_to_matrix(g.rotation) * np.exp(g.log_scale)
    cov = M @ M.T
    return 0.5 * (cov + cov.T)


def covariances_3d(rotations: np.ndarray, log_scales: np.ndarray) -> np.ndarray:
    q = rotations / np.linalg.norm(rotations, axis=1, keepdims=True)
    M = quats_to_matrices(q) * np.exp(log_scales)[:, None, :]
    cov = M @ np.swapaxes(M, 1, 2)
    return 0.5 * (cov + np.swapaxes(cov, 1, 2))


@dataclass(eq=False)
class GaussianMap:
    """Structure-of-arrays container; row ``i`` of every array is primitive ``i``."""

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        self.metadata = {str(k): str(v) for k, v in self.metadata.items()}

    @classmethod
    def empty(cls, background=(0.0, 0.0, 0.0), metadata: dict | None = None) -> GaussianMap:
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)),
                   np.asarray(background, dtype=np.float64), dict(metadata or {}))

    @classmethod
    def from_primitives(cls, prims, background=(0.0, 0.0, 0.0), metadata: dict | None = None) -> GaussianMap:
        prims = list(prims)
        if not prims:
            return cls.empty(background, metadata)
        return cls(
            np.stack([p.position for p in prims]),
            np.stack([p.rotation for p in prims]),
            np.stack([p.log_scale for p in prims]),
            np.array([p.opacity_logit for p in prims]),
            np.stack([p.color for p in prims]),
            np.asarray(background, dtype=np.float64),
            dict(metadata or {}),
        )

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(self.positions[i], self.rotations[i], self.log_scales[i],
                                 self.opacity_logits[i], self.colors[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def covariances(self) -> np.ndarray:
        return covariances_3d(self.rotations, self.log_scales)

    def subset(self, index) -> GaussianMap:
        return GaussianMap(self.positions[index].copy(), self.rotations[index].copy(),
                           self.log_scales[index].copy(), self.opacity_logits[index].copy(),
                           self.colors[index].copy(),
                           self.background.copy(), dict(self.metadata))

    def copy(self) -> GaussianMap:
        return self.subset(slice(None))

    def parameter_vector(self) -> np.ndarray:
        return np.concatenate([self.positions.ravel(), self.rotations.ravel(), self.log_scales.ravel(),
                               self.opacity_logits, self.colors.ravel(), self.background])

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        if len(self) == 0:
            return np.zeros(3), np.zeros(3)
        return self.positions.min(axis=0), self.positions.max(axis=0)

    def identical_to(self, other: GaussianMap) -> bool:
        return (np.array_equal(self.parameter_vector(), other.parameter_vector())
                and self.metadata == other.metadata)


def prune(gmap: GaussianMap, min_opacity: float) -> GaussianMap:
    """Drop primitives whose opacity is below ``min_opacity``; survivors keep their order."""
    if not 0.0 <= min_opacity < 1.0:
        raise ValueError("min_opacity must lie in [0, 1)")
    return gmap.subset(np.flatnonzero(gmap.opacities >= min_opacity))


# -- PLY ---------------------------------------------------------------------------

def _meta_token(value: str) -> str:
    if any(c in value for c in "\r\n") or value != value.strip() or " " in value:
        raise ValueError(f"metadata values must be single tokens without whitespace: {value!r}")
    return value


def to_ply_bytes(gmap: GaussianMap) -> bytes:
    lines = [
        "ply",
        "format binary_little_endian 1.0",
        f"comment splatloc_format {FORMAT_VERSION}",
        "comment background " + " ".join(repr(float(c)) for c in gmap.background),
    ]
    for key in sorted(gmap.metadata):
        lines.append(f"comment meta {_meta_token(key)} {_meta_token(gmap.metadata[key])}")
    lines.append(f"element vertex {len(gmap)}")
    lines += [f"property double {name}" for name in _PROPERTIES]
    lines.append("end_header")
    header = ("\n".join(lines) + "\n").encode("ascii")
    body = np.concatenate([
        gmap.positions, gmap.rotations, gmap.log_scales, gmap.opacity_logits[:, None], gmap.colors,
    ], axis=1).astype("<f8")
    return header + body.tobytes()


def from_ply_bytes(data: bytes) -> GaussianMap:
    stream = io.BytesIO(data)
    offset = 0

    def readline() -> str:
        nonlocal offset
        raw = stream.readline()
        if not raw.endswith(b"\n"):
            raise FormatError("unterminated header", offset)
        offset += len(raw)
        try:
            return raw.decode("ascii").rstrip("\n")
        except UnicodeDecodeError:
            raise FormatError("non-ascii header line", offset - len(raw)) from None

    if readline() != "ply":
        raise FormatError("missing 'ply' magic", 0)
    if readline() != "format binary_little_endian 1.0":
        raise FormatError("only binary_little_endian 1.0 is supported", offset)
    version = None
    background = None
    metadata: dict[str, str] = {}
    count = None
    props: list[str] = []
    while True:
        line_start = offset
        line = readline()
        parts = line.split()
        if line == "end_header":
            break
        if not parts:
            raise FormatError("empty header line", line_start)
        if parts[0] == "comment" and len(parts) >= 2:
            if parts[1] == "splatloc_format":
                version = int(parts[2])
                if version != FORMAT_VERSION:
                    raise VersionError(f"unsupported map format version {version}")
            elif parts[1] == "background":
                background = [float(v) for v in parts[2:5]]
            elif parts[1] == "meta" and len(parts) == 4:
                metadata[parts[2]] = parts[3]
        elif parts[0] == "element" and len(parts) == 3 and parts[1] == "vertex":
            count = int(parts[2])
        elif parts[0] == "property" and len(parts) == 3:
            if parts[1] != "double":
                raise FormatError(f"property {parts[2]} must be double", line_start)
            props.append(parts[2])
        else:
            raise FormatError(f"unexpected header line {line!r}", line_start)
    if version is None:
        raise VersionError("missing splatloc_format comment")
    if count is None or background is None or len(background) != 3:
        raise FormatError("header lacks vertex count or background", offset)
    if tuple(props) != _PROPERTIES:
        raise FormatError("unexpected vertex property layout", offset)

    stride = 8 * len(_PROPERTIES)
    body = data[offset:]
    if len(body) < count * stride:
        raise FormatError(f"truncated vertex data: expected {count * stride} bytes, found {len(body)}",
                          offset + (len(body) // stride) * stride)
    if len(body) > count * stride:
        raise FormatError("trailing bytes after vertex data", offset + count * stride)
    arr = np.frombuffer(body, dtype="<f8").reshape(count, len(_PROPERTIES)).astype(np.float64)
    return GaussianMap(arr[:, 0:3], arr[:, 3:7], arr[:, 7:10], arr[:, 10], arr[:, 11:14],
                       np.array(background), metadata)


def save_map(gmap: GaussianMap, path) -> None:
    Path(path).write_bytes(to_ply_bytes(gmap))


def load_map(path) -> GaussianMap:
    return from_ply_bytes(Path(path).read_bytes())


def map_summary(gmap: GaussianMap, bins: int = 10) -> str:
    lo, hi = gmap.bounding_box()
    lines = [f"count {len(gmap)}",
             "bbox_min " + " ".join(f"{v:.4f}" for v in lo),
             "bbox_max " + " ".join(f"{v:.4f}" for v in hi),
             "background " + " ".join(f"{v:.4f}" for v in gmap.background)]
    for k in sorted(gmap.metadata):
        lines.append(f"meta {k} {gmap.metadata[k]}")
    hist, edges = np.histogram(gmap.opacities, bins=bins, range=(0.0, 1.0))
    lines.append("opacity_histogram")
    for c, a, b in zip(hist, edges[:-1], edges[1:]):
        lines.append(f"  [{a:.1f}, {b:.1f}) {c}")
    return "\n".join(lines) + "\n"


__all__ = [
    "FORMAT_VERSION", "FormatError", "VersionError", "GaussianPrimitive", "GaussianMap",
    "covariance_3d", "covariances_3d", "prune", "save_map", "load_map", "to_ply_bytes",
    "from_ply_bytes", "map_summary", "sigmoid", "logit",
]
