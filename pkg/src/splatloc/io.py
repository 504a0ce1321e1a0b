"""Dataset and trajectory files.

Layout of a posed RGB-D sequence directory::

    images/000000.png     8-bit color
    depths/000000.png     16-bit depth in millimeters, 0 = invalid
    trajectory.txt        timestamp tx ty tz qx qy qz qw  (world-from-camera)
    intrinsics.txt        fx fy cx cy width height

Trajectory lines follow the TUM layout so external tools can read them; the
pose convention is world-from-camera, i.e. ``t`` is the camera center.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .geometry import CameraPose, PinholeIntrinsics
from .optimize import TrainView

DEPTH_SCALE = 1000.0  # PNG units per meter


class DatasetError(ValueError):
    """Validation failure; ``issues`` lists every problem found."""

    def __init__(self, issues: list[str]):
        super().__init__("; ".join(issues))
        self.issues = list(issues)


# -- images ------------------------------------------------------------------------

def write_color(path, image: np.ndarray) -> None:
    img8 = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if img8.ndim == 3:
        img8 = img8[..., ::-1]
    if not cv2.imwrite(str(path), img8):
        raise OSError(f"could not write {path}")


def read_color(path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise OSError(f"could not decode image {path}")
    return img[..., ::-1].astype(np.float64) / 255.0


def write_depth(path, depth: np.ndarray) -> None:
    mm = np.clip(np.rint(np.asarray(depth) * DEPTH_SCALE), 0, 65535).astype(np.uint16)
    if not cv2.imwrite(str(path), mm):
        raise OSError(f"could not write {path}")


def read_depth(path) -> np.ndarray:
    d = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if d is None or d.dtype != np.uint16 or d.ndim != 2:
        raise OSError(f"could not decode 16-bit depth image {path}")
    return d.astype(np.float64) / DEPTH_SCALE


def write_gray(path, image: np.ndarray) -> None:
    write_color(path, np.asarray(image, dtype=np.float64).reshape(np.shape(image)[:2]))


# -- text formats ------------------------------------------------------------------

def pose_to_tum(timestamp: float, pose: CameraPose) -> str:
    w, x, y, z = pose.rotation
    t = pose.translation
    return " ".join(repr(float(v)) for v in (timestamp, t[0], t[1], t[2], x, y, z, w))


def write_trajectory(path, entries) -> None:
    lines = ["# timestamp tx ty tz qx qy qz qw (world-from-camera)"]
    lines += [pose_to_tum(ts, pose) for ts, pose in entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def parse_trajectory(text: str, source: str = "<trajectory>") -> list[tuple[float, CameraPose]]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 8:
            raise DatasetError([f"{source}:{lineno}: expected 8 fields, found {len(parts)}"])
        try:
            ts, tx, ty, tz, qx, qy, qz, qw = map(float, parts)
            pose = CameraPose(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz]))
        except ValueError as exc:
            raise DatasetError([f"{source}:{lineno}: {exc}"]) from None
        out.append((ts, pose))
    return out


def read_trajectory(path) -> list[tuple[float, CameraPose]]:
    return parse_trajectory(Path(path).read_text(encoding="utf-8"), str(path))


def write_intrinsics(path, K: PinholeIntrinsics) -> None:
    Path(path).write_text(f"# fx fy cx cy width height\n{K.fx!r} {K.fy!r} {K.cx!r} {K.cy!r} "
                          f"{K.width} {K.height}\n", encoding="utf-8")


def read_intrinsics(path) -> PinholeIntrinsics:
    rows = [ln.split("#", 1)[0].split() for ln in Path(path).read_text(encoding="utf-8").splitlines()]
    rows = [r for r in rows if r]
    if len(rows) != 1 or len(rows[0]) != 6:
        raise DatasetError([f"{path}: expected one line 'fx fy cx cy width height'"])
    fx, fy, cx, cy, w, h = rows[0]
    try:
        return PinholeIntrinsics(float(fx), float(fy), float(cx), float(cy), int(w), int(h))
    except ValueError as exc:
        raise DatasetError([f"{path}: {exc}"]) from None


# -- sequences ---------------------------------------------------------------------

@dataclass
class Sequence:
    """A validated posed RGB-D directory; images are loaded lazily."""

    root: Path
    intrinsics: PinholeIntrinsics
    entries: list[tuple[float, CameraPose]]
    image_files: list[Path]
    depth_files: list[Path] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def open(cls, root, require_depth: bool = False) -> Sequence:
        """Structural validation only; image contents are decoded on access."""
        return ingest_dataset(root, require_depth=require_depth, check_images=False)

    def query_id(self, i: int) -> str:
        return self.image_files[i].stem

    @property
    def poses(self) -> list[CameraPose]:
        return [p for _, p in self.entries]

    def image(self, i: int) -> np.ndarray:
        return read_color(self.image_files[i])

    def depth(self, i: int) -> np.ndarray:
        if not self.depth_files:
            return np.zeros((self.intrinsics.height, self.intrinsics.width))
        return read_depth(self.depth_files[i])

    def view(self, i: int) -> TrainView:
        return TrainView(self.image(i), self.depth(i), self.entries[i][1], self.intrinsics,
                         name=self.image_files[i].stem)

    def views(self) -> list[TrainView]:
        return [self.view(i) for i in range(len(self))]


def write_sequence(root, views: list[TrainView], timestamps=None) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "depths").mkdir(parents=True, exist_ok=True)
    if timestamps is None:
        timestamps = [float(i) for i in range(len(views))]
    for i, v in enumerate(views):
        write_color(root / "images" / f"{i:06d}.png", v.image)
        write_depth(root / "depths" / f"{i:06d}.png", v.depth)
    write_trajectory(root / "trajectory.txt", [(ts, v.pose) for ts, v in zip(timestamps, views)])
    if views:
        write_intrinsics(root / "intrinsics.txt", views[0].intrinsics)


def ingest_dataset(root, require_depth: bool = True, check_images: bool = True) -> Sequence:
    """Validate a sequence directory and return a handle to it.

    Every problem is collected before raising, so a single :class:`DatasetError`
    itemizes missing files, count mismatches, unparsable poses and undecodable or
    wrongly sized images.
    """
    root = Path(root)
    issues: list[str] = []
    if not root.is_dir():
        raise DatasetError([f"{root}: not a directory"])
    K = entries = None
    try:
        K = read_intrinsics(root / "intrinsics.txt")
    except FileNotFoundError:
        issues.append(f"{root / 'intrinsics.txt'}: missing")
    except DatasetError as exc:
        issues += exc.issues
    try:
        entries = read_trajectory(root / "trajectory.txt")
    except FileNotFoundError:
        issues.append(f"{root / 'trajectory.txt'}: missing")
    except DatasetError as exc:
        issues += exc.issues
    images = sorted((root / "images").glob("*.png"))
    depths = sorted((root / "depths").glob("*.png"))
    if not images:
        issues.append(f"{root / 'images'}: no PNG images")
    if entries is not None and len(entries) != len(images):
        issues.append(f"{root}: trajectory has {len(entries)} poses but there are {len(images)} images")
    if require_depth and len(depths) != len(images):
        issues.append(f"{root}: {len(images)} images but {len(depths)} depth images")
    if check_images and K is not None:
        for f in images:
            img = cv2.imread(str(f), cv2.IMREAD_COLOR)
            if img is None:
                issues.append(f"{f}: corrupted or unreadable PNG")
            elif img.shape[:2] != (K.height, K.width):
                issues.append(f"{f}: size {img.shape[1]}x{img.shape[0]} does not match intrinsics")
        for f in depths if require_depth else []:
            d = cv2.imread(str(f), cv2.IMREAD_UNCHANGED)
            if d is None:
                issues.append(f"{f}: corrupted or unreadable PNG")
            elif d.dtype != np.uint16 or d.shape != (K.height, K.width):
                issues.append(f"{f}: expected {K.width}x{K.height} 16-bit depth")
    if issues:
        raise DatasetError(issues)
    return Sequence(root, K, entries, images, depths if require_depth else [])
