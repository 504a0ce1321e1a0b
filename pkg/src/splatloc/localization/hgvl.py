"""Hierarchical geometry-based localization: retrieve similar reference views, build a
local model by triangulating their matches from the known reference poses, then solve
the query pose from 2D-3D correspondences."""
from __future__ import annotations

import struct
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..geometry import CameraPose, PinholeIntrinsics
from .features import (DESC_BYTES, LocalFeatureSet, detect_and_describe, global_descriptor,
                       match_features, retrieve_topk)
from .pnp import RansacFailed, pnp_ransac
from .result import INSUFFICIENT_MATCHES, RANSAC_FAILED, RETRIEVAL_FAILED, SUCCESS, LocalizationResult
from .triangulation import triangulate_track

CACHE_MAGIC = b"SLFC"
CACHE_VERSION = 1
_HEADER = struct.Struct("<4sIII")  # magic, version, keypoint count, global descriptor length


@dataclass(frozen=True)
class HgvlConfig:
    top_k: int = 10
    max_features: int = 1500
    ratio: float = 0.8
    epipolar_px: float = 2.0
    min_angle: float = 1.0
    max_reproj: float = 2.0
    threshold_px: float = 3.0
    max_iters: int = 2000
    min_inliers: int = 12
    seed: int = 0


@dataclass(frozen=True, eq=False)
class ViewFeatures:
    global_desc: np.ndarray
    local: LocalFeatureSet


def extract(image: np.ndarray, cfg: HgvlConfig) -> ViewFeatures:
    return ViewFeatures(global_descriptor(image), detect_and_describe(image, cfg.max_features))


# -- feature cache files -----------------------------------------------------------

def save_features(path, feats: ViewFeatures) -> None:
    n = len(feats.local)
    parts = [
        _HEADER.pack(CACHE_MAGIC, CACHE_VERSION, n, len(feats.global_desc)),
        feats.global_desc.astype("<f8").tobytes(),
        feats.local.keypoints.astype("<f8").tobytes(),
        feats.local.scores.astype("<f8").tobytes(),
        feats.local.descriptors.astype(np.uint8).tobytes(),
    ]
    Path(path).write_bytes(b"".join(parts))


def load_features(path) -> ViewFeatures:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated feature cache")
    magic, version, n, gdim = _HEADER.unpack_from(data)
    if magic != CACHE_MAGIC:
        raise ValueError(f"{path}: not a feature cache")
    if version != CACHE_VERSION:
        raise ValueError(f"{path}: feature cache version {version}, expected {CACHE_VERSION}")
    expected = _HEADER.size + 8 * gdim + 8 * 2 * n + 8 * n + DESC_BYTES * n
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    off = _HEADER.size
    g = np.frombuffer(data, "<f8", gdim, off).astype(np.float64)
    off += 8 * gdim
    kp = np.frombuffer(data, "<f8", 2 * n, off).reshape(n, 2).astype(np.float64)
    off += 16 * n
    sc = np.frombuffer(data, "<f8", n, off).astype(np.float64)
    off += 8 * n
    desc = np.frombuffer(data, np.uint8, DESC_BYTES * n, off).reshape(n, DESC_BYTES).copy()
    return ViewFeatures(g, LocalFeatureSet(kp, sc, desc))


# -- reference database ------------------------------------------------------------

def _fundamental(pa: CameraPose, pb: CameraPose, K: PinholeIntrinsics) -> np.ndarray:
    """F with ``x_b^T F x_a = 0`` for pixel coordinates of views ``a`` and ``b``."""
    rel = pb.inverse() @ pa  # camera a -> camera b
    R, t = rel.R, rel.translation
    tx = np.array([[0, -t[2], t[1]], [t[2], 0, -t[0]], [-t[1], t[0], 0]])
    Kinv = np.linalg.inv(K.K)
    return Kinv.T @ tx @ R @ Kinv


def _epipolar_distance(F: np.ndarray, xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    ha = np.column_stack([xa, np.ones(len(xa))])
    hb = np.column_stack([xb, np.ones(len(xb))])
    la = ha @ F.T   # epipolar lines in b
    lb = hb @ F     # epipolar lines in a
    num = np.abs(np.sum(hb * la, axis=1))
    da = num / np.maximum(np.hypot(la[:, 0], la[:, 1]), 1e-12)
    db = num / np.maximum(np.hypot(lb[:, 0], lb[:, 1]), 1e-12)
    return np.maximum(da, db)


class ReferenceDatabase:
    """Reference views with their global descriptors and local features.

    Pairwise matches between reference views are cached, since neighbouring queries
    tend to retrieve the same views.
    """

    def __init__(self, poses, intrinsics, features, cfg: HgvlConfig | None = None, names=None):
        self.cfg = cfg or HgvlConfig()
        self.poses = list(poses)
        self.intrinsics = list(intrinsics)
        self.features = list(features)
        if not (len(self.poses) == len(self.intrinsics) == len(self.features)):
            raise ValueError("poses, intrinsics and features must align")
        self.names = list(names) if names is not None else [str(i) for i in range(len(self.poses))]
        self._pairs: dict[tuple[int, int], np.ndarray] = {}

    @classmethod
    def from_views(cls, refs, cfg: HgvlConfig | None = None) -> ReferenceDatabase:
        cfg = cfg or HgvlConfig()
        feats = []
        for r in refs:
            f = r.features.get("hgvl")
            if f is None:
                f = extract(r.image, cfg)
                r.features["hgvl"] = f
            feats.append(f)
        return cls([r.pose for r in refs], [r.intrinsics for r in refs], feats, cfg, [r.name for r in refs])

    def __len__(self) -> int:
        return len(self.poses)

    def pair_matches(self, i: int, j: int) -> np.ndarray:
        """Epipolar-consistent matches between reference views ``i < j``."""
        key = (i, j)
        m = self._pairs.get(key)
        if m is None:
            fa, fb = self.features[i].local, self.features[j].local
            m = match_features(fa, fb, self.cfg.ratio)
            if len(m) and self.intrinsics[i] == self.intrinsics[j]:
                F = _fundamental(self.poses[i], self.poses[j], self.intrinsics[i])
                d = _epipolar_distance(F, fa.keypoints[m[:, 0]], fb.keypoints[m[:, 1]])
                m = m[d <= self.cfg.epipolar_px]
            self._pairs[key] = m
        return m


class _UnionFind:
    def __init__(self):
        self.parent: dict = {}

    def find(self, x):
        root = self.parent.setdefault(x, x)
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra


def build_local_model(db: ReferenceDatabase, views: list[int]):
    """Triangulated tracks over ``views`` and a map from ``(view, keypoint)`` to track id."""
    uf = _UnionFind()
    views = sorted(views)
    for a in range(len(views)):
        for b in range(a + 1, len(views)):
            i, j = views[a], views[b]
            for ka, kb in db.pair_matches(i, j):
                uf.union((i, int(ka)), (j, int(kb)))
    groups: dict = {}
    for node in sorted(uf.parent):
        groups.setdefault(uf.find(node), []).append(node)
    candidate = []
    for nodes in groups.values():
        vs = [v for v, _ in nodes]
        if len(nodes) < 2 or len(set(vs)) != len(vs):
            continue  # singleton or inconsistent (two keypoints of one view)
        candidate.append(nodes)
    K = db.intrinsics[views[0]]
    node_track: dict = {}
    points = []
    for nodes in candidate:
        obs = [(v, db.features[v].local.keypoints[k]) for v, k in nodes]
        X = triangulate_track(obs, db.poses, K, db.cfg.min_angle, db.cfg.max_reproj)
        if X is None:
            continue
        for node in nodes:
            node_track[node] = len(points)
        points.append(X)
    return np.array(points).reshape(-1, 3), node_track


def localize_hgvl(query_image: np.ndarray, db: ReferenceDatabase, K: PinholeIntrinsics,
                  cfg: HgvlConfig | None = None) -> LocalizationResult:
    cfg = cfg or db.cfg
    t0 = time.perf_counter()

    def result(status, pose=None, inliers=0, npts=0):
        return LocalizationResult(status, pose, inliers, npts, 1e3 * (time.perf_counter() - t0), "hgvl")

    if len(db) == 0:
        return result(RETRIEVAL_FAILED)
    q = extract(query_image, cfg)
    retrieved = retrieve_topk(q.global_desc, [(f.global_desc, i) for i, f in enumerate(db.features)], cfg.top_k)
    if not retrieved:
        return result(RETRIEVAL_FAILED)
    if len(q.local) < cfg.min_inliers:
        return result(INSUFFICIENT_MATCHES)
    points, node_track = build_local_model(db, retrieved)
    votes: dict[int, dict[int, int]] = {}
    for v in retrieved:
        for qi, ki in match_features(q.local, db.features[v].local, cfg.ratio):
            tid = node_track.get((v, int(ki)))
            if tid is not None:
                d = votes.setdefault(int(qi), {})
                d[tid] = d.get(tid, 0) + 1
    # one track per query keypoint (most votes, then lowest id), one keypoint per track
    claims: dict[int, tuple[int, int]] = {}
    for qi in sorted(votes):
        tid, n = min(votes[qi].items(), key=lambda kv: (-kv[1], kv[0]))
        prev = claims.get(tid)
        if prev is None or n > prev[1]:
            claims[tid] = (qi, n)
    tids = sorted(claims)
    if len(tids) < cfg.min_inliers:
        return result(INSUFFICIENT_MATCHES, npts=len(points))
    X = points[tids]
    uv = q.local.keypoints[[claims[t][0] for t in tids]]
    try:
        sol = pnp_ransac(X, uv, K, cfg.threshold_px, cfg.max_iters, cfg.seed, min_inliers=cfg.min_inliers)
    except RansacFailed as exc:
        return result(RANSAC_FAILED, inliers=exc.inliers, npts=len(points))
    return result(SUCCESS, sol.pose, len(sol.inliers), len(points))
