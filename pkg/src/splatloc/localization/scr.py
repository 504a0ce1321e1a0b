"""Scene coordinate regression with a random forest of pixel-difference trees.

Images are processed at a reduced working resolution. Each split compares two
color samples at offsets around the pixel; leaves hold up to three modes of the
world coordinates that reached them. At test time every strided pixel is routed
through all trees, the best-supported mode becomes its 2D-3D correspondence, and
weighted RANSAC-PnP recovers the camera pose.
"""
from __future__ import annotations

import logging
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from numba import njit

from ..geometry import PinholeIntrinsics, back_project
from ..render import default_threads
from .pnp import RansacFailed, TooFewCorrespondences, pnp_ransac
from .result import INSUFFICIENT_MATCHES, RANSAC_FAILED, SUCCESS, LocalizationResult

log = logging.getLogger(__name__)

WORKING_SCALE = 0.25
MAX_OFFSET = 24
WORKING_BLUR = 1.0   # px at working resolution
MAX_MODES = 3
MODE_RADIUS = 0.3    # m; a new leaf mode is seeded only this far from existing ones
MERGE_RADIUS = 0.2  # m; leaf modes of different trees closer than this support each other
TRACE_EPS = 1e-4     # m^2; keeps confidences finite for single-sample modes
FOREST_MAGIC = b"SLRF"
FOREST_VERSION = 1


class InsufficientSamples(ValueError):
    pass


# -- training data -----------------------------------------------------------------

def to_working(image: np.ndarray, scale: float = WORKING_SCALE, blur: float | None = None) -> np.ndarray:
    """Area-downsampled image, lightly smoothed so split tests see surface structure
    rather than pixel-scale grain."""
    blur = WORKING_BLUR if blur is None else blur
    h, w = image.shape[:2]
    size = (max(1, int(round(w * scale))), max(1, int(round(h * scale))))
    small = cv2.resize(np.asarray(image, dtype=np.float32), size, interpolation=cv2.INTER_AREA)
    if blur > 0:
        small = cv2.GaussianBlur(small, (0, 0), blur, borderType=cv2.BORDER_REPLICATE)
    return small


def depth_to_working(depth: np.ndarray, scale: float = WORKING_SCALE, max_spread: float = 0.1) -> np.ndarray:
    """Block-average depth; blocks with an invalid pixel or a depth edge become invalid."""
    f = int(round(1.0 / scale))
    if abs(f * scale - 1.0) > 1e-9:
        raise ValueError("working scale must be the reciprocal of an integer")
    H, W = depth.shape[0] // f, depth.shape[1] // f
    blocks = np.asarray(depth, dtype=np.float64)[:H * f, :W * f].reshape(H, f, W, f)
    lo = blocks.min(axis=(1, 3))
    hi = blocks.max(axis=(1, 3))
    mean = blocks.mean(axis=(1, 3))
    return np.where((lo > 0) & (hi - lo <= max_spread), mean, 0.0)


@dataclass(eq=False)
class TrainingSet:
    images: np.ndarray        # (V, h, w, 3) float32 working-resolution images
    view: np.ndarray          # per-sample view index
    uv: np.ndarray            # (n, 2) int32 pixel at working resolution
    rotation: np.ndarray      # (n, 2) float32 cos/sin of in-plane augmentation angle
    jitter: np.ndarray        # (n, 2) float32 contrast factor and brightness offset
    targets: np.ndarray       # (n, 3) world coordinates
    provenance: np.ndarray    # (n,) 0 keyframe, 1 rendered
    intrinsics: list = field(default_factory=list)  # working intrinsics per view
    skipped_views: int = 0

    def __len__(self) -> int:
        return len(self.targets)

    def identical_to(self, other: TrainingSet) -> bool:
        return all(np.array_equal(getattr(self, k), getattr(other, k))
                   for k in ("images", "view", "uv", "rotation", "jitter", "targets", "provenance"))


def build_training_set(views, samples_per_view: int = 2000, augment: bool = False, seed: int = 0,
                       scale: float = WORKING_SCALE, samples_per_rendered_view: int | None = None) -> TrainingSet:
    """Seeded uniform samples of valid-depth pixels with back-projected world targets.

    ``views`` need ``image``, ``depth``, ``pose`` and ``intrinsics`` attributes (and
    optionally ``provenance``). Views without valid depth are skipped and counted. With
    ``augment`` each sample gets a contrast factor in [0.8, 1.2], a brightness offset in
    [-0.2, 0.2] and an in-plane rotation in [-15, 15] degrees, applied to the image
    context around the sample pixel when features are evaluated.

    Rendered views take ``samples_per_rendered_view`` samples when given. Each view
    draws from its own generator seeded by ``(seed, position)``, so the samples of the
    leading keyframes do not change when rendered views are appended.
    """
    images, vidx, uvs, rots, jits, targets, prov, Ks = [], [], [], [], [], [], [], []
    skipped = 0
    for pos, v in enumerate(views):
        rendered = getattr(v, "provenance", "keyframe") == "rendered"
        budget = samples_per_rendered_view if rendered and samples_per_rendered_view is not None \
            else samples_per_view
        rng = np.random.default_rng([seed, pos])
        img = to_working(v.image, scale)
        depth = depth_to_working(v.depth, scale)
        Kw = v.intrinsics.scaled(scale)
        ys, xs = np.nonzero(depth > 0)
        if len(ys) == 0:
            skipped += 1
            continue
        k = len(images)
        images.append(img)
        Ks.append(Kw)
        pick = np.sort(rng.choice(len(ys), size=min(budget, len(ys)), replace=False))
        u, w = xs[pick], ys[pick]
        pc = back_project(u.astype(np.float64), w.astype(np.float64), depth[w, u], Kw)
        targets.append(v.pose.camera_to_world(pc))
        uvs.append(np.stack([u, w], axis=1).astype(np.int32))
        vidx.append(np.full(len(pick), k, dtype=np.int32))
        n = len(pick)
        if augment:
            ang = np.deg2rad(rng.uniform(-15.0, 15.0, n))
            jit = np.stack([rng.uniform(0.8, 1.2, n), rng.uniform(-0.2, 0.2, n)], axis=1)
        else:
            ang = np.zeros(n)
            jit = np.tile([1.0, 0.0], (n, 1))
        rots.append(np.stack([np.cos(ang), np.sin(ang)], axis=1).astype(np.float32))
        jits.append(jit.astype(np.float32))
        prov.append(np.full(n, 1 if rendered else 0, dtype=np.uint8))
    if skipped:
        log.warning("%d views without valid depth were skipped", skipped)
    if not images:
        h = w = 1
        return TrainingSet(np.zeros((0, h, w, 3), np.float32), np.zeros(0, np.int32), np.zeros((0, 2), np.int32),
                           np.zeros((0, 2), np.float32), np.zeros((0, 2), np.float32), np.zeros((0, 3)),
                           np.zeros(0, np.uint8), [], skipped)
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ValueError("all training views must share one resolution")
    return TrainingSet(np.stack(images).astype(np.float32), np.concatenate(vidx), np.concatenate(uvs),
                       np.concatenate(rots), np.concatenate(jits), np.concatenate(targets),
                       np.concatenate(prov), Ks, skipped)


# -- kernels -----------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _lookup(img, x, y, cs, sn, dx, dy, ch, con, bri):
    H = img.shape[0]
    W = img.shape[1]
    px = int(np.floor(x + cs * dx - sn * dy + 0.5))
    py = int(np.floor(y + sn * dx + cs * dy + 0.5))
    px = min(max(px, 0), W - 1)
    py = min(max(py, 0), H - 1)
    val = img[py, px, ch] * con + bri
    return min(max(val, 0.0), 1.0)


@njit(cache=True, nogil=True)
def _response(images, view, uv, rot, jit, s, p):
    img = images[view[s]]
    x = uv[s, 0]
    y = uv[s, 1]
    cs = rot[s, 0]
    sn = rot[s, 1]
    con = jit[s, 0]
    bri = jit[s, 1]
    return (_lookup(img, x, y, cs, sn, p[2], p[3], p[0], con, bri)
            - _lookup(img, x, y, cs, sn, p[4], p[5], p[1], con, bri))


@njit(cache=True, nogil=True)
def _sse(s1, s2, n):
    if n == 0:
        return 0.0
    return (s2[0] + s2[1] + s2[2]) - (s1[0] * s1[0] + s1[1] * s1[1] + s1[2] * s1[2]) / n


@njit(cache=True, nogil=True)
def _sample_feature(p, max_offset):
    """Random channel pair and offsets; half the tests anchor on the center pixel, and
    offset radii are drawn denser near zero since short-range context varies less with
    viewpoint."""
    p[0] = np.random.randint(0, 3)
    p[1] = np.random.randint(0, 3)
    for k in range(2, 6, 2):
        if k == 2 and np.random.random() < 0.5:
            p[2] = 0
            p[3] = 0
            continue
        r = max_offset * np.random.random() ** 2
        a = 2.0 * np.pi * np.random.random()
        p[k] = int(np.floor(r * np.cos(a) + 0.5))
        p[k + 1] = int(np.floor(r * np.sin(a) + 0.5))


@njit(cache=True, nogil=True)
def _train_tree(images, view, uv, rot, jit, targets, idx, max_depth, n_candidates, min_leaf,
                max_eval, max_offset, seed):
    np.random.seed(seed)
    n = idx.shape[0]
    max_nodes = 2 * (n // max(min_leaf, 1)) + 3
    params = np.zeros((max_nodes, 6), dtype=np.int32)
    thresh = np.zeros(max_nodes, dtype=np.float64)
    left = np.full(max_nodes, -1, dtype=np.int32)
    right = np.full(max_nodes, -1, dtype=np.int32)
    leaf_start = np.zeros(max_nodes, dtype=np.int64)
    leaf_end = np.zeros(max_nodes, dtype=np.int64)
    is_leaf = np.zeros(max_nodes, dtype=np.bool_)
    stack = np.zeros((max_nodes, 4), dtype=np.int64)  # node, start, end, depth
    sp = 0
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = n
    stack[0, 3] = 0
    sp = 1
    n_nodes = 1
    cand = np.zeros(6, dtype=np.int32)
    best_p = np.zeros(6, dtype=np.int32)
    resp = np.zeros(n, dtype=np.float64)
    s1l = np.zeros(3)
    s2l = np.zeros(3)
    s1 = np.zeros(3)
    s2 = np.zeros(3)
    while sp > 0:
        sp -= 1
        node = stack[sp, 0]
        start = stack[sp, 1]
        end = stack[sp, 2]
        depth = stack[sp, 3]
        m = end - start
        split = False
        if depth < max_depth and m >= 2 * min_leaf:
            # candidate splits are scored on a random subset of the node's samples
            ne = min(m, max_eval)
            sub = np.empty(ne, dtype=np.int64)
            if ne == m:
                for i in range(m):
                    sub[i] = idx[start + i]
            else:
                perm = np.random.permutation(m)
                for i in range(ne):
                    sub[i] = idx[start + perm[i]]
            s1[:] = 0.0
            s2[:] = 0.0
            for i in range(ne):
                for d in range(3):
                    t = targets[sub[i], d]
                    s1[d] += t
                    s2[d] += t * t
            parent_sse = _sse(s1, s2, ne)
            best = parent_sse
            best_t = 0.0
            found = False
            min_eval_leaf = max(1, (min_leaf * ne) // m)
            for c in range(n_candidates):
                _sample_feature(cand, max_offset)
                ref = sub[np.random.randint(0, ne)]
                thr = _response(images, view, uv, rot, jit, ref, cand)
                s1l[:] = 0.0
                s2l[:] = 0.0
                nl = 0
                for i in range(ne):
                    s = sub[i]
                    if _response(images, view, uv, rot, jit, s, cand) < thr:
                        nl += 1
                        for d in range(3):
                            t = targets[s, d]
                            s1l[d] += t
                            s2l[d] += t * t
                nr = ne - nl
                if nl < min_eval_leaf or nr < min_eval_leaf:
                    continue
                cost = _sse(s1l, s2l, nl) + _sse(s1 - s1l, s2 - s2l, nr)
                if cost < best:
                    best = cost
                    best_t = thr
                    best_p[:] = cand
                    found = True
            if found:
                # partition the full node range
                for i in range(start, end):
                    resp[i] = _response(images, view, uv, rot, jit, idx[i], best_p)
                lo = start
                hi = end - 1
                while lo <= hi:
                    if resp[lo] < best_t:
                        lo += 1
                    else:
                        tmp = idx[lo]
                        idx[lo] = idx[hi]
                        idx[hi] = tmp
                        tr = resp[lo]
                        resp[lo] = resp[hi]
                        resp[hi] = tr
                        hi -= 1
                nl = lo - start
                if nl >= min_leaf and (m - nl) >= min_leaf:
                    split = True
                    params[node, :] = best_p
                    thresh[node] = best_t
                    lc = n_nodes
                    rc = n_nodes + 1
                    n_nodes += 2
                    left[node] = lc
                    right[node] = rc
                    stack[sp, 0] = rc
                    stack[sp, 1] = lo
                    stack[sp, 2] = end
                    stack[sp, 3] = depth + 1
                    sp += 1
                    stack[sp, 0] = lc
                    stack[sp, 1] = start
                    stack[sp, 2] = lo
                    stack[sp, 3] = depth + 1
                    sp += 1
        if not split:
            is_leaf[node] = True
            leaf_start[node] = start
            leaf_end[node] = end
    return (params[:n_nodes].copy(), thresh[:n_nodes].copy(), left[:n_nodes].copy(), right[:n_nodes].copy(),
            is_leaf[:n_nodes].copy(), leaf_start[:n_nodes].copy(), leaf_end[:n_nodes].copy())


@njit(cache=True, nogil=True)
def _leaf_modes(points, max_modes, radius, iters):
    """Distance-gated k-means: centers are seeded at the sample mean, then at the
    farthest sample while it lies beyond ``radius`` of every center."""
    n = points.shape[0]
    centers = np.zeros((max_modes, 3))
    for d in range(3):
        centers[0, d] = points[:, d].mean()
    k = 1
    dist = np.empty(n)
    while k < max_modes:
        far = -1.0
        arg = 0
        for i in range(n):
            best = 1e300
            for c in range(k):
                dd = 0.0
                for d in range(3):
                    diff = points[i, d] - centers[c, d]
                    dd += diff * diff
                best = min(best, dd)
            dist[i] = best
            if best > far:
                far = best
                arg = i
        if far <= radius * radius:
            break
        centers[k, :] = points[arg, :]
        k += 1
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(iters):
        for i in range(n):
            best = 1e300
            for c in range(k):
                dd = 0.0
                for d in range(3):
                    diff = points[i, d] - centers[c, d]
                    dd += diff * diff
                if dd < best:
                    best = dd
                    assign[i] = c
        new = np.zeros((k, 3))
        cnt = np.zeros(k)
        for i in range(n):
            cnt[assign[i]] += 1
            for d in range(3):
                new[assign[i], d] += points[i, d]
        for c in range(k):
            if cnt[c] > 0:
                centers[c, :] = new[c, :] / cnt[c]
    counts = np.zeros(max_modes, dtype=np.int64)
    traces = np.zeros(max_modes)
    for i in range(n):
        c = assign[i]
        counts[c] += 1
        for d in range(3):
            diff = points[i, d] - centers[c, d]
            traces[c] += diff * diff
    for c in range(max_modes):
        if counts[c] > 0:
            traces[c] /= counts[c]
    return centers, traces, counts


@njit(cache=True, nogil=True)
def _predict(image, coords, params, thresh, left, right, leaf_of, roots, modes, traces, counts,
             lo, hi, merge_radius, out_xyz, out_conf):
    """Merge the leaf modes reached in all trees: a mode's weight is the sample count of
    every mode within ``merge_radius`` of it. The heaviest mode wins (ties: smaller
    spread), and the output is the count-weighted mean of its supporters."""
    n_modes = modes.shape[1]
    n_trees = roots.shape[0]
    cand = np.zeros((n_trees * n_modes, 3))
    cnt = np.zeros(n_trees * n_modes)
    tr = np.zeros(n_trees * n_modes)
    r2 = merge_radius * merge_radius
    for i in range(coords.shape[0]):
        x = coords[i, 0]
        y = coords[i, 1]
        k = 0
        for t in range(n_trees):
            node = roots[t]
            while left[node] >= 0:
                p = params[node]
                r = (_lookup(image, x, y, 1.0, 0.0, p[2], p[3], p[0], 1.0, 0.0)
                     - _lookup(image, x, y, 1.0, 0.0, p[4], p[5], p[1], 1.0, 0.0))
                node = left[node] if r < thresh[node] else right[node]
            leaf = leaf_of[node]
            for m in range(n_modes):
                if counts[leaf, m] > 0:
                    cand[k] = modes[leaf, m]
                    cnt[k] = counts[leaf, m]
                    tr[k] = traces[leaf, m]
                    k += 1
        best_w = -1.0
        best_tr = 0.0
        best = np.zeros(3)
        for a in range(k):
            w = 0.0
            acc = np.zeros(3)
            acc_tr = 0.0
            for b in range(k):
                d2 = 0.0
                for d in range(3):
                    diff = cand[a, d] - cand[b, d]
                    d2 += diff * diff
                if d2 <= r2:
                    w += cnt[b]
                    acc += cnt[b] * cand[b]
                    acc_tr += cnt[b] * tr[b]
            if w > best_w or (w == best_w and acc_tr / w < best_tr):
                best_w = w
                best_tr = acc_tr / w
                best[:] = acc / w
        for d in range(3):
            out_xyz[i, d] = min(max(best[d], lo[d]), hi[d])
        out_conf[i] = 1.0 / (best_tr + TRACE_EPS)


# -- forest ------------------------------------------------------------------------

@dataclass(eq=False)
class RegressionForest:
    """Trees stored as flat node arrays; ``roots[t]`` is the root of tree ``t``."""

    params: np.ndarray      # (nodes, 6) int32: ch1, ch2, dx1, dy1, dx2, dy2
    thresh: np.ndarray      # (nodes,)
    left: np.ndarray        # (nodes,) int32, -1 at leaves
    right: np.ndarray
    leaf_of: np.ndarray     # (nodes,) int32 leaf id, -1 at split nodes
    roots: np.ndarray       # (trees,) int32
    modes: np.ndarray       # (leaves, 3, 3)
    traces: np.ndarray      # (leaves, 3)
    counts: np.ndarray      # (leaves, 3) int64, 0 for unused slots
    bbox_lo: np.ndarray     # scene bounds expanded by 10%
    bbox_hi: np.ndarray
    scale: float = WORKING_SCALE
    seed: int = 0

    @property
    def num_trees(self) -> int:
        return len(self.roots)

    def leaf_sample_counts(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def identical_to(self, other: RegressionForest) -> bool:
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in _ARRAYS) and \
            self.scale == other.scale and self.seed == other.seed


_ARRAYS = ("params", "thresh", "left", "right", "leaf_of", "roots", "modes", "traces", "counts",
           "bbox_lo", "bbox_hi")


def train_forest(ts: TrainingSet, num_trees: int = 5, max_depth: int = 16, candidates: int = 256,
                 min_leaf: int = 10, seed: int = 0, max_eval: int = 1000, bag_fraction: float = 0.63,
                 min_samples: int = 1000, threads: int | None = None) -> RegressionForest:
    """Greedy variance-reduction trees on bagged subsets; deterministic given ``seed``.

    Trees are grown concurrently on up to ``threads`` threads; each tree has its own
    derived seed, so the result does not depend on the thread count.
    """
    if len(ts) < min_samples:
        raise InsufficientSamples(f"need at least {min_samples} samples, got {len(ts)}")
    if not 1 <= max_depth <= 16:
        raise ValueError("max_depth must lie in [1, 16]")
    rng = np.random.default_rng(seed)
    tree_seeds = rng.integers(0, 2 ** 31 - 1, size=num_trees)
    images = np.ascontiguousarray(ts.images)
    def grow(t):
        trng = np.random.default_rng(int(tree_seeds[t]))
        bag = np.sort(trng.choice(len(ts), size=max(1, int(round(bag_fraction * len(ts)))), replace=False))
        idx = bag.astype(np.int64)
        out = _train_tree(images, ts.view, ts.uv, ts.rotation, ts.jitter, ts.targets, idx, max_depth,
                          candidates, min_leaf, max_eval, MAX_OFFSET, int(tree_seeds[t]))
        return idx, out

    workers = max(1, min(num_trees, threads or default_threads()))
    if workers == 1:
        parts = [grow(t) for t in range(num_trees)]
    else:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(grow, range(num_trees)))
    params, thresh, left, right, leaf_of, roots = [], [], [], [], [], []
    modes, traces, counts = [], [], []
    offset = 0
    n_leaves = 0
    for idx, (p, th, lf, rt, is_leaf, ls, le) in parts:
        n = len(p)
        roots.append(offset)
        params.append(p)
        thresh.append(th)
        left.append(np.where(lf >= 0, lf + offset, -1))
        right.append(np.where(rt >= 0, rt + offset, -1))
        lid = np.full(n, -1, dtype=np.int32)
        for node in np.flatnonzero(is_leaf):
            lid[node] = n_leaves
            n_leaves += 1
            c, tr, cnt = _leaf_modes(ts.targets[idx[ls[node]:le[node]]], MAX_MODES, MODE_RADIUS, 10)
            modes.append(c)
            traces.append(tr)
            counts.append(cnt)
        leaf_of.append(lid)
        offset += n
    lo = ts.targets.min(axis=0)
    hi = ts.targets.max(axis=0)
    pad = 0.1 * (hi - lo)
    return RegressionForest(np.concatenate(params).astype(np.int32), np.concatenate(thresh),
                            np.concatenate(left).astype(np.int32), np.concatenate(right).astype(np.int32),
                            np.concatenate(leaf_of).astype(np.int32), np.array(roots, dtype=np.int32),
                            np.array(modes), np.array(traces), np.array(counts, dtype=np.int64),
                            lo - pad, hi + pad, WORKING_SCALE, seed)


def predict_scene_coords(forest: RegressionForest, image: np.ndarray, stride: int = 4):
    """``(uv, xyz, confidence)`` for every ``stride``-th pixel of a working-resolution image."""
    img = np.ascontiguousarray(np.asarray(image, dtype=np.float32))
    H, W = img.shape[:2]
    off = stride // 2
    ys, xs = np.mgrid[off:H:stride, off:W:stride]
    coords = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.int32)
    xyz = np.zeros((len(coords), 3))
    conf = np.zeros(len(coords))
    _predict(img, coords, forest.params, forest.thresh, forest.left, forest.right, forest.leaf_of,
             forest.roots, forest.modes, forest.traces, forest.counts, forest.bbox_lo, forest.bbox_hi,
             MERGE_RADIUS, xyz, conf)
    return coords.astype(np.float64), xyz, conf


@dataclass(frozen=True)
class ScrConfig:
    stride: int = 4
    threshold_px: float = 10.0
    hypotheses: int = 256
    min_inliers: int = 12
    seed: int = 0


def localize_scr(forest: RegressionForest, query_image: np.ndarray, K: PinholeIntrinsics,
                 cfg: ScrConfig | None = None) -> LocalizationResult:
    """Pose of a full-resolution query with intrinsics ``K``."""
    cfg = cfg or ScrConfig()
    t0 = time.perf_counter()

    def result(status, pose=None, inliers=0, npts=0):
        return LocalizationResult(status, pose, inliers, npts, 1e3 * (time.perf_counter() - t0), "scr")

    img = to_working(query_image, forest.scale)
    Kw = K.scaled(forest.scale)
    uv, xyz, conf = predict_scene_coords(forest, img, cfg.stride)
    if len(uv) < cfg.min_inliers:
        return result(INSUFFICIENT_MATCHES, npts=len(uv))
    try:
        sol = pnp_ransac(xyz, uv, Kw, cfg.threshold_px, cfg.hypotheses, cfg.seed, weights=conf,
                         min_inliers=cfg.min_inliers)
    except (RansacFailed, TooFewCorrespondences) as exc:
        return result(RANSAC_FAILED, inliers=getattr(exc, "inliers", 0), npts=len(uv))
    return result(SUCCESS, sol.pose, len(sol.inliers), len(uv))


# -- serialization -----------------------------------------------------------------

_ARR_HEADER = struct.Struct("<16s8sI")  # name, dtype string, ndim


def forest_to_bytes(forest: RegressionForest) -> bytes:
    out = [FOREST_MAGIC, struct.pack("<IdqI", FOREST_VERSION, forest.scale, forest.seed, len(_ARRAYS))]
    for name in _ARRAYS:
        a = np.ascontiguousarray(getattr(forest, name))
        dt = a.dtype.newbyteorder("<").str.encode()
        out.append(_ARR_HEADER.pack(name.encode(), dt, a.ndim))
        out.append(struct.pack(f"<{a.ndim}q", *a.shape))
        out.append(a.astype(a.dtype.newbyteorder("<")).tobytes())
    return b"".join(out)


def forest_from_bytes(data: bytes) -> RegressionForest:
    if data[:4] != FOREST_MAGIC:
        raise ValueError("not a forest file")
    version, scale, seed, count = struct.unpack_from("<IdqI", data, 4)
    if version != FOREST_VERSION:
        raise ValueError(f"forest format version {version}, expected {FOREST_VERSION}")
    off = 4 + struct.calcsize("<IdqI")
    arrays = {}
    for _ in range(count):
        name, dt, ndim = _ARR_HEADER.unpack_from(data, off)
        off += _ARR_HEADER.size
        shape = struct.unpack_from(f"<{ndim}q", data, off)
        off += 8 * ndim
        dtype = np.dtype(dt.rstrip(b"\0").decode())
        size = int(np.prod(shape)) * dtype.itemsize
        if off + size > len(data):
            raise ValueError("truncated forest file")
        arrays[name.rstrip(b"\0").decode()] = np.frombuffer(data, dtype, int(np.prod(shape)), off).reshape(shape) \
            .astype(dtype.newbyteorder("="))
        off += size
    if off != len(data):
        raise ValueError("trailing bytes in forest file")
    return RegressionForest(**arrays, scale=scale, seed=seed)


def save_forest(forest: RegressionForest, path) -> None:
    Path(path).write_bytes(forest_to_bytes(forest))


def load_forest(path) -> RegressionForest:
    return forest_from_bytes(Path(path).read_bytes())
