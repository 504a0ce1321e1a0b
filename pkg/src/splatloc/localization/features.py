"""Hand-crafted image features: a global retrieval descriptor, ring-test corners with
binary descriptors, and mutual-nearest-neighbour Hamming matching."""
from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np
from numba import njit

THUMB = 16
ORIENT_BINS = 16
GLOBAL_DIM = THUMB * THUMB + ORIENT_BINS
DESC_BITS = 256
DESC_BYTES = DESC_BITS // 8
PATCH_RADIUS = 12
BORDER = PATCH_RADIUS + 3
PATTERN_SEED = 0x5EED

# 16-pixel Bresenham ring of radius 3, clockwise from the top
RING = np.array([(0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
                 (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3)], dtype=np.int64)


def to_gray(image: np.ndarray) -> np.ndarray:
    """Float grayscale in [0, 1] (Rec. 601 weights) from RGB in [0, 1] or uint8."""
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img.astype(np.float64) / 255.0
    else:
        img = img.astype(np.float64)
    if img.ndim == 3:
        img = img @ np.array([0.299, 0.587, 0.114])
    return img


# -- global descriptor ---------------------------------------------------------------

def global_descriptor(image: np.ndarray) -> np.ndarray:
    """Normalized 16x16 thumbnail followed by a 16-bin gradient-orientation histogram.

    Intensities are standardized first, so a brightness offset leaves the descriptor
    unchanged. A textureless image has an all-zero thumbnail; its histogram falls back
    to uniform so the descriptor keeps unit norm.
    """
    g = to_gray(image)
    if g.size == 0:
        raise ValueError("empty image")
    g = g - g.mean()
    std = g.std()
    if std > 1e-12:
        g = g / std
    else:
        g = np.zeros_like(g)
    thumb = cv2.resize(g, (THUMB, THUMB), interpolation=cv2.INTER_AREA).ravel()
    gx = np.zeros_like(g)
    gy = np.zeros_like(g)
    gx[:, 1:-1] = 0.5 * (g[:, 2:] - g[:, :-2])
    gy[1:-1, :] = 0.5 * (g[2:, :] - g[:-2, :])
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), 2 * np.pi)
    bins = np.minimum((ang / (2 * np.pi) * ORIENT_BINS).astype(np.int64), ORIENT_BINS - 1)
    hist = np.bincount(bins.ravel(), weights=mag.ravel(), minlength=ORIENT_BINS)
    if hist.sum() <= 1e-12:
        hist = np.ones(ORIENT_BINS)
    tn = np.linalg.norm(thumb)
    if tn > 0:
        thumb = thumb / tn
    hist = 0.5 * hist / np.linalg.norm(hist)
    d = np.concatenate([thumb, hist])
    return d / np.linalg.norm(d)


def retrieve_topk(query: np.ndarray, db, k: int = 10) -> list[int]:
    """Ids of the ``k`` database entries most cosine-similar to ``query``.

    ``db`` is a sequence of ``(descriptor, view_id)``. Ties go to the smaller id.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    db = list(db)
    if not db:
        raise ValueError("empty database")
    D = np.stack([np.asarray(d, dtype=np.float64) for d, _ in db])
    ids = np.array([int(i) for _, i in db])
    sims = D @ np.asarray(query, dtype=np.float64)
    order = np.lexsort((ids, -sims))
    return [int(i) for i in ids[order[:k]]]


# -- local features ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LocalFeatureSet:
    keypoints: np.ndarray    # (N, 2) float64 pixel coordinates (u, v)
    scores: np.ndarray       # (N,)
    descriptors: np.ndarray  # (N, 32) uint8, 256 bits per row

    def __len__(self) -> int:
        return len(self.keypoints)

    @classmethod
    def empty(cls) -> LocalFeatureSet:
        return cls(np.zeros((0, 2)), np.zeros(0), np.zeros((0, DESC_BYTES), dtype=np.uint8))

    def identical_to(self, other: LocalFeatureSet) -> bool:
        return (np.array_equal(self.keypoints, other.keypoints) and np.array_equal(self.scores, other.scores)
                and np.array_equal(self.descriptors, other.descriptors))


@njit(cache=True, nogil=True)
def _ring_scores(img, threshold, border, arc_min):
    """Ring test on every pixel; 0 where the pixel is not a corner.

    A pixel is a corner if its 16-pixel ring holds a contiguous arc of at least
    ``arc_min`` pixels all brighter (or all darker) than the center by ``threshold``,
    or if it is a saddle: two or more same-polarity arcs of length >= 3 separated by
    arcs of length >= 3 (the X-junction of a checkerboard, which has no long arc).
    """
    H, W = img.shape
    out = np.zeros((H, W))
    state = np.zeros(16, dtype=np.int64)
    for y in range(border, H - border):
        for x in range(border, W - border):
            c = img[y, x]
            score = 0.0
            nz = 0
            for i in range(16):
                d = img[y + RING[i, 1], x + RING[i, 0]] - c
                if d > threshold:
                    state[i] = 1
                    score += d - threshold
                    nz += 1
                elif d < -threshold:
                    state[i] = -1
                    score += -d - threshold
                    nz += 1
                else:
                    state[i] = 0
            if nz < 6:
                continue
            # rotate so that index 0 starts a run
            start = -1
            for i in range(16):
                if state[i] != state[(i + 15) % 16]:
                    start = i
                    break
            if start < 0:
                if state[0] != 0:
                    out[y, x] = score
                continue
            best = 0
            arcs_pos = 0
            arcs_neg = 0
            min_gap = 16
            run_state = state[start]
            run_len = 0
            for j in range(17):
                s = state[(start + j) % 16]
                if j < 16 and s == run_state:
                    run_len += 1
                    continue
                if run_state != 0:
                    if run_len > best:
                        best = run_len
                    if run_len >= 3:
                        if run_state > 0:
                            arcs_pos += 1
                        else:
                            arcs_neg += 1
                if run_len < min_gap and run_state == 0:
                    min_gap = run_len
                run_state = s
                run_len = 1
            if best >= arc_min:
                out[y, x] = score
            elif (arcs_pos >= 2 or arcs_neg >= 2) and min_gap >= 3:
                out[y, x] = score
    return out


def _pattern() -> np.ndarray:
    rng = np.random.default_rng(PATTERN_SEED)
    pts = np.rint(rng.normal(scale=PATCH_RADIUS / 2.0, size=(DESC_BITS, 4)))
    return np.clip(pts, -PATCH_RADIUS, PATCH_RADIUS).astype(np.int64)


PATTERN = _pattern()


def detect_and_describe(image: np.ndarray, max_features: int = 1500, threshold: float = 0.04,
                        arc_min: int = 9) -> LocalFeatureSet:
    """Ring-test corners with 3x3 non-maximum suppression and 256-bit descriptors.

    Each descriptor bit compares two points of a fixed seeded pattern on a Gaussian
    smoothed copy of the image. Keypoints are ordered by descending score, ties by
    row then column, and truncated to ``max_features``.
    """
    g = to_gray(image)
    H, W = g.shape
    if H < 32 or W < 32:
        raise ValueError("image must be at least 32x32")
    score = _ring_scores(g, threshold, BORDER, arc_min)
    dil = cv2.dilate(score, np.ones((3, 3), np.uint8))
    ys, xs = np.nonzero((score > 0) & (score >= dil))
    if len(ys) == 0:
        return LocalFeatureSet.empty()
    s = score[ys, xs]
    order = np.lexsort((xs, ys, -s))[:max_features]
    ys, xs, s = ys[order], xs[order], s[order]
    smooth = cv2.GaussianBlur(g, (0, 0), 2.0, borderType=cv2.BORDER_REFLECT)
    P = PATTERN
    a = smooth[ys[:, None] + P[None, :, 1], xs[:, None] + P[None, :, 0]]
    b = smooth[ys[:, None] + P[None, :, 3], xs[:, None] + P[None, :, 2]]
    bits = (a < b).astype(np.uint8)
    desc = np.packbits(bits, axis=1)
    kp = np.stack([xs, ys], axis=1).astype(np.float64)
    return LocalFeatureSet(kp, s, desc)


def hamming_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a64 = np.ascontiguousarray(a).view(np.uint64)
    b64 = np.ascontiguousarray(b).view(np.uint64)
    d = np.zeros((len(a64), len(b64)), dtype=np.uint16)
    for k in range(a64.shape[1]):
        d += np.bitwise_count(a64[:, None, k] ^ b64[None, :, k])
    return d


def _best_two(D: np.ndarray):
    """Per row: index of the smallest entry (first on ties), its value, and the runner-up value."""
    best = np.argmin(D, axis=1)
    bval = D[np.arange(len(D)), best].astype(np.int64)
    if D.shape[1] < 2:
        return best, bval, np.full(len(D), DESC_BITS + 1, dtype=np.int64)
    second = np.partition(D, 1, axis=1)[:, 1].astype(np.int64)
    return best, bval, second


def match_features(a: LocalFeatureSet, b: LocalFeatureSet, ratio: float = 0.8,
                   max_distance: int = DESC_BITS) -> np.ndarray:
    """Mutual nearest neighbours under Hamming distance that pass the ratio test in
    both directions; returns ``(M, 2)`` index pairs sorted by the first column."""
    if len(a) == 0 or len(b) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    D = hamming_matrix(a.descriptors, b.descriptors)
    ab, abv, ab2 = _best_two(D)
    ba, bav, ba2 = _best_two(D.T)
    i = np.arange(len(a))
    mutual = ba[ab] == i
    ok = mutual & (abv < ratio * ab2) & (bav[ab] < ratio * ba2[ab]) & (abv <= max_distance)
    return np.stack([i[ok], ab[ok]], axis=1).astype(np.int64)
