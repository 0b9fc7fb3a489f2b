"""Box-filter blob detection, upright 64-d descriptors, k-NN matching and
the ratio test, plus match-rate matrices over image sets.

Detection approximates the determinant of the Hessian with integral-image
box filters evaluated over octaves of growing filter sizes (9, 15, 21, 27;
then doubled increments), followed by 3x3x3 non-maximum suppression and a
3D quadratic fit for subpixel/subscale refinement. Descriptors are upright
(no orientation assignment): Haar-wavelet responses on a 20s x 20s grid,
4x4 subregions of [sum dx, sum |dx|, sum dy, sum |dy|], L2-normalised.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.ndimage import maximum_filter

from .render import TransmissionImage

DEFAULT_THRESHOLD = 8e-5
DEFAULT_RATIO = 0.7
DEFAULT_OCTAVES = 3

_FLAT_NORM = 1e-12


@dataclass(frozen=True)
class DetectorParams:
    threshold: float = DEFAULT_THRESHOLD
    octaves: int = DEFAULT_OCTAVES

    def __post_init__(self):
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")
        if not 1 <= self.octaves <= 5:
            raise ValueError("octaves must lie in [1, 5]")


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    scale: float
    response: float
    sign: int


class IntegralImage:
    """Summed-area table with a zero row and column at index 0."""

    def __init__(self, image: TransmissionImage | np.ndarray):
        arr = image.intensities if isinstance(image, TransmissionImage) else np.asarray(image)
        h, w = arr.shape
        table = np.zeros((h + 1, w + 1))
        np.cumsum(np.cumsum(arr, axis=0), axis=1, out=table[1:, 1:])
        table.setflags(write=False)
        self.table = table
        self.height = h
        self.width = w

    def box_sum(self, x0: int, y0: int, x1: int, y1: int) -> float:
        """Sum over the half-open pixel box [x0, x1) x [y0, y1)."""
        t = self.table
        return float(t[y1, x1] - t[y0, x1] - t[y1, x0] + t[y0, x0])


def integral_image(img: TransmissionImage) -> IntegralImage:
    return IntegralImage(img)


def _octave_filter_sizes(octave: int) -> list[int]:
    """Filter sizes of one octave: four sizes at increment 6 * 2^(octave-1)."""
    start = 9
    for o in range(2, octave + 1):
        start += 6 * (1 << (o - 2))
    inc = 6 * (1 << (octave - 1))
    return [start + k * inc for k in range(4)]


def _grid_box(table: np.ndarray, rows: np.ndarray, cols: np.ndarray,
              r0: int, c0: int, h: int, w: int) -> np.ndarray:
    """Box sums of height h, width w anchored at (row + r0, col + c0) for the
    outer product of sample rows and cols."""
    rt = rows + r0
    rb = rt + h
    cl = cols + c0
    cr = cl + w
    return (
        table[np.ix_(rb, cr)] - table[np.ix_(rt, cr)]
        - table[np.ix_(rb, cl)] + table[np.ix_(rt, cl)]
    )


def _hessian_responses(ii: IntegralImage, size: int, rows: np.ndarray, cols: np.ndarray):
    """(det, laplacian sign) of the box-filter Hessian at the sample grid.

    Invalid positions (filter crossing the border) are -inf / 0.
    """
    l = size // 3
    b = (3 * l - 1) // 2
    margin = max(b, l) + 1
    h_img, w_img = ii.height, ii.width
    valid_r = (rows >= margin) & (rows + margin < h_img)
    valid_c = (cols >= margin) & (cols + margin < w_img)
    det = np.full((rows.size, cols.size), -np.inf)
    sign = np.zeros((rows.size, cols.size), dtype=np.int8)
    if not valid_r.any() or not valid_c.any():
        return det, sign
    r = rows[valid_r]
    c = cols[valid_c]
    t = ii.table

    half = (l - 1) // 2
    # Dyy: three stacked (2l-1)-wide, l-tall bands with weights 1, -2, 1
    top = _grid_box(t, r, c, -b, -(l - 1), l, 2 * l - 1)
    mid = _grid_box(t, r, c, -half, -(l - 1), l, 2 * l - 1)
    bot = _grid_box(t, r, c, half + 1, -(l - 1), l, 2 * l - 1)
    dyy = top - 2.0 * mid + bot
    # Dxx: transposed layout
    left = _grid_box(t, r, c, -(l - 1), -b, 2 * l - 1, l)
    cen = _grid_box(t, r, c, -(l - 1), -half, 2 * l - 1, l)
    right = _grid_box(t, r, c, -(l - 1), half + 1, 2 * l - 1, l)
    dxx = left - 2.0 * cen + right
    # Dxy: four l x l quadrant boxes one pixel off-center
    tl = _grid_box(t, r, c, -l, -l, l, l)
    tr = _grid_box(t, r, c, -l, 1, l, l)
    bl = _grid_box(t, r, c, 1, -l, l, l)
    br = _grid_box(t, r, c, 1, 1, l, l)
    dxy = tl + br - tr - bl

    inv_area = 1.0 / (size * size)
    dxx *= inv_area
    dyy *= inv_area
    dxy *= inv_area
    block_det = dxx * dyy - (0.9 * dxy) ** 2
    block_sign = np.where(dxx + dyy >= 0, 1, -1).astype(np.int8)
    det[np.ix_(valid_r, valid_c)] = block_det
    sign[np.ix_(valid_r, valid_c)] = block_sign
    return det, sign


def _refine(stack: np.ndarray, li: int, ri: int, ci: int):
    """3D quadratic fit around a discrete peak; returns (ds, dr, dc) clamped
    to zero when the fit is unreliable or steps farther than half a sample."""
    n = stack[li - 1 : li + 2, ri - 1 : ri + 2, ci - 1 : ci + 2]
    if not np.all(np.isfinite(n)):
        return 0.0, 0.0, 0.0
    g = 0.5 * np.array([
        n[2, 1, 1] - n[0, 1, 1],
        n[1, 2, 1] - n[1, 0, 1],
        n[1, 1, 2] - n[1, 1, 0],
    ])
    hss = n[2, 1, 1] + n[0, 1, 1] - 2.0 * n[1, 1, 1]
    hrr = n[1, 2, 1] + n[1, 0, 1] - 2.0 * n[1, 1, 1]
    hcc = n[1, 1, 2] + n[1, 1, 0] - 2.0 * n[1, 1, 1]
    hsr = 0.25 * (n[2, 2, 1] - n[2, 0, 1] - n[0, 2, 1] + n[0, 0, 1])
    hsc = 0.25 * (n[2, 1, 2] - n[2, 1, 0] - n[0, 1, 2] + n[0, 1, 0])
    hrc = 0.25 * (n[1, 2, 2] - n[1, 2, 0] - n[1, 0, 2] + n[1, 0, 0])
    hess = np.array([[hss, hsr, hsc], [hsr, hrr, hrc], [hsc, hrc, hcc]])
    try:
        delta = np.linalg.solve(hess, -g)
    except np.linalg.LinAlgError:
        return 0.0, 0.0, 0.0
    if np.any(np.abs(delta) > 0.5):
        return 0.0, 0.0, 0.0
    return float(delta[0]), float(delta[1]), float(delta[2])


def detect_keypoints(
    img: TransmissionImage,
    threshold: float = DEFAULT_THRESHOLD,
    octaves: int = DEFAULT_OCTAVES,
) -> list[Keypoint]:
    """Determinant-of-Hessian keypoints, sorted by descending response."""
    if img.width < 32 or img.height < 32:
        raise ValueError("detection requires an image of at least 32x32 pixels")
    params = DetectorParams(threshold=threshold, octaves=octaves)
    ii = IntegralImage(img)
    found: list[Keypoint] = []
    for octave in range(1, params.octaves + 1):
        step = 1 << (octave - 1)
        sizes = _octave_filter_sizes(octave)
        rows = np.arange(0, img.height, step)
        cols = np.arange(0, img.width, step)
        if rows.size < 3 or cols.size < 3:
            break
        stack = np.empty((4, rows.size, cols.size))
        signs = np.empty((4, rows.size, cols.size), dtype=np.int8)
        for k, size in enumerate(sizes):
            stack[k], signs[k] = _hessian_responses(ii, size, rows, cols)
        local_max = maximum_filter(stack, size=3, mode="constant", cval=-np.inf)
        peaks = (stack == local_max) & (stack > params.threshold)
        peaks[0] = False
        peaks[3] = False
        inc = sizes[1] - sizes[0]
        for li, ri, ci in zip(*np.nonzero(peaks)):
            ds, dr, dc = _refine(stack, li, ri, ci)
            size = sizes[li] + ds * inc
            x = (cols[ci] + dc * step)
            y = (rows[ri] + dr * step)
            if not (0.0 <= x < img.width and 0.0 <= y < img.height):
                continue
            found.append(
                Keypoint(
                    x=float(x),
                    y=float(y),
                    scale=1.2 * size / 9.0,
                    response=float(stack[li, ri, ci]),
                    sign=int(signs[li, ri, ci]),
                )
            )
    found.sort(key=lambda k: (-k.response, k.y, k.x, k.scale))
    return _suppress_duplicates(found)


def _suppress_duplicates(kps: list[Keypoint], radius: float = 2.5,
                         scale_ratio: float = 1.3) -> list[Keypoint]:
    """Drop re-detections of one blob from neighbouring octaves: keypoints
    within ``radius`` pixels of a stronger keypoint at a similar scale.
    Distinct structures at the same spot keep their separated scales."""
    kept: list[Keypoint] = []
    for kp in kps:
        dup = False
        for other in kept:
            if (kp.x - other.x) ** 2 + (kp.y - other.y) ** 2 < radius * radius:
                lo, hi = sorted((kp.scale, other.scale))
                if hi / lo < scale_ratio:
                    dup = True
                    break
        if not dup:
            kept.append(kp)
    return kept


def describe(
    img: TransmissionImage, keypoints: Sequence[Keypoint]
) -> tuple[list[Keypoint], np.ndarray]:
    """Upright 64-d descriptors for the keypoints.

    Returns (kept keypoints, (n, 64) descriptor array); flat patches are
    dropped together with their keypoints.
    """
    if not keypoints:
        return [], np.zeros((0, 64))
    ii = IntegralImage(img)
    t = ii.table
    h, w = ii.height, ii.width

    # 20x20 sample offsets in units of the keypoint scale
    grid = (np.arange(20) - 9.5)
    oy, ox = np.meshgrid(grid, grid, indexing="ij")
    ox = ox.ravel()
    oy = oy.ravel()
    weight = np.exp(-(ox**2 + oy**2) / (2.0 * 3.3**2))

    kept: list[Keypoint] = []
    descs: list[np.ndarray] = []
    for kp in keypoints:
        s = kp.scale
        rx = np.rint(kp.x + ox * s).astype(np.int64)
        ry = np.rint(kp.y + oy * s).astype(np.int64)
        hr = max(1, int(round(s)))

        cl = np.clip(rx - hr, 0, w)
        cm = np.clip(rx, 0, w)
        cr = np.clip(rx + hr, 0, w)
        rt = np.clip(ry - hr, 0, h)
        rm = np.clip(ry, 0, h)
        rb = np.clip(ry + hr, 0, h)

        right = t[rb, cr] - t[rt, cr] - t[rb, cm] + t[rt, cm]
        left = t[rb, cm] - t[rt, cm] - t[rb, cl] + t[rt, cl]
        dx = (right - left) * weight
        bottom = t[rb, cr] - t[rm, cr] - t[rb, cl] + t[rm, cl]
        top = t[rm, cr] - t[rt, cr] - t[rm, cl] + t[rt, cl]
        dy = (bottom - top) * weight

        parts = np.stack([dx, np.abs(dx), dy, np.abs(dy)], axis=-1)
        sub = parts.reshape(4, 5, 4, 5, 4).sum(axis=(1, 3))
        vec = sub.reshape(64)
        norm = np.linalg.norm(vec)
        if norm < _FLAT_NORM:
            continue
        kept.append(kp)
        descs.append(vec / norm)
    if not descs:
        return [], np.zeros((0, 64))
    return kept, np.vstack(descs)


class Match(NamedTuple):
    ref_idx: int
    best_idx: int
    d1: float
    second_idx: int
    d2: float


def descriptor_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Euclidean descriptor distance; exactly symmetric in its arguments."""
    d = np.asarray(a) - np.asarray(b)
    return float(np.sqrt(np.sum(d * d)))


def match_knn(ref: np.ndarray, target: np.ndarray) -> list[Match]:
    """Two nearest target descriptors per reference descriptor, by exhaustive
    exact search; ties broken toward the lower index."""
    ref = np.asarray(ref, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    n, m = ref.shape[0], target.shape[0]
    if n == 0 or m == 0:
        return []
    out: list[Match] = []
    chunk = max(1, min(n, 8_000_000 // max(m, 1)))
    for lo in range(0, n, chunk):
        block = ref[lo : lo + chunk]
        diff = block[:, None, :] - target[None, :, :]
        dist = np.sqrt(np.sum(diff * diff, axis=2))
        order = np.argsort(dist, axis=1, kind="stable")
        for i in range(block.shape[0]):
            best = int(order[i, 0])
            if m >= 2:
                second = int(order[i, 1])
                out.append(Match(lo + i, best, float(dist[i, best]), second, float(dist[i, second])))
            else:
                out.append(Match(lo + i, best, float(dist[i, best]), -1, math.inf))
    return out


def ratio_test(matches: Sequence[Match], ratio: float = DEFAULT_RATIO) -> list[Match]:
    """Keep matches with d1 < ratio * d2. A zero second distance is kept only
    for exact duplicates (d1 == 0); absent second neighbours are rejected."""
    if not 0.0 < ratio <= 1.0:
        raise ValueError("ratio must lie in (0, 1]")
    kept = []
    for m in matches:
        if m.second_idx < 0 or not math.isfinite(m.d2):
            continue
        if m.d2 == 0.0:
            if m.d1 == 0.0:
                kept.append(m)
        elif m.d1 < ratio * m.d2:
            kept.append(m)
    return kept


@dataclass
class MatchRateMatrix:
    """Ratio-test survivor counts for every ordered (reference, target) pair.

    total[i][j] is the number of descriptors in reference i; the diagonal
    compares an image with itself, so matched[i][i] == total[i][i].
    """

    labels: list[str]
    matched: np.ndarray
    total: np.ndarray

    def __post_init__(self):
        n = len(self.labels)
        self.matched = np.asarray(self.matched, dtype=np.int64).reshape(n, n)
        self.total = np.asarray(self.total, dtype=np.int64).reshape(n, n)
        if np.any(self.matched < 0) or np.any(self.matched > self.total):
            raise ValueError("require 0 <= matched <= total")

    def rates(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            r = self.matched / self.total
        return np.where(self.total > 0, r, 0.0)

    def off_diagonal_mean(self) -> float:
        n = len(self.labels)
        if n < 2:
            return 0.0
        mask = ~np.eye(n, dtype=bool)
        return float(self.rates()[mask].mean())

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["ref", "target", "matched", "total", "rate"])
        rates = self.rates()
        for i, ref in enumerate(self.labels):
            for j, tgt in enumerate(self.labels):
                writer.writerow([ref, tgt, int(self.matched[i, j]), int(self.total[i, j]),
                                 repr(float(rates[i, j]))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MatchRateMatrix":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != ["ref", "target", "matched", "total", "rate"]:
            raise ValueError("malformed match-rate CSV header")
        labels: list[str] = []
        for ref, _tgt, _m, _t, _r in rows[1:]:
            if ref not in labels:
                labels.append(ref)
        n = len(labels)
        matched = np.zeros((n, n), dtype=np.int64)
        total = np.zeros((n, n), dtype=np.int64)
        index = {lab: i for i, lab in enumerate(labels)}
        for ref, tgt, m, t, _r in rows[1:]:
            matched[index[ref], index[tgt]] = int(m)
            total[index[ref], index[tgt]] = int(t)
        return cls(labels, matched, total)

    def to_json(self) -> str:
        return json.dumps(
            {
                "labels": self.labels,
                "matched": self.matched.tolist(),
                "total": self.total.tolist(),
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "MatchRateMatrix":
        doc = json.loads(text)
        return cls(doc["labels"], np.array(doc["matched"]), np.array(doc["total"]))


def match_rate_matrix(
    images: Sequence[TransmissionImage],
    labels: Sequence[str] | None = None,
    detector: DetectorParams = DetectorParams(),
    ratio: float = DEFAULT_RATIO,
) -> MatchRateMatrix:
    """Pairwise ratio-test survivor matrix over a set of images."""
    if len(images) < 2:
        raise ValueError("a match-rate matrix needs at least 2 images")
    if labels is None:
        labels = [f"img{i}" for i in range(len(images))]
    descs = []
    for img in images:
        kps = detect_keypoints(img, detector.threshold, detector.octaves)
        _, d = describe(img, kps)
        descs.append(d)
    n = len(images)
    matched = np.zeros((n, n), dtype=np.int64)
    total = np.zeros((n, n), dtype=np.int64)
    for i in range(n):
        total[i, :] = descs[i].shape[0]
        for j in range(n):
            survivors = ratio_test(match_knn(descs[i], descs[j]), ratio)
            matched[i, j] = len(survivors)
    return MatchRateMatrix(list(labels), matched, total)
