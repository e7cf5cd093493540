"""Adaptive binarization of residual maps and defect-centred cropping.

The residual map is normalised to a saliency map in [0, 1], thresholded at a
descending sweep of levels, and the lowest threshold of the longest run of
stable component counts is taken as the operating point.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import InvalidInputError

EIGHT = np.ones((3, 3), dtype=bool)
CROSS = ndimage.generate_binary_structure(2, 1)
MIN_COMPONENT_PX = 5
MAX_CROPS = 3


@dataclass
class SweepResult:
    thresholds: np.ndarray  # (K+1,) strictly descending
    counts: np.ndarray      # (K+1,) component counts
    masks: np.ndarray       # (K+1, H, W) bool

    def __len__(self):
        return len(self.thresholds)


@dataclass
class Plateau:
    start: int
    stop: int  # inclusive
    epsilon: int
    mean_iou: float

    @property
    def length(self):
        return self.stop - self.start + 1


@dataclass
class CropResult:
    subimage: np.ndarray
    soft_mask: np.ndarray
    window: tuple  # (x, y, w, h)
    stats: dict = field(default_factory=dict)


def normalize(R, p1=50.0, p2=99.5):
    """Percentile-normalise ``R`` into [0, 1]; a flat map gives all zeros."""
    if not 0 <= p1 < p2 <= 100:
        raise InvalidInputError(f"need 0 <= p1 < p2 <= 100, got p1={p1}, p2={p2}")
    R = np.asarray(R, dtype=np.float64)
    if not np.all(np.isfinite(R)):
        raise InvalidInputError("score map contains non-finite values")
    lo, hi = np.percentile(R, [p1, p2])
    if hi <= lo:
        return np.zeros_like(R)
    return np.clip((R - lo) / (hi - lo), 0.0, 1.0)


def connected_components(B):
    """8-connected labelling; returns ``(count, labels)`` with labels 1..count."""
    labels, count = ndimage.label(np.asarray(B, dtype=bool), structure=EIGHT)
    return int(count), labels


def sweep(S, K=64):
    """Threshold ``S`` at t_k = 1 − k/K, k = 0..K, and count components at each."""
    if K < 8:
        raise InvalidInputError(f"sweep needs K >= 8, got {K}")
    S = np.asarray(S, dtype=np.float64)
    thresholds = 1.0 - np.arange(K + 1) / K
    masks = S[None] >= thresholds[:, None, None]
    counts = np.array([connected_components(m)[0] for m in masks])
    return SweepResult(thresholds, counts, masks)


def iou(a, b):
    """Intersection over union; two empty masks count as identical."""
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def _mean_iou(masks, start, stop):
    if stop == start:
        return 0.0
    return float(np.mean([iou(masks[k], masks[k + 1]) for k in range(start, stop)]))


def stable_runs(counts, epsilon):
    """Maximal index intervals [a, b] whose consecutive counts differ by ≤ ε."""
    counts = np.asarray(counts)
    breaks = np.flatnonzero(np.abs(np.diff(counts)) > epsilon)
    starts = np.concatenate([[0], breaks + 1])
    stops = np.concatenate([breaks, [len(counts) - 1]])
    return list(zip(starts.tolist(), stops.tolist()))


def find_plateau(result, epsilon=0):
    """Longest stable run; ties go to higher mean adjacent IoU, then to higher thresholds."""
    if epsilon not in (0, 1):
        raise InvalidInputError(f"epsilon must be 0 or 1, got {epsilon}")
    if len(result) == 0:
        raise InvalidInputError("empty sweep")
    best = None
    for a, b in stable_runs(result.counts, epsilon):
        m = _mean_iou(result.masks, a, b)
        key = (b - a, m)
        # runs arrive in order of descending threshold, so strict > keeps the earlier one
        if best is None or key > best[0]:
            best = (key, Plateau(a, b, epsilon, m))
    return best[1]


def adaptive_threshold(plateau, result):
    """t* = the smallest threshold inside the plateau."""
    return float(result.thresholds[plateau.stop])


def postprocess(B):
    """Open with a radius-1 cross, fill holes, drop components under 5 px."""
    B = np.asarray(B, dtype=bool)
    M = ndimage.binary_opening(B, structure=CROSS)
    M = ndimage.binary_fill_holes(M)
    count, labels = connected_components(M)
    if count:
        sizes = ndimage.sum_labels(M, labels, index=np.arange(1, count + 1))
        keep = np.concatenate([[False], sizes >= MIN_COMPONENT_PX])
        M = keep[labels]
    return M


def window_origin(center, size, extent):
    """Start index of a ``size`` window centred on ``center`` and clamped to [0, extent)."""
    start = int(np.floor(center - (size - 1) / 2 + 0.5))
    return min(max(start, 0), extent - size)


def crop(image, S, M, crop_px=None, max_crops=MAX_CROPS):
    """Defect-centred windows around the largest components of ``M``.

    Returns up to ``max_crops`` results in order of descending area; an empty
    mask yields an empty list.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    crop_px = h // 4 if crop_px is None else int(crop_px)
    if not 0 < crop_px <= min(h, w):
        raise InvalidInputError(f"crop size {crop_px} does not fit a {h}x{w} image")
    count, labels = connected_components(M)
    if count == 0:
        return []
    idx = np.arange(1, count + 1)
    areas = ndimage.sum_labels(np.ones_like(labels), labels, index=idx)
    centroids = ndimage.center_of_mass(np.ones_like(labels), labels, index=idx)
    order = sorted(range(count), key=lambda i: (-areas[i], i))[:max_crops]
    out = []
    for i in order:
        cy, cx = centroids[i]
        y0 = window_origin(cy, crop_px, h)
        x0 = window_origin(cx, crop_px, w)
        sl = (slice(y0, y0 + crop_px), slice(x0, x0 + crop_px))
        ys, xs = np.nonzero(labels == i + 1)
        stats = {"area": int(areas[i]), "centroid": (float(cy), float(cx)),
                 "bbox": (int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1),
                          int(ys.max() - ys.min() + 1))}
        out.append(CropResult(image[sl].copy(), np.asarray(S, dtype=np.float64)[sl].copy(),
                              (x0, y0, crop_px, crop_px), stats))
    return out


def binarize(R, p1=50.0, p2=99.5, K=64, epsilon=0):
    """Residual map → (saliency, final mask, t*, plateau, sweep)."""
    S = normalize(R, p1, p2)
    result = sweep(S, K)
    plateau = find_plateau(result, epsilon)
    t_star = adaptive_threshold(plateau, result)
    M = postprocess(S >= t_star)
    return S, M, t_star, plateau, result
