"""Salient region extraction from probability maps.

Bounding boxes are half-open integer rectangles (top, left, bottom, right):
the covered pixel rows are top..bottom-1 and columns left..right-1, so width
is right - left. The same convention is used for every box in this package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, EmptyRegionError
from .excitation import (
    Peak,
    backprop_seeds,
    detect_peaks,
    seed_pixels_above_mean,
)
from .graph import ActivationCache, NetworkGraph, mean_activation_map

MODE_DASR = "dasr"
MODE_DASR_STAR = "dasr-star"

Box = tuple[int, int, int, int]


@dataclass(frozen=True)
class DetectorConfig:
    tau: float = 0.1
    beta: float = 0.3
    mode: str = MODE_DASR_STAR

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ConfigError(f"tau must be in (0, 1), got {self.tau}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must be in [0, 1], got {self.beta}")
        if self.mode not in (MODE_DASR, MODE_DASR_STAR):
            raise ConfigError(f"mode must be {MODE_DASR!r} or {MODE_DASR_STAR!r}")


@dataclass(frozen=True)
class EllipseParams:
    """Shape estimate of a thresholded pixel set.

    Moments are central (about the pixel centroid), averaged over the set,
    and treat each pixel as a unit square, which adds 1/12 to the diagonal
    terms; a single-pixel set is fully degenerate instead (all moments and
    axes zero). Semi-axes are 2*sqrt(eigenvalue); orientation is the major
    axis angle in radians, measured from the +x (column) axis, in [0, pi).
    """

    center: tuple[float, float]  # (cy, cx)
    mxx: float
    mxy: float
    myy: float
    semi_major: float
    semi_minor: float
    orientation: float


@dataclass(frozen=True)
class SalientRegion:
    peak: Peak
    ellipse: EllipseParams
    bbox: Box
    score: float
    probability_mass: float


def fit_ellipse(prob_values: np.ndarray, tau: float) -> EllipseParams:
    """Second-moment ellipse of the pixels of a [0, 1] map at or above tau."""
    m = np.asarray(prob_values, dtype=np.float64)
    ys, xs = np.nonzero(m >= tau)
    n = ys.size
    if n == 0:
        raise EmptyRegionError(f"no pixel reaches tau={tau}")
    cy = float(ys.mean())
    cx = float(xs.mean())
    if n == 1:
        return EllipseParams((cy, cx), 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    dx = xs - cx
    dy = ys - cy
    mxx = float((dx * dx).mean()) + 1.0 / 12.0
    myy = float((dy * dy).mean()) + 1.0 / 12.0
    mxy = float((dx * dy).mean())
    evals, evecs = np.linalg.eigh(np.array([[mxx, mxy], [mxy, myy]]))
    evals = np.maximum(evals, 0.0)
    semi_minor = 2.0 * math.sqrt(float(evals[0]))
    semi_major = 2.0 * math.sqrt(float(evals[1]))
    vx, vy = float(evecs[0, 1]), float(evecs[1, 1])
    orientation = math.atan2(vy, vx) % math.pi
    return EllipseParams((cy, cx), mxx, mxy, myy, semi_major, semi_minor,
                         orientation)


def _ensure_min_size(lo: int, hi: int, min_size: int, bound: int) -> tuple[int, int]:
    if hi - lo >= min_size:
        return lo, hi
    grow = min_size - (hi - lo)
    lo -= grow // 2
    hi = lo + min_size
    if lo < 0:
        lo, hi = 0, min(min_size, bound)
    if hi > bound:
        hi, lo = bound, max(0, bound - min_size)
    return lo, hi


def ellipse_bbox(ellipse: EllipseParams, image_hw: tuple[int, int]) -> Box:
    """Circumscribed rectangle of the ellipse, clipped to the image.

    The axis-aligned half-extents of the ellipse are 2*sqrt(mxx) and
    2*sqrt(myy). Degenerate ellipses (any full axis under one pixel) are
    widened to at least a 3x3 box so descriptor pooling has support.
    """
    h, w = image_hw
    cy, cx = ellipse.center
    ey = 2.0 * math.sqrt(max(ellipse.myy, 0.0))
    ex = 2.0 * math.sqrt(max(ellipse.mxx, 0.0))
    # pixel r spans [r - 0.5, r + 0.5]; cover every pixel the extent touches
    top = math.ceil(cy - ey - 0.5)
    bottom = math.floor(cy + ey + 0.5) + 1
    left = math.ceil(cx - ex - 0.5)
    right = math.floor(cx + ex + 0.5) + 1
    top, bottom = max(0, top), min(h, bottom)
    left, right = max(0, left), min(w, right)
    if 2.0 * ellipse.semi_minor < 1.0:
        top, bottom = _ensure_min_size(top, bottom, min(3, h), h)
        left, right = _ensure_min_size(left, right, min(3, w), w)
    return top, left, bottom, right


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two half-open boxes."""
    it = max(a[0], b[0])
    il = max(a[1], b[1])
    ib = min(a[2], b[2])
    ir = min(a[3], b[3])
    inter = max(0.0, ib - it) * max(0.0, ir - il)
    area_a = max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1])
    area_b = max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0.0 else 0.0


def nms(regions: list[SalientRegion], beta: float) -> list[SalientRegion]:
    """Greedy suppression: walk regions best-first, discard any whose IoU
    with an already kept region exceeds beta. Score ties break on the lower
    (y, x) peak coordinate."""
    ordered = sorted(regions, key=lambda r: (-r.score, r.peak.y, r.peak.x))
    kept: list[SalientRegion] = []
    for region in ordered:
        if all(iou(region.bbox, k.bbox) <= beta for k in kept):
            kept.append(region)
    return kept


def detect_regions(graph: NetworkGraph, cache: ActivationCache,
                   config: DetectorConfig, chunk: int = 8,
                   diagnostics: dict | None = None) -> list[SalientRegion]:
    """Detect salient instance regions on one image's activation cache.

    Mode "dasr" seeds from 3x3 response peaks of the start layer's mean map;
    "dasr-star" seeds from every above-mean pixel and prunes the resulting
    regions with NMS at the config's beta.
    """
    mean_map = mean_activation_map(cache, graph.start)
    if config.mode == MODE_DASR:
        seeds = detect_peaks(mean_map)
    else:
        seeds = seed_pixels_above_mean(mean_map)
    maps = backprop_seeds(graph, cache, seeds, chunk=chunk)
    image_hw = cache["input"].shape[:2]
    regions: list[SalientRegion] = []
    skipped_mass = 0
    skipped_empty = 0
    for pm in maps:
        if pm.mass <= 0.0:
            skipped_mass += 1
            continue
        try:
            ellipse = fit_ellipse(pm.values, config.tau)
        except EmptyRegionError:
            skipped_empty += 1
            continue
        bbox = ellipse_bbox(ellipse, image_hw)
        regions.append(SalientRegion(peak=pm.source_peak, ellipse=ellipse,
                                     bbox=bbox, score=pm.source_peak.response,
                                     probability_mass=pm.mass))
    if config.mode == MODE_DASR_STAR:
        regions = nms(regions, config.beta)
    if diagnostics is not None:
        diagnostics["seeds"] = len(seeds)
        diagnostics["skipped_zero_mass"] = skipped_mass
        diagnostics["skipped_empty"] = skipped_empty
        diagnostics["regions"] = len(regions)
        diagnostics["dropped_mass"] = float(sum(pm.dropped_total for pm in maps))
    return regions
