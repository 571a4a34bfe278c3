"""Intensity-only segmenters: thresholding, k-means and fuzzy c-means.

All of them return a :class:`BaselineResult` whose ``mask`` is a binary
:class:`SliceImage` the same shape as the input.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from lunet.volume_io import SliceImage, quantize

OTSU = "otsu"
FIXED = "fixed"


@dataclass(frozen=True)
class ThresholdConfig:
    median_kernel: int = 3
    mode: str = OTSU
    level: float = 0.5
    morph_open_radius: int = 1
    morph_close_radius: int = 1

    def validate(self):
        if self.median_kernel < 1 or self.median_kernel % 2 == 0:
            raise ValueError("median_kernel must be an odd integer >= 1")
        if self.mode not in (OTSU, FIXED):
            raise ValueError(f"unknown threshold mode {self.mode!r}")
        if self.morph_open_radius < 0 or self.morph_close_radius < 0:
            raise ValueError("morphology radii must be >= 0")


@dataclass(frozen=True)
class ClusterConfig:
    k: int = 2
    max_iters: int = 100
    tol: float = 1e-6
    m: float = 2.0
    seed: int = 0
    foreground_rule: str = "brightest"

    def validate(self):
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if not self.m > 1:
            raise ValueError("fuzzifier m must exceed 1")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class BaselineResult:
    mask: SliceImage
    degenerate: bool = False
    threshold: float | None = None
    centers: np.ndarray | None = None
    objective: list[float] = field(default_factory=list)
    iterations: int = 0


# ---------------------------------------------------------------------------
# thresholding
# ---------------------------------------------------------------------------

def otsu_from_histogram(hist):
    """Threshold level ``t`` maximizing between-class variance.

    Class 0 holds levels ``<= t``. Returns ``(t, score)``; ties go to the
    lowest ``t``. Cumulative counts are integers, so each candidate score is
    computed from exact sums.
    """
    hist = np.asarray(hist, dtype=np.int64)
    levels = np.arange(hist.size, dtype=np.int64)
    total = int(hist.sum())
    c0 = np.cumsum(hist)
    s0 = np.cumsum(hist * levels)
    c1 = total - c0
    s1 = int(s0[-1]) - s0
    valid = (c0 > 0) & (c1 > 0)
    score = np.zeros(hist.size)
    c0v, c1v = c0[valid].astype(np.float64), c1[valid].astype(np.float64)
    w0, w1 = c0v / total, c1v / total
    d = s0[valid] / c0v - s1[valid] / c1v
    score[valid] = w0 * w1 * d * d
    t = int(np.argmax(score))
    return t, float(score[t])


def disk(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    return (r[:, None] ** 2 + r[None, :] ** 2) <= radius * radius


def _morph(mask, radius, op):
    if radius <= 0:
        return mask
    # edge padding keeps objects touching the border from being eroded by the frame
    padded = np.pad(mask, radius, mode="edge")
    out = op(padded, structure=disk(radius))
    return out[radius:-radius, radius:-radius]


def threshold_segment(img: SliceImage, cfg: ThresholdConfig = ThresholdConfig()) -> BaselineResult:
    """Median filter, global threshold, then morphological opening and closing.

    Foreground is the above-threshold class. A constant (filtered) image has
    no Otsu threshold; it yields an all-background mask with ``degenerate``
    set.
    """
    cfg.validate()
    pixels = img.pixels
    if cfg.median_kernel > 1:
        pixels = ndimage.median_filter(pixels, size=cfg.median_kernel, mode="reflect")
    if cfg.mode == OTSU:
        levels = quantize(pixels)
        if levels.min() == levels.max():
            return BaselineResult(img.with_pixels(np.zeros_like(pixels)), degenerate=True)
        t, _ = otsu_from_histogram(np.bincount(levels.ravel(), minlength=256))
        fg = levels > t
        threshold = t / 255.0
    else:
        fg = pixels > cfg.level
        threshold = cfg.level
    fg = _morph(fg, cfg.morph_open_radius, ndimage.binary_opening)
    fg = _morph(fg, cfg.morph_close_radius, ndimage.binary_closing)
    return BaselineResult(img.with_pixels(fg.astype(np.float32)), threshold=threshold)


# ---------------------------------------------------------------------------
# clustering on intensities
# ---------------------------------------------------------------------------

def _seed_centers(x, k, rng):
    """k-means++ seeding on a 1D sample; duplicate values collapse first."""
    distinct = np.unique(x)
    if distinct.size <= k:
        return distinct.astype(np.float64)
    centers = [float(x[rng.integers(x.size)])]
    for _ in range(1, k):
        d2 = np.min((x[:, None] - np.array(centers)[None, :]) ** 2, axis=1)
        total = d2.sum()
        if total == 0:
            break
        centers.append(float(x[rng.choice(x.size, p=d2 / total)]))
    return np.sort(np.array(centers))


def _check_descent(history, value):
    # monotone descent with a tiny allowance for floating-point rounding
    if history:
        assert value <= history[-1] + 1e-12 * max(1.0, abs(history[-1])), "objective increased"
    history.append(value)


def kmeans_1d(x, cfg: ClusterConfig = ClusterConfig()):
    """Lloyd's algorithm on scalar features.

    Returns ``(centers, labels, objective_history, iterations)``. The
    within-cluster sum of squares is recorded after every assignment step.
    """
    cfg.validate()
    x = np.asarray(x, dtype=np.float64).ravel()
    rng = np.random.default_rng(cfg.seed)
    centers = _seed_centers(x, cfg.k, rng)
    history: list[float] = []
    it = 0
    for it in range(1, cfg.max_iters + 1):
        labels = np.argmin(np.abs(x[:, None] - centers[None, :]), axis=1)
        _check_descent(history, float(np.sum((x - centers[labels]) ** 2)))
        new = centers.copy()
        for c in range(centers.size):
            sel = labels == c
            if sel.any():
                new[c] = x[sel].mean()
        shift = np.max(np.abs(new - centers))
        centers = new
        if shift < cfg.tol:
            break
    labels = np.argmin(np.abs(x[:, None] - centers[None, :]), axis=1)
    return centers, labels, history, it


def fcm_memberships(x, centers, m):
    """Membership of every sample in every cluster; rows sum to 1.

    A sample sitting exactly on one or more centres belongs to those centres
    only, shared equally.
    """
    d = np.abs(np.asarray(x, dtype=np.float64)[:, None] - np.asarray(centers)[None, :])
    zero = d == 0
    hit = zero.any(axis=1)
    u = np.empty_like(d)
    with np.errstate(divide="ignore"):
        inv = d[~hit] ** (-2.0 / (m - 1.0))
    u[~hit] = inv / inv.sum(axis=1, keepdims=True)
    u[hit] = zero[hit] / zero[hit].sum(axis=1, keepdims=True)
    return u


def fcm_1d(x, cfg: ClusterConfig = ClusterConfig()):
    """Fuzzy c-means on scalar features.

    Returns ``(centers, memberships, objective_history, iterations)``; the
    objective ``sum u^m d^2`` is recorded after each membership update.
    """
    cfg.validate()
    x = np.asarray(x, dtype=np.float64).ravel()
    rng = np.random.default_rng(cfg.seed)
    centers = _seed_centers(x, cfg.k, rng)
    history: list[float] = []
    u = fcm_memberships(x, centers, cfg.m)
    it = 0
    for it in range(1, cfg.max_iters + 1):
        u = fcm_memberships(x, centers, cfg.m)
        um = u ** cfg.m
        _check_descent(history, float(np.sum(um * (x[:, None] - centers[None, :]) ** 2)))
        new = (um * x[:, None]).sum(axis=0) / um.sum(axis=0)
        shift = np.max(np.abs(new - centers))
        centers = new
        if shift < cfg.tol:
            break
    u = fcm_memberships(x, centers, cfg.m)
    return centers, u, history, it


def _brightest_mask(img, labels, centers):
    if centers.size < 2:
        # a single intensity carries no foreground/background contrast
        return np.zeros_like(img.pixels), True
    fg = int(np.argmax(centers))
    return (labels.reshape(img.pixels.shape) == fg).astype(np.float32), False


def kmeans_segment(img: SliceImage, cfg: ClusterConfig = ClusterConfig()) -> BaselineResult:
    centers, labels, history, it = kmeans_1d(img.pixels, cfg)
    mask, degenerate = _brightest_mask(img, labels, centers)
    return BaselineResult(img.with_pixels(mask), degenerate, centers=centers, objective=history, iterations=it)


def fuzzy_cmeans_segment(img: SliceImage, cfg: ClusterConfig = ClusterConfig()) -> BaselineResult:
    centers, u, history, it = fcm_1d(img.pixels, cfg)
    labels = np.argmax(u, axis=1)
    mask, degenerate = _brightest_mask(img, labels, centers)
    return BaselineResult(img.with_pixels(mask), degenerate, centers=centers, objective=history, iterations=it)
