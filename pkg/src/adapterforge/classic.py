"""Training-free segmentation baselines: Otsu, Canny, and a hybrid of both.

The hybrid pipeline takes the sky from an Otsu split (whichever intensity
class owns the top image row), derives Canny thresholds from a second Otsu
pass over the non-sky region, closes the detected edges morphologically and
promotes filled closed contours above a minimum area to rocks.  All knobs
are exposed as keyword arguments (and CLI flags) but default to values that
keep the pipeline parameter-free.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from . import kernels
from .errors import DegenerateImageError, ShapeError

TERRAIN, ROCK, SKY = 0, 1, 2

MIN_AREA_BASE = 5          # pixels at 48x48; scales linearly with pixel count
_EIGHT = np.ones((3, 3), dtype=np.int8)


def min_area_for(shape):
    return max(1, round(MIN_AREA_BASE * (shape[0] * shape[1]) / (48 * 48)))


def otsu_threshold(img: np.ndarray) -> int:
    """Threshold t in 1..255 maximizing between-class variance; pixels < t
    fall in the low class.  Smallest maximizer on ties."""
    a = np.asarray(img)
    if a.size == 0:
        raise ShapeError("empty image")
    hist = np.bincount(a.astype(np.uint8).ravel(), minlength=256).astype(np.float64)
    total = hist.sum()
    if np.count_nonzero(hist) < 2:
        raise DegenerateImageError("constant image: Otsu threshold undefined")
    levels = np.arange(256, dtype=np.float64)
    cum_n = np.cumsum(hist)
    cum_s = np.cumsum(hist * levels)
    n0 = cum_n[:-1]          # pixels < t for t = 1..255
    s0 = cum_s[:-1]
    n1 = total - n0
    s1 = cum_s[-1] - s0
    valid = (n0 > 0) & (n1 > 0)
    sigma_b = np.full(255, -1.0)
    mu0 = np.divide(s0, n0, out=np.zeros_like(s0), where=valid)
    mu1 = np.divide(s1, n1, out=np.zeros_like(s1), where=valid)
    sigma_b[valid] = (n0 * n1)[valid] / (total * total) * (mu0 - mu1)[valid] ** 2
    return int(np.argmax(sigma_b)) + 1


def _gaussian_blur(img: np.ndarray, k: int) -> np.ndarray:
    if k % 2 == 0:
        raise ShapeError(f"blur kernel size must be odd, got {k}")
    if k <= 1:
        return img.astype(np.float64)
    sigma = k / 3.0
    x = np.arange(k, dtype=np.float64) - (k - 1) / 2.0
    g = np.exp(-x * x / (2.0 * sigma * sigma))
    g /= g.sum()
    out = img.astype(np.float64)
    out = ndimage.correlate1d(out, g, axis=0, mode="reflect")
    out = ndimage.correlate1d(out, g, axis=1, mode="reflect")
    return out


def canny(img: np.ndarray, low: float, high: float, blur_k: int = 5) -> np.ndarray:
    """Blur -> Sobel -> 4-direction non-maximum suppression -> hysteresis."""
    if low > high:
        raise ShapeError(f"low threshold {low} exceeds high {high}")
    a = _gaussian_blur(np.asarray(img, dtype=np.float64), blur_k)
    pad = np.pad(a, 1, mode="reflect")
    gx = (pad[:-2, 2:] + 2 * pad[1:-1, 2:] + pad[2:, 2:]
          - pad[:-2, :-2] - 2 * pad[1:-1, :-2] - pad[2:, :-2])
    gy = (pad[2:, :-2] + 2 * pad[2:, 1:-1] + pad[2:, 2:]
          - pad[:-2, :-2] - 2 * pad[:-2, 1:-1] - pad[:-2, 2:])
    mag = np.hypot(gx, gy).astype(np.float32)
    ang = np.degrees(np.arctan2(gy, gx)) % 180.0
    dirbin = np.zeros(ang.shape, dtype=np.uint8)
    dirbin[(ang >= 22.5) & (ang < 67.5)] = 1
    dirbin[(ang >= 67.5) & (ang < 112.5)] = 2
    dirbin[(ang >= 112.5) & (ang < 157.5)] = 3
    thin = kernels.nms(mag, dirbin)
    strong = thin >= high
    weak = thin >= low
    return np.asarray(kernels.hysteresis(strong, weak), dtype=bool)


def _split_sky(img: np.ndarray):
    """First Otsu pass; the intensity class owning the top row is the sky."""
    t = otsu_threshold(img)
    low_side = img < t
    sky_is_low = low_side[0].sum() * 2 > img.shape[1]
    sky = low_side if sky_is_low else ~low_side
    return sky, t


def classify_otsu(img: np.ndarray, min_area: int | None = None) -> np.ndarray:
    """Two-stage Otsu segmentation into terrain/rock/sky."""
    img = np.asarray(img, dtype=np.uint8)
    if min_area is None:
        min_area = min_area_for(img.shape)
    sky, _ = _split_sky(img)
    out = np.full(img.shape, TERRAIN, dtype=np.uint8)
    out[sky] = SKY
    ground = img[~sky]
    try:
        t2 = otsu_threshold(ground)
    except DegenerateImageError:
        return out  # flat ground: nothing to call a rock
    bright = img >= t2
    candidates = bright if bright[~sky].sum() * 2 <= ground.size else ~bright
    candidates &= ~sky
    labels, nlab = ndimage.label(candidates, structure=_EIGHT)
    if nlab:
        areas = np.bincount(labels.ravel())
        keep = np.zeros(nlab + 1, dtype=bool)
        keep[1:] = areas[1:] >= min_area
        out[keep[labels]] = ROCK
    return out


def classify_hybrid(img: np.ndarray, min_area: int | None = None,
                    blur_k: int = 5) -> np.ndarray:
    """Otsu sky mask + Canny-derived closed contours as rocks."""
    img = np.asarray(img, dtype=np.uint8)
    if min_area is None:
        min_area = min_area_for(img.shape)
    sky, _ = _split_sky(img)
    out = np.full(img.shape, TERRAIN, dtype=np.uint8)
    out[sky] = SKY
    ground = img[~sky]
    try:
        high = float(otsu_threshold(ground))
    except DegenerateImageError:
        return out
    edges = canny(img, low=high / 2.0, high=high, blur_k=blur_k)
    closed = ndimage.binary_closing(edges, structure=_EIGHT, iterations=1)
    interior = ndimage.binary_fill_holes(closed) & ~closed
    labels, nlab = ndimage.label(interior, structure=_EIGHT)
    if nlab:
        areas = np.bincount(labels.ravel())
        keep = np.zeros(nlab + 1, dtype=bool)
        keep[1:] = areas[1:] >= min_area
        rocks = keep[labels]
        # re-attach the one-pixel contour ring around each kept interior
        rocks = ndimage.binary_dilation(rocks, structure=_EIGHT) & (closed | rocks)
        rocks &= ~sky
        out[rocks] = ROCK
    return out


def classify_canny(img: np.ndarray, blur_k: int = 5) -> np.ndarray:
    """Edges-as-rocks reading of Canny alone: no sky class, no shape filling."""
    img = np.asarray(img, dtype=np.uint8)
    try:
        high = float(otsu_threshold(img))
    except DegenerateImageError:
        return np.full(img.shape, TERRAIN, dtype=np.uint8)
    edges = canny(img, low=high / 2.0, high=high, blur_k=blur_k)
    out = np.full(img.shape, TERRAIN, dtype=np.uint8)
    out[edges] = ROCK
    return out


CLASSIC_METHODS = {
    "otsu": classify_otsu,
    "canny": classify_canny,
    "hybrid": classify_hybrid,
}
