"""Palette and image comparison metrics.

DCCW compares two palettes through polylines drawn over their colors after
each palette has been reordered along its shortest visiting path. The image
metrics (Bhattacharyya histogram distance, PSNR, SSIM) work on ImageBuffer.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.ndimage import correlate1d

from .color import MAX_PALETTE, as_lab_array
from .errors import ImageTooSmall, PaletteTooLarge, ShapeMismatch
from .extract import ImageBuffer

INF = float("inf")


@dataclass
class Histogram3D:
    bins_per_axis: int
    counts: np.ndarray
    normalized: bool = True


@dataclass
class MetricsRecord:
    hist_bha: float
    dccw: float
    psnr: float
    ssim: float


# ---------------------------------------------------------------------------
# DCCW
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _permutations(k: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(k))), dtype=np.int64).reshape(-1, k)


def path_length(colors: np.ndarray) -> float:
    return float(np.linalg.norm(np.diff(colors, axis=0), axis=1).sum())


def sort_palette_min_path(p) -> np.ndarray:
    """Reorder colors along the shortest Hamiltonian path (exhaustive search).

    Ties go to the lexicographically first permutation; the result is then
    oriented so the endpoint with the smaller L comes first.
    """
    colors = as_lab_array(p)
    k = len(colors)
    if k > MAX_PALETTE:
        raise PaletteTooLarge(f"palette of {k} colors exceeds {MAX_PALETTE}")
    if k <= 2:
        order = np.arange(k)
    else:
        dist = np.linalg.norm(colors[:, None] - colors[None], axis=-1)
        perms = _permutations(k)
        lengths = dist[perms[:, :-1], perms[:, 1:]].sum(axis=1)
        best = lengths.min()
        order = perms[int(np.flatnonzero(lengths <= best + 1e-9 * max(1.0, best))[0])]
    out = colors[order]
    if out[-1, 0] < out[0, 0]:
        out = out[::-1]
    return out.copy()


def _point_segment_dists(c: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = np.einsum("sd,sd->s", ab, ab)
    t = np.where(denom > 0, np.einsum("sd,sd->s", c - a, ab) / np.where(denom > 0, denom, 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.linalg.norm(c - proj, axis=1)


def closest_point_to_polyline(c, poly) -> float:
    c = np.asarray(as_lab_array(c)[0])
    pts = as_lab_array(poly)
    if len(pts) == 0:
        raise ValueError("polyline must be non-empty")
    if len(pts) == 1:
        return float(np.linalg.norm(c - pts[0]))
    return float(_point_segment_dists(c, pts[:-1], pts[1:]).min())


def dccw(pa, pb) -> float:
    """Symmetric summed closest-point distance between two palettes' polylines."""
    a = sort_palette_min_path(pa)
    b = sort_palette_min_path(pb)
    total = 0.0
    for c in a:
        total += closest_point_to_polyline(c, b)
    for c in b:
        total += closest_point_to_polyline(c, a)
    return total


# ---------------------------------------------------------------------------
# Histograms
# ---------------------------------------------------------------------------

def color_histogram(img: ImageBuffer, bins_per_axis: int = 8) -> Histogram3D:
    if not 2 <= bins_per_axis <= 32:
        raise ValueError(f"bins_per_axis={bins_per_axis} outside [2, 32]")
    idx = img.flat().astype(np.int64) * bins_per_axis // 256
    flat = (idx[:, 0] * bins_per_axis + idx[:, 1]) * bins_per_axis + idx[:, 2]
    counts = np.bincount(flat, minlength=bins_per_axis**3).astype(np.float64)
    return Histogram3D(bins_per_axis, counts / counts.sum(), True)


def bhattacharyya_distance(p: Histogram3D, q: Histogram3D) -> float:
    if p.bins_per_axis != q.bins_per_axis or p.counts.shape != q.counts.shape:
        raise ShapeMismatch("histograms have different binning")
    bc = float(np.sqrt(p.counts * q.counts).sum())
    return math.sqrt(max(0.0, 1.0 - min(bc, 1.0)))


# ---------------------------------------------------------------------------
# PSNR / SSIM
# ---------------------------------------------------------------------------

def _check_same_shape(a: ImageBuffer, b: ImageBuffer) -> None:
    if a.pixels.shape != b.pixels.shape:
        raise ShapeMismatch(f"image sizes differ: {a.width}x{a.height} vs {b.width}x{b.height}")


def psnr(a: ImageBuffer, b: ImageBuffer) -> float:
    _check_same_shape(a, b)
    diff = a.pixels.astype(np.float64) - b.pixels.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return INF
    return 10.0 * math.log10(255.0**2 / mse)


def _luma(img: ImageBuffer) -> np.ndarray:
    px = img.pixels.astype(np.float64)
    return 0.299 * px[..., 0] + 0.587 * px[..., 1] + 0.114 * px[..., 2]


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


def _valid_filter(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    pad = (len(w) - 1) // 2
    y = correlate1d(correlate1d(x, w, axis=0, mode="reflect"), w, axis=1, mode="reflect")
    return y[pad:-pad, pad:-pad]


def ssim(a: ImageBuffer, b: ImageBuffer, win: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM of the luma channels over every fully-covered 11x11 window."""
    _check_same_shape(a, b)
    if min(a.width, a.height) < win:
        raise ImageTooSmall(f"SSIM needs both sides >= {win}, got {a.width}x{a.height}")
    x, y = _luma(a), _luma(b)
    w = _gaussian_window(win, sigma)
    c1 = (0.01 * 255) ** 2
    c2 = (0.03 * 255) ** 2
    mx, my = _valid_filter(x, w), _valid_filter(y, w)
    sxx = _valid_filter(x * x, w) - mx * mx
    syy = _valid_filter(y * y, w) - my * my
    sxy = _valid_filter(x * y, w) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def accuracy_at_1(predicted, target) -> float:
    p = np.asarray(predicted).ravel()
    t = np.asarray(target).ravel()
    if p.shape != t.shape or len(p) == 0:
        raise ShapeMismatch(f"prediction/target lengths {len(p)} and {len(t)} must match and be >= 1")
    return float(np.mean(p == t))


def image_pair_metrics(gen: ImageBuffer, ref: ImageBuffer, ref_palette=None, seed: int = 0) -> MetricsRecord:
    """All color-control metrics for one generated/reference image pair."""
    from .extract import extract_palette

    _check_same_shape(gen, ref)
    if ref_palette is None:
        ref_palette = extract_palette(ref, 5, seed=seed)
    return MetricsRecord(
        hist_bha=bhattacharyya_distance(color_histogram(gen), color_histogram(ref)),
        dccw=dccw(extract_palette(gen, 5, seed=seed), ref_palette),
        psnr=psnr(gen, ref),
        ssim=ssim(gen, ref),
    )
