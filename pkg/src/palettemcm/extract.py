"""Image loading and K-means palette extraction in CIELAB."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, UnidentifiedImageError

from .color import MAX_PALETTE, Palette, srgb_array_to_lab
from .errors import DecodeError, InvalidColor, IoError, TooFewPoints

MAX_PIXELS = 65_536


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    """8-bit sRGB image; ``pixels`` has shape (height, width, 3)."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"expected (h, w, 3) pixel array, got shape {px.shape}")
        object.__setattr__(self, "pixels", np.ascontiguousarray(px, dtype=np.uint8))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def flat(self) -> np.ndarray:
        """Row-major (width*height, 3) view of the pixels."""
        return self.pixels.reshape(-1, 3)

    def save(self, path) -> None:
        Image.fromarray(self.pixels, mode="RGB").save(path)


def load_image(path) -> ImageBuffer:
    """Decode PNG/JPEG to 8-bit sRGB, compositing any alpha over white."""
    if not os.path.isfile(path):
        raise IoError(f"no such image file: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("RGBA", "LA", "PA") or (im.mode == "P" and "transparency" in im.info):
                rgba = im.convert("RGBA")
                white = Image.new("RGBA", rgba.size, (255, 255, 255, 255))
                rgb = Image.alpha_composite(white, rgba).convert("RGB")
            else:
                rgb = im.convert("RGB")
    except (UnidentifiedImageError, SyntaxError, ValueError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from None
    except OSError as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from None
    return ImageBuffer(np.asarray(rgb, dtype=np.uint8))


def to_grayscale(img: ImageBuffer) -> ImageBuffer:
    px = img.pixels.astype(np.float64)
    y = np.rint(0.299 * px[..., 0] + 0.587 * px[..., 1] + 0.114 * px[..., 2])
    y = np.clip(y, 0, 255).astype(np.uint8)
    return ImageBuffer(np.repeat(y[..., None], 3, axis=2))


# ---------------------------------------------------------------------------
# K-means
# ---------------------------------------------------------------------------

@dataclass
class KmeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    objective: float
    iterations: int
    initial_centroids: np.ndarray = field(repr=False)
    objective_trace: list[float] = field(default_factory=list, repr=False)

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=len(self.centroids))


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(points, points[chosen]).min(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining points coincide with a centroid
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        chosen.append(idx)
        d2 = np.minimum(d2, _sq_dists(points, points[idx : idx + 1])[:, 0])
    return points[chosen].copy()


def _objective(points, centroids, assignments) -> float:
    diff = points - centroids[assignments]
    return float(np.einsum("nd,nd->", diff, diff))


def lloyd(points: np.ndarray, init: np.ndarray, max_iter: int) -> KmeansResult:
    """Lloyd iterations from fixed initial centroids.

    Stops when assignments stop changing or after ``max_iter`` updates. A
    cluster left empty by an assignment step is moved onto the point that is
    farthest from its own centroid.
    """
    centroids = np.array(init, dtype=np.float64, copy=True)
    k = len(centroids)
    assignments = None
    trace: list[float] = []
    iterations = 0
    while iterations < max_iter:
        new_assign = np.argmin(_sq_dists(points, centroids), axis=1)
        if assignments is not None and np.array_equal(new_assign, assignments):
            break
        assignments = new_assign
        iterations += 1
        counts = np.bincount(assignments, minlength=k)
        for j in range(k):
            if counts[j]:
                centroids[j] = points[assignments == j].mean(axis=0)
        empty = np.flatnonzero(counts == 0)
        if len(empty):
            d2 = np.einsum("nd,nd->n", points - centroids[assignments], points - centroids[assignments])
            taken: set[int] = set()
            for j in empty:
                order = np.argsort(-d2, kind="stable")
                idx = next(int(i) for i in order if int(i) not in taken)
                taken.add(idx)
                centroids[j] = points[idx]
        trace.append(_objective(points, centroids, assignments))
    if assignments is None:
        assignments = np.argmin(_sq_dists(points, centroids), axis=1)
    return KmeansResult(
        centroids=centroids,
        assignments=assignments.astype(np.int64),
        objective=_objective(points, centroids, assignments),
        iterations=iterations,
        initial_centroids=np.array(init, dtype=np.float64),
        objective_trace=trace,
    )


def kmeans_lab(points, k: int, max_iter: int = 100, seed: int = 0) -> KmeansResult:
    """K-means with k-means++ seeding; deterministic in (points order, k, seed)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if k < 1:
        raise ValueError("k must be >= 1")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    if len(pts) < k:
        raise TooFewPoints(f"{len(pts)} points cannot form {k} clusters")
    rng = np.random.default_rng(seed)
    return lloyd(pts, kmeans_pp_init(pts, k, rng), max_iter)


# ---------------------------------------------------------------------------
# Palette extraction
# ---------------------------------------------------------------------------

def order_clusters(centroids: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Indices sorted by descending population, then ascending L, a, b."""
    keys = (centroids[:, 2], centroids[:, 1], centroids[:, 0], -counts)
    return np.lexsort(keys)


def extract_palette(
    img: ImageBuffer,
    k: int = 5,
    seed: int = 0,
    max_pixels: int | None = MAX_PIXELS,
    max_iter: int = 100,
) -> Palette:
    """Cluster an image's colors and return the k centroids, most populous first.

    Pass ``max_pixels=None`` to cluster every pixel instead of a strided sample.
    Images with fewer than k distinct colors yield that many colors.
    """
    if not 1 <= k <= MAX_PALETTE:
        raise InvalidColor(f"k={k} outside [1, {MAX_PALETTE}]")
    rgb = img.flat()
    if max_pixels is not None and len(rgb) > max_pixels:
        step = -(-len(rgb) // max_pixels)
        rgb = rgb[::step]
    lab = srgb_array_to_lab(rgb)
    n_distinct = len(np.unique(rgb, axis=0))
    res = kmeans_lab(lab, min(k, n_distinct), max_iter=max_iter, seed=seed)

    centroids, counts = _merge_duplicates(res.centroids, res.counts)
    order = order_clusters(centroids, counts)
    return Palette.from_array(centroids[order])


def _merge_duplicates(centroids: np.ndarray, counts: np.ndarray):
    keep: list[np.ndarray] = []
    merged: list[int] = []
    for c, n in zip(centroids, counts):
        for i, kc in enumerate(keep):
            if np.array_equal(kc, c):
                merged[i] += int(n)
                break
        else:
            keep.append(c)
            merged.append(int(n))
    return np.array(keep), np.array(merged)
