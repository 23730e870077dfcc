"""Palette-Text-Image manifests and 2-D projections of their palette colors."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .color import Palette, dequantize_array, lab_array_to_srgb, quantize_array, parse_palette_obj
from .errors import (
    DecodeError,
    DuplicateId,
    EmptyCorpus,
    InvalidColor,
    InvalidConfig,
    IoError,
    MissingEmbedding,
    ParseError,
    ShapeMismatch,
    TooManyPoints,
)
from .extract import extract_palette, load_image
from .mcm.io import read_pteb, stub_condition_encoder, write_pteb

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
TSNE_MAX_POINTS = 20_000
MANIFEST_FIELDS = ("id", "image_path", "caption", "palette", "split", "cond_path")


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.8
    val: float = 0.1
    test: float = 0.1

    def __post_init__(self) -> None:
        parts = (self.train, self.val, self.test)
        if any(not 0.0 <= f <= 1.0 for f in parts) or abs(sum(parts) - 1.0) > 1e-9:
            raise InvalidConfig(f"split fractions {parts} must lie in [0, 1] and sum to 1")

    @classmethod
    def parse(cls, text: str) -> "SplitSpec":
        try:
            parts = [float(x) for x in text.split(",")]
        except ValueError:
            raise InvalidConfig(f"bad split {text!r}; expected e.g. 0.8,0.1,0.1") from None
        if len(parts) != 3:
            raise InvalidConfig(f"bad split {text!r}; expected three fractions")
        return cls(*parts)

    def counts(self, n: int) -> tuple[int, int, int]:
        n_train = int(round(self.train * n))
        n_val = min(int(round(self.val * n)), n - n_train)
        return n_train, n_val, n - n_train - n_val


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    image_path: str
    caption: str
    palette: Palette
    split: str
    cond_path: Optional[str] = None

    def __post_init__(self) -> None:
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")

    def to_json(self) -> str:
        obj = {
            "id": self.id,
            "image_path": self.image_path,
            "caption": self.caption,
            "palette": self.palette.to_json_obj(),
            "split": self.split,
            "cond_path": self.cond_path,
        }
        return json.dumps(obj, ensure_ascii=False)

    @classmethod
    def from_obj(cls, obj) -> "ManifestRecord":
        if not isinstance(obj, dict) or set(obj) != set(MANIFEST_FIELDS):
            raise ValueError(f"record must have exactly the fields {list(MANIFEST_FIELDS)}")
        for key in ("id", "image_path", "caption", "split"):
            if not isinstance(obj[key], str):
                raise ValueError(f"{key} must be a string")
        if obj["cond_path"] is not None and not isinstance(obj["cond_path"], str):
            raise ValueError("cond_path must be a string or null")
        colors = parse_palette_obj(obj["palette"])
        return cls(obj["id"], obj["image_path"], obj["caption"], Palette(tuple(colors)), obj["split"], obj["cond_path"])


def read_captions(path) -> dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read captions file {path}: {exc}") from None
    captions = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        name, sep, caption = line.partition("\t")
        if not sep:
            raise ParseError("expected 'filename<TAB>caption'", line=lineno)
        captions[name.strip()] = caption.strip()
    return captions


def assign_splits(ids: Sequence[str], split: SplitSpec, seed: int) -> dict[str, str]:
    """Seeded shuffle of the sorted ids, then contiguous train/val/test slices."""
    ordered = sorted(ids)
    perm = np.random.default_rng(seed).permutation(len(ordered))
    n_train, n_val, _ = split.counts(len(ordered))
    out = {}
    for rank, i in enumerate(perm):
        out[ordered[i]] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return out


@dataclass
class BuildReport:
    records: list[ManifestRecord]
    skipped: list[str]


def build_manifest(
    image_dir,
    captions_file,
    k: int = 5,
    split: SplitSpec = SplitSpec(),
    seed: int = 0,
    relative_to=None,
) -> BuildReport:
    """Extract a k-color palette per image and assign seeded splits.

    ``image_path`` values are written relative to ``relative_to`` (default:
    the current directory). Undecodable images are logged and skipped.
    """
    image_dir = Path(image_dir)
    if not image_dir.is_dir():
        raise IoError(f"image directory not found: {image_dir}")
    captions = read_captions(captions_file)
    base = Path(relative_to) if relative_to is not None else Path.cwd()
    files = sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())
    palettes, skipped = {}, []
    paths = {}
    for path in files:
        try:
            img = load_image(path)
        except (DecodeError, IoError) as exc:
            log.warning("skipping %s: %s", path.name, exc)
            skipped.append(path.name)
            continue
        rid = path.stem
        if rid in palettes:
            raise DuplicateId(f"two images share the id {rid!r}")
        palettes[rid] = extract_palette(img, k, seed=seed)
        paths[rid] = os.path.relpath(path, base)
        if path.name not in captions:
            log.warning("no caption for %s; using an empty caption", path.name)
    if not palettes:
        raise EmptyCorpus(f"no decodable images in {image_dir}")
    if skipped:
        log.warning("skipped %d undecodable image(s)", len(skipped))
    splits = assign_splits(list(palettes), split, seed)
    records = [
        ManifestRecord(rid, paths[rid], captions.get(Path(paths[rid]).name, ""), palettes[rid], splits[rid])
        for rid in sorted(palettes)
    ]
    return BuildReport(records, skipped)


def write_manifest(records: Sequence[ManifestRecord], path) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for r in sorted(records, key=lambda r: r.id):
                fh.write(r.to_json() + "\n")
    except OSError as exc:
        raise IoError(f"cannot write manifest {path}: {exc}") from None


def load_manifest(path) -> list[ManifestRecord]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IoError(f"cannot read manifest {path}: {exc}") from None
    records, seen = [], set()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = ManifestRecord.from_obj(json.loads(line))
        except (json.JSONDecodeError, ValueError, TypeError, InvalidColor) as exc:
            raise ParseError(str(exc), line=lineno) from None
        if rec.id in seen:
            raise DuplicateId(f"line {lineno}: duplicate id {rec.id!r}")
        seen.add(rec.id)
        records.append(rec)
    return records


def resolve(manifest_path, rel: str) -> Path:
    p = Path(rel)
    return p if p.is_absolute() else Path(manifest_path).resolve().parent / p


def attach_conditions(
    records: Sequence[ManifestRecord],
    encoder: str,
    rows: int,
    cols: int,
    out_dir=None,
    cond_dir=None,
    relative_to=None,
) -> list[ManifestRecord]:
    """Point each record at a PTEB condition file.

    ``encoder='stub'`` writes ``<out_dir>/<id>.pteb`` from the caption;
    ``encoder='external-dir'`` expects ``<cond_dir>/<id>.pteb`` to exist with
    ``cols`` columns. Palettes and captions are never modified.
    """
    base = Path(relative_to) if relative_to is not None else Path.cwd()
    out = []
    if encoder == "stub":
        if out_dir is None:
            raise ValueError("stub encoder needs an output directory")
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for r in records:
            path = out_dir / f"{r.id}.pteb"
            write_pteb(path, stub_condition_encoder(r.caption, rows, cols))
            out.append(dataclasses.replace(r, cond_path=os.path.relpath(path, base)))
        return out
    if encoder == "external-dir":
        cond_dir = Path(cond_dir)
        missing = [r.id for r in records if not (cond_dir / f"{r.id}.pteb").is_file()]
        if missing:
            raise MissingEmbedding(missing)
        for r in records:
            path = cond_dir / f"{r.id}.pteb"
            m = read_pteb(path)
            if m.shape[1] != cols:
                raise ShapeMismatch(f"{path}: {m.shape[1]} columns, expected {cols}")
            out.append(dataclasses.replace(r, cond_path=os.path.relpath(path, base)))
        return out
    raise ValueError(f"unknown encoder {encoder!r}")


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------

@dataclass
class ProjectedColor:
    x: float
    y: float
    lab: np.ndarray
    frequency: int


def distinct_colors(records: Sequence[ManifestRecord]) -> tuple[np.ndarray, np.ndarray]:
    """Mean Lab per distinct color code, with the code's multiplicity."""
    lab = np.concatenate([r.palette.to_array() for r in records])
    codes = quantize_array(lab)
    uniq, inverse, counts = np.unique(codes, return_inverse=True, return_counts=True)
    means = np.zeros((len(uniq), 3))
    np.add.at(means, inverse, lab)
    return means / counts[:, None], counts


def pca_2d(points: np.ndarray) -> np.ndarray:
    x = points - points.mean(axis=0)
    if len(x) == 1:
        return np.zeros((1, 2))
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    comps = vt[:2]
    # deterministic sign: largest-magnitude loading positive
    for i in range(len(comps)):
        j = np.argmax(np.abs(comps[i]))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    out = x @ comps.T
    if out.shape[1] < 2:
        out = np.pad(out, ((0, 0), (0, 2 - out.shape[1])))
    return out


def _binary_search_betas(d2: np.ndarray, perplexity: float, tol: float = 1e-5, max_steps: int = 100) -> np.ndarray:
    """Row-conditional affinities P(j|i) matching the target perplexity."""
    n = len(d2)
    target = math.log(perplexity)
    P = np.zeros((n, n))
    for i in range(n):
        di = np.delete(d2[i], i)
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(max_steps):
            e = np.exp(-(di - di.min()) * beta)
            s = e.sum()
            p = e / s
            H = -np.sum(p[p > 0] * np.log(p[p > 0]))
            diff = H - target
            if abs(diff) < tol:
                break
            if diff > 0:
                lo = beta
                beta = beta * 2 if hi == np.inf else (beta + hi) / 2
            else:
                hi = beta
                beta = (beta + lo) / 2
        P[i, np.arange(n) != i] = p
    return P


def tsne_2d(points: np.ndarray, perplexity: float = 30.0, n_iter: int = 1000, seed: int = 0) -> np.ndarray:
    """Exact O(N^2) t-SNE with early exaggeration and momentum gradient descent.

    Perplexity is capped at (N - 1) / 3 for small inputs.
    """
    x = np.asarray(points, dtype=np.float64)
    n = len(x)
    if n > TSNE_MAX_POINTS:
        raise TooManyPoints(f"exact t-SNE is capped at {TSNE_MAX_POINTS} points, got {n}")
    if n <= 2:
        return pca_2d(x) if n == 2 else np.zeros((n, 2))
    perplexity = min(perplexity, (n - 1) / 3.0)
    d2 = np.sum((x[:, None] - x[None]) ** 2, axis=-1)
    P = _binary_search_betas(d2, perplexity)
    P = (P + P.T) / (2.0 * n)
    P = np.maximum(P, 1e-12)

    rng = np.random.default_rng(seed)
    y = rng.standard_normal((n, 2)) * 1e-4
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    lr = max(n / 12.0 / 4.0, 50.0)
    for it in range(n_iter):
        exaggeration = 12.0 if it < 250 else 1.0
        momentum = 0.5 if it < 250 else 0.8
        sq = np.sum(y * y, axis=1)
        num = 1.0 / (1.0 + sq[:, None] + sq[None] - 2.0 * y @ y.T)
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), 1e-12)
        W = (exaggeration * P - Q) * num
        grad = 4.0 * ((np.diag(W.sum(axis=1)) - W) @ y)
        same = np.sign(grad) == np.sign(update)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        gains = np.maximum(gains, 0.01)
        update = momentum * update - lr * gains * grad
        y = y + update
        y = y - y.mean(axis=0)
    return y


def project_colors_2d(records: Sequence[ManifestRecord], method: str = "tsne", seed: int = 0) -> list[ProjectedColor]:
    if not records:
        raise EmptyCorpus("manifest is empty")
    points, counts = distinct_colors(records)
    if method == "pca":
        xy = pca_2d(points)
    elif method == "tsne":
        total = sum(len(r.palette) for r in records)
        if total > TSNE_MAX_POINTS:
            raise TooManyPoints(f"manifest holds {total} palette colors; exact t-SNE cap is {TSNE_MAX_POINTS}")
        xy = tsne_2d(points, seed=seed)
    else:
        raise ValueError(f"unknown projection method {method!r}")
    return [ProjectedColor(float(a), float(b), p, int(c)) for (a, b), p, c in zip(xy, points, counts)]


def write_projection_csv(points: Sequence[ProjectedColor], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("x,y,L,a,b,frequency\n")
        for p in points:
            fh.write(",".join(repr(float(v)) for v in (p.x, p.y, *p.lab)) + f",{p.frequency}\n")


def write_projection_svg(points: Sequence[ProjectedColor], path, size: int = 640, margin: int = 40) -> None:
    """Scatter plot: fill = the color itself, radius proportional to sqrt(frequency)."""
    xy = np.array([[p.x, p.y] for p in points]) if points else np.zeros((0, 2))
    lo = xy.min(axis=0) if len(xy) else np.zeros(2)
    span = np.maximum(xy.max(axis=0) - lo, 1e-12) if len(xy) else np.ones(2)
    scale = (size - 2 * margin) / span
    rmax = max(math.sqrt(p.frequency) for p in points) if points else 1.0
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="#ffffff"/>',
    ]
    for p in points:
        cx = margin + (p.x - lo[0]) * scale[0]
        cy = size - margin - (p.y - lo[1]) * scale[1]
        r = 2.0 + 14.0 * math.sqrt(p.frequency) / rmax
        rgb = lab_array_to_srgb(p.lab)
        fill = "#{:02X}{:02X}{:02X}".format(*(int(v) for v in rgb))
        lines.append(
            f'<circle cx="{cx:.3f}" cy="{cy:.3f}" r="{r:.3f}" fill="{fill}" stroke="#333333" stroke-width="0.5"/>'
        )
    lines.append("</svg>")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
