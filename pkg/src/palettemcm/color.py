"""CIELAB conversion, color-code quantization and the token alphabet.

Colors live in CIELAB (D65 white, 2 degree observer). A color code is the
index of a 16x16x16 bin over L in [0, 100] and a, b in [-128, 128). Token
indices 0..4095 are color codes; the four framing/control tokens follow.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidColor, MalformedSequence, SequenceTooShort

BINS = 16
N_CODES = BINS**3
PSTART = N_CODES
PEND = N_CODES + 1
PAD = N_CODES + 2
MASK = N_CODES + 3
VOCAB_SIZE = N_CODES + 4

SPECIAL_NAMES = {PSTART: "PSTART", PEND: "PEND", PAD: "PAD", MASK: "MASK"}

MAX_PALETTE = 8

# D65 reference white, 2 degree observer.
WHITE_D65 = np.array([0.95047, 1.0, 1.08883])

_SRGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_XYZ_TO_SRGB = np.linalg.inv(_SRGB_TO_XYZ)

_EPS = 216 / 24389
_KAPPA = 24389 / 27
_AB_MAX = math.nextafter(128.0, 0.0)


@dataclass(frozen=True, slots=True)
class SrgbColor:
    r: int
    g: int
    b: int

    def __post_init__(self) -> None:
        for name in ("r", "g", "b"):
            v = getattr(self, name)
            if not (0 <= v <= 255) or int(v) != v:
                raise InvalidColor(f"sRGB channel {name}={v!r} outside [0, 255]")

    @classmethod
    def from_hex(cls, text: str) -> "SrgbColor":
        if not (isinstance(text, str) and len(text) == 7 and text[0] == "#"):
            raise InvalidColor(f"expected '#RRGGBB', got {text!r}")
        try:
            value = int(text[1:], 16)
        except ValueError:
            raise InvalidColor(f"expected '#RRGGBB', got {text!r}") from None
        return cls((value >> 16) & 0xFF, (value >> 8) & 0xFF, value & 0xFF)

    @property
    def hex(self) -> str:
        return f"#{self.r:02X}{self.g:02X}{self.b:02X}"


@dataclass(frozen=True, slots=True)
class LabColor:
    L: float
    a: float
    b: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in (self.L, self.a, self.b)):
            raise InvalidColor(f"non-finite Lab value {self!r}")
        if not 0.0 <= self.L <= 100.0:
            raise InvalidColor(f"L={self.L} outside [0, 100]")
        if not (-128.0 <= self.a < 128.0 and -128.0 <= self.b < 128.0):
            raise InvalidColor(f"a/b=({self.a}, {self.b}) outside [-128, 128)")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.L, self.a, self.b)


@dataclass(frozen=True)
class Palette:
    """Ordered list of 1..8 CIELAB colors."""

    colors: tuple[LabColor, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "colors", tuple(self.colors))
        if not 1 <= len(self.colors) <= MAX_PALETTE:
            raise InvalidColor(f"palette length {len(self.colors)} outside [1, {MAX_PALETTE}]")
        for c in self.colors:
            if not isinstance(c, LabColor):
                raise InvalidColor(f"palette entry {c!r} is not a LabColor")

    def __len__(self) -> int:
        return len(self.colors)

    def __iter__(self):
        return iter(self.colors)

    def __getitem__(self, i):
        return self.colors[i]

    def to_array(self) -> np.ndarray:
        return np.array([c.as_tuple() for c in self.colors], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "Palette":
        arr = np.asarray(arr, dtype=np.float64).reshape(-1, 3)
        return cls(tuple(LabColor(float(L), float(a), float(b)) for L, a, b in arr))

    def to_json_obj(self) -> list[list[float]]:
        return [list(c.as_tuple()) for c in self.colors]

    def hex(self) -> list[str]:
        return [lab_to_srgb(c).hex for c in self.colors]


def as_lab_array(p) -> np.ndarray:
    """Coerce a Palette, sequence of LabColor, or array-like into a (k, 3) array."""
    if isinstance(p, Palette):
        return p.to_array()
    if isinstance(p, LabColor):
        return np.array([p.as_tuple()])
    if isinstance(p, np.ndarray):
        return p.astype(np.float64, copy=False).reshape(-1, 3)
    items = list(p)
    if items and isinstance(items[0], LabColor):
        return np.array([c.as_tuple() for c in items], dtype=np.float64)
    return np.asarray(items, dtype=np.float64).reshape(-1, 3)


# ---------------------------------------------------------------------------
# Conversion (vectorised cores + scalar wrappers)
# ---------------------------------------------------------------------------

def srgb_array_to_lab(rgb) -> np.ndarray:
    """Convert (..., 3) sRGB values in [0, 255] to clamped CIELAB."""
    c = np.asarray(rgb, dtype=np.float64) / 255.0
    lin = np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)
    xyz = lin @ _SRGB_TO_XYZ.T
    t = xyz / WHITE_D65
    f = np.where(t > _EPS, np.cbrt(t), (_KAPPA * t + 16.0) / 116.0)
    lab = np.empty_like(f)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return clamp_lab(lab)


def lab_array_to_srgb(lab) -> np.ndarray:
    """Convert (..., 3) CIELAB to uint8 sRGB, clipping out-of-gamut channels."""
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    f = np.stack([fx, fy, fz], axis=-1)
    t = np.where(f**3 > _EPS, f**3, (116.0 * f - 16.0) / _KAPPA)
    xyz = t * WHITE_D65
    lin = xyz @ _XYZ_TO_SRGB.T
    lin = np.clip(lin, 0.0, 1.0)
    c = np.where(lin <= 0.0031308, 12.92 * lin, 1.055 * lin ** (1 / 2.4) - 0.055)
    return np.clip(np.rint(c * 255.0), 0, 255).astype(np.uint8)


def clamp_lab(lab: np.ndarray) -> np.ndarray:
    out = np.array(lab, dtype=np.float64, copy=True)
    out[..., 0] = np.clip(out[..., 0], 0.0, 100.0)
    out[..., 1:] = np.clip(out[..., 1:], -128.0, _AB_MAX)
    return out


def srgb_to_lab(c: SrgbColor) -> LabColor:
    L, a, b = srgb_array_to_lab([c.r, c.g, c.b])
    return LabColor(float(L), float(a), float(b))


def lab_to_srgb(c: LabColor) -> SrgbColor:
    r, g, b = lab_array_to_srgb([c.L, c.a, c.b])
    return SrgbColor(int(r), int(g), int(b))


# ---------------------------------------------------------------------------
# Quantization
# ---------------------------------------------------------------------------

def quantize_array(lab) -> np.ndarray:
    """Vectorised ``quantize`` for (..., 3) Lab arrays; returns int64 codes."""
    lab = np.asarray(lab, dtype=np.float64)
    iL = np.minimum(np.floor(lab[..., 0] / 100.0 * BINS), BINS - 1)
    ia = np.floor((lab[..., 1] + 128.0) / 256.0 * BINS)
    ib = np.floor((lab[..., 2] + 128.0) / 256.0 * BINS)
    idx = np.clip(np.stack([iL, ia, ib], axis=-1), 0, BINS - 1).astype(np.int64)
    return idx[..., 0] * BINS * BINS + idx[..., 1] * BINS + idx[..., 2]


def dequantize_array(codes) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    if np.any((codes < 0) | (codes >= N_CODES)):
        raise InvalidColor("color code outside [0, 4095]")
    iL, rem = np.divmod(codes, BINS * BINS)
    ia, ib = np.divmod(rem, BINS)
    return np.stack(
        [
            (iL + 0.5) * 100.0 / BINS,
            (ia + 0.5) * 256.0 / BINS - 128.0,
            (ib + 0.5) * 256.0 / BINS - 128.0,
        ],
        axis=-1,
    )


def quantize(c: LabColor) -> int:
    return int(quantize_array(c.as_tuple()))


def dequantize(code: int) -> LabColor:
    L, a, b = dequantize_array(code)
    return LabColor(float(L), float(a), float(b))


def bin_bounds(code: int) -> tuple[np.ndarray, np.ndarray]:
    """Lower and upper Lab corners of a code's bin."""
    iL, rem = divmod(int(code), BINS * BINS)
    ia, ib = divmod(rem, BINS)
    lo = np.array([iL * 100.0 / BINS, ia * 256.0 / BINS - 128.0, ib * 256.0 / BINS - 128.0])
    step = np.array([100.0 / BINS, 256.0 / BINS, 256.0 / BINS])
    return lo, lo + step


# ---------------------------------------------------------------------------
# Tokens
# ---------------------------------------------------------------------------

def token_kind(index: int) -> tuple[str, int | None]:
    """Map a vocabulary index to ``(kind, code)``; code is None for specials."""
    index = int(index)
    if 0 <= index < N_CODES:
        return ("COLOR", index)
    if index in SPECIAL_NAMES:
        return (SPECIAL_NAMES[index], None)
    raise ValueError(f"token index {index} outside [0, {VOCAB_SIZE - 1}]")


def token_index(kind: str, code: int | None = None) -> int:
    if kind == "COLOR":
        if code is None or not 0 <= code < N_CODES:
            raise ValueError(f"invalid color code {code!r}")
        return int(code)
    for idx, name in SPECIAL_NAMES.items():
        if name == kind:
            return idx
    raise ValueError(f"unknown token kind {kind!r}")


def tokenize_codes(codes: Sequence[int], seq_len: int) -> np.ndarray:
    k = len(codes)
    if seq_len < k + 2:
        raise SequenceTooShort(f"seq_len={seq_len} cannot hold {k} colors plus framing")
    out = np.full(seq_len, PAD, dtype=np.int64)
    out[0] = PSTART
    out[1 : k + 1] = codes
    out[k + 1] = PEND
    return out


def tokenize_palette(p, seq_len: int) -> np.ndarray:
    """Frame a palette as ``[PSTART, c1..ck, PEND, PAD...]`` of length ``seq_len``."""
    return tokenize_codes(quantize_array(as_lab_array(p)), seq_len)


def color_positions(tokens) -> np.ndarray:
    t = np.asarray(tokens)
    return np.flatnonzero((t < N_CODES) | (t == MASK))


def detokenize(tokens) -> Palette:
    t = [int(x) for x in np.asarray(tokens).ravel()]
    if MASK in t:
        raise MalformedSequence("sequence contains MASK tokens")
    if not t or t[0] != PSTART:
        raise MalformedSequence("sequence must start with PSTART")
    try:
        end = t.index(PEND)
    except ValueError:
        raise MalformedSequence("sequence has no PEND") from None
    body = t[1:end]
    if not body or any(x >= N_CODES for x in body):
        raise MalformedSequence("palette body must be one or more color codes")
    if any(x != PAD for x in t[end + 1 :]):
        raise MalformedSequence("only PAD may follow PEND")
    return Palette.from_array(dequantize_array(body))


# ---------------------------------------------------------------------------
# Palette text format
# ---------------------------------------------------------------------------

def parse_color_entry(entry) -> LabColor | None:
    """One JSON palette entry: ``[L, a, b]``, ``"#RRGGBB"`` or ``None`` (masked)."""
    if entry is None:
        return None
    if isinstance(entry, str):
        return srgb_to_lab(SrgbColor.from_hex(entry))
    if isinstance(entry, (list, tuple)) and len(entry) == 3:
        try:
            return LabColor(*(float(v) for v in entry))
        except (TypeError, ValueError) as exc:
            raise InvalidColor(f"bad Lab entry {entry!r}: {exc}") from None
    raise InvalidColor(f"unrecognised palette entry {entry!r}")


def parse_palette_obj(obj, allow_masked: bool = False) -> list[LabColor | None]:
    if not isinstance(obj, list) or not obj:
        raise InvalidColor("palette must be a non-empty JSON array")
    if len(obj) > MAX_PALETTE:
        raise InvalidColor(f"palette has {len(obj)} colors; at most {MAX_PALETTE} allowed")
    colors = [parse_color_entry(e) for e in obj]
    if not allow_masked and any(c is None for c in colors):
        raise InvalidColor("palette contains null (masked) slots")
    return colors


def load_palette_file(path, allow_masked: bool = False) -> list[LabColor | None]:
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    return parse_palette_obj(obj, allow_masked=allow_masked)


def dump_palette(colors: Iterable[LabColor]) -> str:
    return json.dumps([list(c.as_tuple()) for c in colors])
