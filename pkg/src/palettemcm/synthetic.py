"""Ten-template synthetic palette benchmark.

Each template is a five-color palette whose slot ``j`` takes one of three
fixed colors. The layout below was chosen so that hiding more colors
strictly lowers the best achievable palette-only accuracy (Bayes-optimal
96% / 85% / 73% / 61.5% / 50% for 1..5 masked colors), while the template
name (the caption) pins down every color. Samples are drawn by picking a
template and jittering each color inside its own CIELAB bin, so the color
codes never change.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .color import bin_bounds, quantize_array, srgb_array_to_lab
from .mcm.data import PaletteExample
from .mcm.io import stub_condition_encoder

SLOT_COLORS = (
    ("#1B2A49", "#7A1F2B", "#2F5D3A"),
    ("#E07A5F", "#3D9BE9", "#F2CC8F"),
    ("#81B29A", "#9B5DE5", "#F15BB5"),
    ("#FEE440", "#00BBF9", "#5C3D2E"),
    ("#F4F1DE", "#264653", "#E9C46A"),
)

TEMPLATE_LAYOUT = (
    (0, 0, 0, 0, 2),
    (0, 1, 0, 2, 2),
    (0, 1, 1, 2, 1),
    (0, 2, 1, 0, 1),
    (0, 2, 2, 1, 2),
    (2, 0, 0, 0, 2),
    (2, 0, 1, 1, 2),
    (2, 1, 1, 2, 2),
    (2, 2, 1, 1, 1),
    (2, 2, 2, 1, 2),
)

TEMPLATE_NAMES = (
    "harbor at dusk",
    "autumn orchard",
    "tropical lagoon",
    "desert market",
    "neon arcade",
    "forest cabin",
    "spring meadow",
    "coastal village",
    "candy shop",
    "midnight carnival",
)

JITTER_FRACTION = 0.9


def _hex_to_rgb(h: str) -> tuple[int, int, int]:
    v = int(h[1:], 16)
    return (v >> 16) & 0xFF, (v >> 8) & 0xFF, v & 0xFF


def template_codes() -> np.ndarray:
    """(10, 5) color codes of the templates."""
    slot_codes = [
        [int(quantize_array(srgb_array_to_lab(_hex_to_rgb(h)))) for h in slot]
        for slot in SLOT_COLORS
    ]
    return np.array([[slot_codes[j][v] for j, v in enumerate(row)] for row in TEMPLATE_LAYOUT])


def jitter_in_bin(code: int, rng: np.random.Generator) -> np.ndarray:
    lo, hi = bin_bounds(code)
    mid, half = (lo + hi) / 2, (hi - lo) / 2 * JITTER_FRACTION
    return mid + rng.uniform(-1.0, 1.0, 3) * half


@dataclass
class SyntheticSample:
    lab: np.ndarray
    template: int

    @property
    def caption(self) -> str:
        return TEMPLATE_NAMES[self.template]


def sample_split(n: int, seed: int) -> list[SyntheticSample]:
    rng = np.random.default_rng(seed)
    codes = template_codes()
    out = []
    for _ in range(n):
        t = int(rng.integers(len(codes)))
        out.append(SyntheticSample(np.stack([jitter_in_bin(c, rng) for c in codes[t]]), t))
    return out


@dataclass
class SyntheticBenchmark:
    train: list[SyntheticSample]
    val: list[SyntheticSample]
    test: list[SyntheticSample]

    def examples(self, split: str, cond_shape: tuple[int, int] | None = None) -> list[PaletteExample]:
        """PaletteExamples for a split; ``cond_shape`` attaches stub caption embeddings."""
        samples = getattr(self, split)
        if cond_shape is None:
            return [PaletteExample(s.lab) for s in samples]
        return [PaletteExample(s.lab, stub_condition_encoder(s.caption, *cond_shape)) for s in samples]


def make_benchmark(n_train: int = 1000, n_val: int = 200, n_test: int = 200, seed: int = 0) -> SyntheticBenchmark:
    return SyntheticBenchmark(
        train=sample_split(n_train, seed * 3 + 101),
        val=sample_split(n_val, seed * 3 + 102),
        test=sample_split(n_test, seed * 3 + 103),
    )
