"""Palette examples and [MASK] corruption."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..color import MASK, N_CODES, as_lab_array, color_positions, quantize_array, tokenize_codes
from ..errors import EmptyDataset, ShapeMismatch, TooManyMasks


@dataclass
class PaletteExample:
    """One training/evaluation palette with its optional condition matrix."""

    lab: np.ndarray
    cond: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.lab = as_lab_array(self.lab)

    @property
    def codes(self) -> np.ndarray:
        return quantize_array(self.lab)

    def __len__(self) -> int:
        return len(self.lab)


def apply_masking(tokens, n_mask: int, seed: int):
    """Replace ``n_mask`` randomly chosen color tokens with MASK.

    Returns the masked copy and a sorted list of ``(position, original_code)``.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    positions = np.flatnonzero(tokens < N_CODES)
    if n_mask < 0 or n_mask > len(positions):
        raise TooManyMasks(f"cannot mask {n_mask} of {len(positions)} color tokens")
    out = tokens.copy()
    if n_mask == 0:
        return out, []
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(positions, size=n_mask, replace=False))
    targets = [(int(p), int(tokens[p])) for p in chosen]
    out[chosen] = MASK
    return out, targets


def mask_rows(tokens: np.ndarray, n_mask: np.ndarray, rng: np.random.Generator):
    """Vectorised masking of a (N, T) token matrix, ``n_mask[i]`` slots per row.

    Returns ``(masked, rows, cols, codes)`` with targets in row-major order.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    is_color = tokens < N_CODES
    if np.any(n_mask > is_color.sum(1)):
        raise TooManyMasks("a row has fewer color tokens than requested masks")
    keys = rng.random(tokens.shape)
    keys[~is_color] = np.inf
    rank = np.argsort(np.argsort(keys, axis=1, kind="stable"), axis=1, kind="stable")
    chosen = rank < np.asarray(n_mask)[:, None]
    rows, cols = np.nonzero(chosen)
    codes = tokens[rows, cols]
    masked = tokens.copy()
    masked[rows, cols] = MASK
    return masked, rows, cols, codes


def stack_tokens(examples: Sequence[PaletteExample], seq_len: int) -> np.ndarray:
    if not examples:
        raise EmptyDataset("no examples")
    return np.stack([tokenize_codes(ex.codes, seq_len) for ex in examples])


def stack_conds(examples: Sequence[PaletteExample], dtype=np.float32):
    """Stack per-example conditions into (N, S, D) plus a (N, S) validity mask."""
    conds = [ex.cond for ex in examples]
    if all(c is None for c in conds):
        return None, None
    if any(c is None for c in conds):
        raise ShapeMismatch("some examples lack a condition embedding")
    D = conds[0].shape[1]
    if any(c.ndim != 2 or c.shape[1] != D for c in conds):
        raise ShapeMismatch("condition embeddings must share the same column count")
    S = max(c.shape[0] for c in conds)
    out = np.zeros((len(conds), S, D), dtype=dtype)
    mask = np.zeros((len(conds), S), dtype=bool)
    for i, c in enumerate(conds):
        out[i, : len(c)] = c
        mask[i, : len(c)] = True
    return out, mask


def color_counts(tokens: np.ndarray) -> np.ndarray:
    return (np.asarray(tokens) < N_CODES).sum(axis=1)


__all__ = ["PaletteExample", "apply_masking", "mask_rows", "stack_tokens", "stack_conds", "color_positions"]
