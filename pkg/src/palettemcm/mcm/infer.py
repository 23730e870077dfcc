"""Masked-slot prediction, palette embeddings and the 1..5-mask evaluation grid."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from ..color import MASK, LabColor, Palette, as_lab_array, dequantize_array, quantize_array, tokenize_codes
from ..errors import EmptyDataset, NoMaskedSlots, PaletteInputError
from ..metrics import dccw
from .data import PaletteExample, mask_rows, stack_conds, stack_tokens
from .model import McmConfig, encode, predict_codes

GRID_MASKS = (1, 2, 3, 4, 5)

# (masked_tokens (N, T), cond (N, S, D) | None, cond_mask | None) -> codes (N, T)
Predictor = Callable[[np.ndarray, Optional[np.ndarray], Optional[np.ndarray]], np.ndarray]


def _masked_tokens(colors: Sequence[Optional[LabColor]], seq_len: int) -> np.ndarray:
    codes = [0 if c is None else int(quantize_array(c.as_tuple())) for c in colors]
    tokens = tokenize_codes(codes, seq_len)
    for i, c in enumerate(colors):
        if c is None:
            tokens[i + 1] = MASK
    return tokens


def predict_masked(params, cfg: McmConfig, colors: Sequence[Optional[LabColor]], cond=None) -> Palette:
    """Fill every ``None`` slot with the bin center of its argmax color code."""
    colors = list(colors)
    if not colors:
        raise PaletteInputError("empty palette")
    slots = [i for i, c in enumerate(colors) if c is None]
    if not slots:
        raise NoMaskedSlots("palette has no masked (null) slots to predict")
    tokens = _masked_tokens(colors, cfg.seq_len)
    codes = predict_codes(params, cfg, tokens[None], cond)[0]
    filled = list(colors)
    for i in slots:
        L, a, b = dequantize_array(codes[i + 1])
        filled[i] = LabColor(float(L), float(a), float(b))
    return Palette(tuple(filled))


def embed_palette(params, cfg: McmConfig, palette, cond=None) -> np.ndarray:
    """Final-layer state at the PSTART position, a ``d_model`` vector."""
    colors = list(palette) if not isinstance(palette, np.ndarray) else None
    if colors is not None and any(c is None for c in colors):
        raise PaletteInputError("palette embedding needs a complete palette")
    tokens = tokenize_codes(quantize_array(as_lab_array(palette)), cfg.seq_len)
    hf = encode(params, cfg, tokens[None], cond)
    return np.array(hf[0, 0])


@dataclass
class GridRow:
    n_mask: int
    accuracy: float
    dccw: float
    n_positions: int


def model_predictor(params, cfg: McmConfig) -> Predictor:
    def predict(tokens, cond, cond_mask):
        out = []
        for start in range(0, len(tokens), 512):
            sl = slice(start, start + 512)
            c = None if cond is None else cond[sl]
            m = None if cond_mask is None else cond_mask[sl]
            out.append(predict_codes(params, cfg, tokens[sl], c, m))
        return np.concatenate(out)

    return predict


def evaluate_grid(
    params,
    cfg: McmConfig,
    examples: Sequence[PaletteExample],
    seeds: Sequence[int] = (0,),
    predictor: Optional[Predictor] = None,
    mask_counts: Sequence[int] = GRID_MASKS,
) -> list[GridRow]:
    """Accuracy@1 and mean DCCW when 1..5 colors per palette are masked.

    Accuracy is pooled over every masked position; DCCW compares each
    completed palette (unmasked colors kept verbatim) with its ground truth
    and is averaged over palettes and seeds.
    """
    if not examples:
        raise EmptyDataset("no palettes to evaluate")
    if any(len(ex) != 5 for ex in examples):
        raise PaletteInputError("evaluation grid expects five-color palettes")
    if predictor is None:
        predictor = model_predictor(params, cfg)
    tokens = stack_tokens(examples, cfg.seq_len)
    cond, cond_mask = stack_conds(examples)
    truth = np.stack([ex.lab for ex in examples])
    rows_out = []
    for n in mask_counts:
        correct = total = 0
        dccw_sum = 0.0
        dccw_n = 0
        for seed in seeds:
            rng = np.random.default_rng([int(seed), int(n)])
            masked, rows, cols, codes = mask_rows(tokens, np.full(len(tokens), n), rng)
            pred = np.asarray(predictor(masked, cond, cond_mask))
            got = pred[rows, cols]
            correct += int(np.sum(got == codes))
            total += len(codes)
            completed = truth.copy()
            completed[rows, cols - 1] = dequantize_array(got)
            for i in range(len(examples)):
                dccw_sum += dccw(completed[i], truth[i])
            dccw_n += len(examples)
        rows_out.append(GridRow(int(n), correct / total, dccw_sum / dccw_n, total))
    return rows_out
