"""Masked color model over quantized CIELAB color tokens."""

from .data import PaletteExample, apply_masking
from .infer import GridRow, embed_palette, evaluate_grid, predict_masked
from .io import load_checkpoint, read_pteb, save_checkpoint, stub_condition_encoder, write_pteb
from .model import (
    Batch,
    McmConfig,
    collate,
    encode,
    forward,
    init_params,
    loss_and_grads,
    param_count,
    param_shapes,
)
from .train import TrainConfig, TrainHistory, train

__all__ = [
    "Batch",
    "GridRow",
    "McmConfig",
    "PaletteExample",
    "TrainConfig",
    "TrainHistory",
    "apply_masking",
    "collate",
    "embed_palette",
    "encode",
    "evaluate_grid",
    "forward",
    "init_params",
    "load_checkpoint",
    "loss_and_grads",
    "param_count",
    "param_shapes",
    "predict_masked",
    "read_pteb",
    "save_checkpoint",
    "stub_condition_encoder",
    "train",
    "write_pteb",
]
