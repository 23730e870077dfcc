"""Adam training loop with validation-loss early stopping."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ..color import N_CODES
from ..errors import EmptyDataset, InvalidConfig
from .data import PaletteExample, color_counts, mask_rows, stack_conds, stack_tokens
from .model import Batch, McmConfig, encode, init_params, loss_and_grads

log = logging.getLogger(__name__)

EVAL_CHUNK = 512


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 1000
    patience: int = 30
    mask_counts: tuple[int, ...] = (1, 2, 3, 4, 5)
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "mask_counts", tuple(int(m) for m in self.mask_counts))
        if self.patience < 1:
            raise InvalidConfig("patience must be >= 1")
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise InvalidConfig("max_epochs must be >= 1")
        if not self.mask_counts or min(self.mask_counts) < 1:
            raise InvalidConfig("mask_counts must be non-empty and positive")
        if not self.lr > 0:
            raise InvalidConfig("lr must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfig(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_acc1: list[float] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "val_acc1"])
            for i, row in enumerate(zip(self.train_loss, self.val_loss, self.val_acc1), start=1):
                w.writerow([i, *(repr(float(v)) for v in row)])


class Adam:
    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        step = self.lr * np.sqrt(c2) / c1
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            params[k] -= (step * m / (np.sqrt(v) + self.eps * np.sqrt(c2))).astype(params[k].dtype)


class MaskedSet:
    """Pre-tokenised examples with stacked conditions."""

    def __init__(self, examples: Sequence[PaletteExample], cfg: McmConfig, dtype=np.float32):
        if not examples:
            raise EmptyDataset("dataset split is empty")
        self.examples = list(examples)
        self.tokens = stack_tokens(self.examples, cfg.seq_len)
        self.cond, self.cond_mask = stack_conds(self.examples, dtype)
        self.n_colors = color_counts(self.tokens)
        if cfg.conditioned and self.cond is None:
            from ..errors import MissingCondition

            raise MissingCondition("conditioned model needs a condition embedding for every example")

    def __len__(self) -> int:
        return len(self.tokens)

    def draw_mask_counts(self, counts: Sequence[int], rng) -> np.ndarray:
        return np.minimum(rng.choice(np.asarray(counts), size=len(self)), self.n_colors)

    def batch(self, idx, masked, rows, cols, codes) -> Batch:
        """Sub-batch for example indices ``idx`` of an already-masked matrix."""
        sel = np.isin(rows, idx)
        remap = np.full(len(self), -1)
        remap[idx] = np.arange(len(idx))
        cond = cond_mask = None
        if self.cond is not None:
            cond, cond_mask = self.cond[idx], self.cond_mask[idx]
        return Batch(masked[idx], remap[rows[sel]], cols[sel], codes[sel], cond, cond_mask)


def masked_eval(params, cfg: McmConfig, batch: Batch) -> tuple[float, int, int]:
    """Summed masked cross-entropy, correct argmax count and target count."""
    hf = encode(params, cfg, batch.tokens, batch.cond, batch.cond_mask)
    logits = hf[batch.rows, batch.cols] @ params["head.w"] + params["head.b"]
    z = logits - logits.max(-1, keepdims=True)
    lse = np.log(np.exp(z).sum(-1))
    n = len(batch.codes)
    ce = float(np.sum(lse - z[np.arange(n), batch.codes]))
    pred = np.argmax(logits[:, :N_CODES], axis=-1)
    return ce, int(np.sum(pred == batch.codes)), n


def _evaluate_set(params, cfg, data: MaskedSet, masked) -> tuple[float, float]:
    total_ce = total_ok = total_n = 0
    for start in range(0, len(data), EVAL_CHUNK):
        idx = np.arange(start, min(start + EVAL_CHUNK, len(data)))
        ce, ok, n = masked_eval(params, cfg, data.batch(idx, *masked))
        total_ce += ce
        total_ok += ok
        total_n += n
    return total_ce / total_n, total_ok / total_n


def train(
    cfg: McmConfig,
    tcfg: TrainConfig,
    train_set: Sequence[PaletteExample],
    val_set: Sequence[PaletteExample],
    *,
    params: Optional[dict] = None,
    evaluate: Optional[Callable[[dict, int], tuple[float, float]]] = None,
    dtype=np.float32,
    on_epoch: Optional[Callable[[int, dict, TrainHistory], None]] = None,
):
    """Train from scratch (or from ``params``) and return the best-validation parameters.

    ``evaluate(params, epoch) -> (val_loss, val_acc1)`` replaces the built-in
    validation pass when given. Validation masks are drawn once, so the loss
    is comparable across epochs.
    """
    if not train_set or not val_set:
        raise EmptyDataset("training and validation splits must be non-empty")
    tr = MaskedSet(train_set, cfg, dtype)
    va = MaskedSet(val_set, cfg, dtype)
    if params is None:
        params = init_params(cfg, tcfg.seed, dtype)
    opt = Adam(params, tcfg.lr)
    dropout_rng = np.random.default_rng([tcfg.seed, 2]) if cfg.dropout > 0 else None

    vrng = np.random.default_rng([tcfg.seed, 1])
    val_masked = mask_rows(va.tokens, va.draw_mask_counts(tcfg.mask_counts, vrng), vrng)

    history = TrainHistory()
    best_loss = np.inf
    best_params = {k: v.copy() for k, v in params.items()}
    for epoch in range(1, tcfg.max_epochs + 1):
        rng = np.random.default_rng([tcfg.seed, 0, epoch])
        order = rng.permutation(len(tr))
        masked = mask_rows(tr.tokens, tr.draw_mask_counts(tcfg.mask_counts, rng), rng)
        sum_loss = 0.0
        n_targets = 0
        for start in range(0, len(tr), tcfg.batch_size):
            idx = np.sort(order[start : start + tcfg.batch_size])
            batch = tr.batch(idx, *masked)
            loss, grads = loss_and_grads(params, cfg, batch, rng=dropout_rng)
            opt.step(params, grads)
            sum_loss += loss * len(batch.codes)
            n_targets += len(batch.codes)
        if evaluate is not None:
            val_loss, val_acc = evaluate(params, epoch)
        else:
            val_loss, val_acc = _evaluate_set(params, cfg, va, val_masked)
        history.train_loss.append(sum_loss / n_targets)
        history.val_loss.append(float(val_loss))
        history.val_acc1.append(float(val_acc))
        log.info("epoch %d train %.4f val %.4f acc@1 %.4f", epoch, sum_loss / n_targets, val_loss, val_acc)
        if val_loss < best_loss:
            best_loss = val_loss
            history.best_epoch = epoch
            best_params = {k: v.copy() for k, v in params.items()}
        if on_epoch is not None:
            on_epoch(epoch, params, history)
        if epoch - history.best_epoch >= tcfg.patience:
            log.info("early stop at epoch %d (best %d)", epoch, history.best_epoch)
            break
    return best_params, history


def config_dicts(cfg: McmConfig, tcfg: TrainConfig) -> dict:
    return {"model": cfg.to_dict(), "train": asdict(tcfg)}
