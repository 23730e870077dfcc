"""Masked color model: a pre-norm transformer over color tokens.

Parameters are a flat ``dict[str, ndarray]``; forward and backward passes are
written out by hand in numpy so that gradients can be checked exactly
against finite differences in float64.

Layer layout (per block)::

    x += SelfAttn(LN1(x))                 # PAD keys masked out
    x += CrossAttn(LNx(x), cond @ Wc + bc) # conditioned variant only
    x += FFN(LN2(x))                       # GELU (tanh form)

followed by a final LayerNorm and a linear head over the 4100-token vocabulary.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from ..color import MASK, N_CODES, PAD, VOCAB_SIZE
from ..errors import (
    EmptyTargets,
    InvalidConfig,
    MissingCondition,
    ShapeMismatch,
    UnexpectedCondition,
)

LN_EPS = 1e-5
_NEG = -1e30
_GELU_C = math.sqrt(2.0 / math.pi)

Params = dict  # name -> ndarray


@dataclass(frozen=True)
class McmConfig:
    d_model: int = 768
    n_layers: int = 4
    n_heads: int = 8
    d_ff: Optional[int] = None
    seq_len: int = 8
    vocab_size: int = VOCAB_SIZE
    conditioning: str = "none"
    cond_dim: int = 0
    dropout: float = 0.0

    def __post_init__(self) -> None:
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 4 * self.d_model)
        if self.d_model < 1 or self.n_heads < 1 or self.n_layers < 1 or self.d_ff < 1:
            raise InvalidConfig("d_model, n_heads, n_layers and d_ff must be positive")
        if self.d_model % self.n_heads:
            raise InvalidConfig(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.seq_len < 3:
            raise InvalidConfig("seq_len must be >= 3")
        if self.vocab_size != VOCAB_SIZE:
            raise InvalidConfig(f"vocab_size is fixed at {VOCAB_SIZE}")
        if self.conditioning not in ("none", "cross"):
            raise InvalidConfig(f"conditioning must be 'none' or 'cross', got {self.conditioning!r}")
        if (self.cond_dim > 0) != (self.conditioning == "cross"):
            raise InvalidConfig("cond_dim > 0 is required exactly when conditioning='cross'")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidConfig("dropout must lie in [0, 1)")

    @property
    def conditioned(self) -> bool:
        return self.conditioning == "cross"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "McmConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def param_shapes(cfg: McmConfig) -> dict[str, tuple[int, ...]]:
    d, f, V = cfg.d_model, cfg.d_ff, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (V, d),
        "pos_emb": (cfg.seq_len, d),
    }
    if cfg.conditioned:
        shapes["cond_proj.w"] = (cfg.cond_dim, d)
        shapes["cond_proj.b"] = (d,)
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        for w in ("wq", "wk", "wv", "wo"):
            shapes[p + "attn." + w] = (d, d)
        if cfg.conditioned:
            shapes[p + "lnx.g"] = (d,)
            shapes[p + "lnx.b"] = (d,)
            for w in ("wq", "wk", "wv", "wo"):
                shapes[p + "xattn." + w] = (d, d)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
        shapes[p + "ffn.w1"] = (d, f)
        shapes[p + "ffn.b1"] = (f,)
        shapes[p + "ffn.w2"] = (f, d)
        shapes[p + "ffn.b2"] = (d,)
    shapes["lnf.g"] = (d,)
    shapes["lnf.b"] = (d,)
    shapes["head.w"] = (d, V)
    shapes["head.b"] = (V,)
    return shapes


def param_count(cfg: McmConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def init_params(cfg: McmConfig, seed: int = 0, dtype=np.float32) -> Params:
    """Deterministic initialisation.

    Matrices get N(0, 1/fan_in) entries, embeddings N(0, 0.02^2), LayerNorm
    gains 1 and every bias/offset 0.
    """
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name in ("tok_emb", "pos_emb"):
            arr = rng.standard_normal(shape) * 0.02
        elif leaf == "g":
            arr = np.ones(shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
        else:
            arr = rng.standard_normal(shape) / math.sqrt(shape[0])
        params[name] = arr.astype(dtype)
    return params


# ---------------------------------------------------------------------------
# Building blocks (forward returns a cache consumed by the matching backward)
# ---------------------------------------------------------------------------

def _ln_fwd(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def _ln_bwd(dy, cache):
    xhat, rstd, g = cache
    n = xhat.shape[-1]
    dg = (dy * xhat).reshape(-1, n).sum(0)
    db = dy.reshape(-1, n).sum(0)
    dxhat = dy * g
    dx = rstd / n * (n * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
    return dx, dg, db


def _gelu_fwd(x):
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), (x, t)


def _gelu_bwd(dy, cache):
    x, t = cache
    du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def _split(x, h):
    B, T, d = x.shape
    return x.reshape(B, T, h, d // h).transpose(0, 2, 1, 3)


def _merge(x):
    B, h, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, h * dh)


def _attn_fwd(xq, xkv, key_valid, wq, wk, wv, wo, n_heads):
    dh = xq.shape[-1] // n_heads
    scale = 1.0 / math.sqrt(dh)
    q = _split(xq @ wq, n_heads)
    k = _split(xkv @ wk, n_heads)
    v = _split(xkv @ wv, n_heads)
    s = (q @ k.transpose(0, 1, 3, 2)) * scale
    s = np.where(key_valid[:, None, None, :], s, _NEG)
    s = s - s.max(-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(-1, keepdims=True)
    o = _merge(p @ v)
    return o @ wo, (xq, xkv, q, k, v, p, o, scale, wq, wk, wv, wo, n_heads)


def _attn_bwd(dout, cache):
    xq, xkv, q, k, v, p, o, scale, wq, wk, wv, wo, n_heads = cache
    d = xq.shape[-1]
    dwo = o.reshape(-1, d).T @ dout.reshape(-1, d)
    do = _split(dout @ wo.T, n_heads)
    dp = do @ v.transpose(0, 1, 3, 2)
    dv = p.transpose(0, 1, 3, 2) @ do
    ds = p * (dp - (dp * p).sum(-1, keepdims=True)) * scale
    dq = _merge(ds @ k)
    dk = _merge(ds.transpose(0, 1, 3, 2) @ q)
    dv = _merge(dv)
    dwq = xq.reshape(-1, d).T @ dq.reshape(-1, d)
    dwk = xkv.reshape(-1, d).T @ dk.reshape(-1, d)
    dwv = xkv.reshape(-1, d).T @ dv.reshape(-1, d)
    dxq = dq @ wq.T
    dxkv = dk @ wk.T + dv @ wv.T
    return dxq, dxkv, (dwq, dwk, dwv, dwo)


def _dropout_fwd(x, rate, rng):
    if rate <= 0.0 or rng is None:
        return x, None
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep, keep


def _dropout_bwd(dy, keep):
    return dy if keep is None else dy * keep


# ---------------------------------------------------------------------------
# Full network
# ---------------------------------------------------------------------------

def _check_inputs(params, cfg, tokens, cond, cond_mask):
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None]
    if tokens.ndim != 2:
        raise ShapeMismatch("tokens must be (T,) or (B, T)")
    B, T = tokens.shape
    if T > cfg.seq_len:
        raise ShapeMismatch(f"sequence length {T} exceeds configured seq_len={cfg.seq_len}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ShapeMismatch("token index outside vocabulary")
    if cfg.conditioned:
        if cond is None:
            raise MissingCondition("conditioned model requires a condition embedding")
        cond = np.asarray(cond)
        if cond.ndim == 2:
            cond = np.broadcast_to(cond, (B,) + cond.shape)
        if cond.ndim != 3 or cond.shape[0] != B or cond.shape[2] != cfg.cond_dim:
            raise ShapeMismatch(
                f"condition must be (S, {cfg.cond_dim}) or (B, S, {cfg.cond_dim}); got {cond.shape}"
            )
        if cond.shape[1] < 1:
            raise ShapeMismatch("condition needs at least one row")
        if cond_mask is None:
            cond_mask = np.ones(cond.shape[:2], dtype=bool)
        cond_mask = np.asarray(cond_mask, dtype=bool)
        if cond_mask.ndim == 1:
            cond_mask = np.broadcast_to(cond_mask, cond.shape[:2])
        if cond_mask.shape != cond.shape[:2]:
            raise ShapeMismatch("cond_mask must be (B, S)")
        cond = cond.astype(params["tok_emb"].dtype, copy=False)
    elif cond is not None:
        raise UnexpectedCondition("palette-only model does not accept a condition embedding")
    return tokens, cond, cond_mask


def encode(params: Params, cfg: McmConfig, tokens, cond=None, cond_mask=None, rng=None, keep_cache=False):
    """Final-layer hidden states (after the closing LayerNorm), shape (B, T, d)."""
    tokens, cond, cond_mask = _check_inputs(params, cfg, tokens, cond, cond_mask)
    B, T = tokens.shape
    key_valid = tokens != PAD
    rate = cfg.dropout
    caches: dict = {"tokens": tokens, "layers": []}

    x = params["tok_emb"][tokens] + params["pos_emb"][:T]
    c = None
    if cfg.conditioned:
        c = cond @ params["cond_proj.w"] + params["cond_proj.b"]
        caches["cond"] = cond
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        lc: dict = {}
        h, lc["ln1"] = _ln_fwd(x, params[p + "ln1.g"], params[p + "ln1.b"])
        a, lc["attn"] = _attn_fwd(
            h, h, key_valid,
            params[p + "attn.wq"], params[p + "attn.wk"], params[p + "attn.wv"], params[p + "attn.wo"],
            cfg.n_heads,
        )
        a, lc["drop1"] = _dropout_fwd(a, rate, rng)
        x = x + a
        if cfg.conditioned:
            h, lc["lnx"] = _ln_fwd(x, params[p + "lnx.g"], params[p + "lnx.b"])
            a, lc["xattn"] = _attn_fwd(
                h, c, cond_mask,
                params[p + "xattn.wq"], params[p + "xattn.wk"], params[p + "xattn.wv"], params[p + "xattn.wo"],
                cfg.n_heads,
            )
            a, lc["dropx"] = _dropout_fwd(a, rate, rng)
            x = x + a
        h, lc["ln2"] = _ln_fwd(x, params[p + "ln2.g"], params[p + "ln2.b"])
        u = h @ params[p + "ffn.w1"] + params[p + "ffn.b1"]
        gu, lc["gelu"] = _gelu_fwd(u)
        f = gu @ params[p + "ffn.w2"] + params[p + "ffn.b2"]
        lc["ffn"] = (h, gu)
        f, lc["drop2"] = _dropout_fwd(f, rate, rng)
        x = x + f
        if keep_cache:
            caches["layers"].append(lc)
    hf, caches["lnf"] = _ln_fwd(x, params["lnf.g"], params["lnf.b"])
    return (hf, caches) if keep_cache else hf


def backward_encode(params: Params, cfg: McmConfig, dhf, caches) -> Params:
    grads: Params = {name: np.zeros_like(v) for name, v in params.items()}
    dx, grads["lnf.g"], grads["lnf.b"] = _ln_bwd(dhf, caches["lnf"])
    dc = None
    for i in reversed(range(cfg.n_layers)):
        p = f"layers.{i}."
        lc = caches["layers"][i]
        # feed-forward branch
        df = _dropout_bwd(dx, lc["drop2"])
        h, gu = lc["ffn"]
        d = h.shape[-1]
        grads[p + "ffn.w2"] = gu.reshape(-1, gu.shape[-1]).T @ df.reshape(-1, d)
        grads[p + "ffn.b2"] = df.reshape(-1, d).sum(0)
        du = _gelu_bwd(df @ params[p + "ffn.w2"].T, lc["gelu"])
        grads[p + "ffn.w1"] = h.reshape(-1, d).T @ du.reshape(-1, du.shape[-1])
        grads[p + "ffn.b1"] = du.reshape(-1, du.shape[-1]).sum(0)
        dh = du @ params[p + "ffn.w1"].T
        dln, grads[p + "ln2.g"], grads[p + "ln2.b"] = _ln_bwd(dh, lc["ln2"])
        dx = dx + dln
        # cross-attention branch
        if cfg.conditioned:
            da = _dropout_bwd(dx, lc["dropx"])
            dq, dkv, (gq, gk, gv, go) = _attn_bwd(da, lc["xattn"])
            grads[p + "xattn.wq"], grads[p + "xattn.wk"] = gq, gk
            grads[p + "xattn.wv"], grads[p + "xattn.wo"] = gv, go
            dc = dkv if dc is None else dc + dkv
            dln, grads[p + "lnx.g"], grads[p + "lnx.b"] = _ln_bwd(dq, lc["lnx"])
            dx = dx + dln
        # self-attention branch
        da = _dropout_bwd(dx, lc["drop1"])
        dq, dkv, (gq, gk, gv, go) = _attn_bwd(da, lc["attn"])
        grads[p + "attn.wq"], grads[p + "attn.wk"] = gq, gk
        grads[p + "attn.wv"], grads[p + "attn.wo"] = gv, go
        dln, grads[p + "ln1.g"], grads[p + "ln1.b"] = _ln_bwd(dq + dkv, lc["ln1"])
        dx = dx + dln
    if cfg.conditioned:
        cond = caches["cond"]
        Dc = cond.shape[-1]
        grads["cond_proj.w"] = cond.reshape(-1, Dc).T @ dc.reshape(-1, dc.shape[-1])
        grads["cond_proj.b"] = dc.reshape(-1, dc.shape[-1]).sum(0)
    tokens = caches["tokens"]
    T = tokens.shape[1]
    np.add.at(grads["tok_emb"], tokens, dx)
    grads["pos_emb"][:T] = dx.sum(0)
    return grads


def forward(params: Params, cfg: McmConfig, tokens, cond=None, cond_mask=None) -> np.ndarray:
    """Logits over the full vocabulary at every position: (T, V) or (B, T, V)."""
    single = np.asarray(tokens).ndim == 1
    hf = encode(params, cfg, tokens, cond, cond_mask)
    logits = hf @ params["head.w"] + params["head.b"]
    return logits[0] if single else logits


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis, keepdims=True)


# ---------------------------------------------------------------------------
# Training objective
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    """Collated masked sequences; targets are flattened (row, position, code)."""

    tokens: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    codes: np.ndarray
    cond: Optional[np.ndarray] = None
    cond_mask: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.tokens)


def collate(examples, cond_dtype=np.float32) -> Batch:
    """Build a Batch from ``(masked_tokens, targets, cond)`` triples.

    ``targets`` is a list of ``(position, code)``; conditions of differing row
    counts are zero-padded and masked.
    """
    examples = list(examples)
    if not examples:
        raise EmptyTargets("empty batch")
    tokens = np.stack([np.asarray(t, dtype=np.int64) for t, _, _ in examples])
    rows, cols, codes = [], [], []
    for i, (_, targets, _) in enumerate(examples):
        if not targets:
            raise EmptyTargets(f"example {i} has no masked targets")
        for pos, code in targets:
            rows.append(i)
            cols.append(pos)
            codes.append(code)
    conds = [c for _, _, c in examples]
    cond = cond_mask = None
    if any(c is not None for c in conds):
        if any(c is None for c in conds):
            raise MissingCondition("batch mixes conditioned and unconditioned examples")
        S = max(c.shape[0] for c in conds)
        D = conds[0].shape[1]
        cond = np.zeros((len(conds), S, D), dtype=cond_dtype)
        cond_mask = np.zeros((len(conds), S), dtype=bool)
        for i, c in enumerate(conds):
            if c.shape[1] != D:
                raise ShapeMismatch("condition widths differ within a batch")
            cond[i, : c.shape[0]] = c
            cond_mask[i, : c.shape[0]] = True
    return Batch(tokens, np.array(rows), np.array(cols), np.array(codes), cond, cond_mask)


def masked_logits(params: Params, hf: np.ndarray, batch: Batch) -> np.ndarray:
    return hf[batch.rows, batch.cols] @ params["head.w"] + params["head.b"]


def loss_and_grads(params: Params, cfg: McmConfig, batch: Batch, rng=None, need_grads: bool = True):
    """Mean cross-entropy over masked positions and its gradient for every tensor."""
    if len(batch.codes) == 0:
        raise EmptyTargets("batch has no masked targets")
    hf, caches = encode(params, cfg, batch.tokens, batch.cond, batch.cond_mask, rng=rng, keep_cache=True)
    hsel = hf[batch.rows, batch.cols]
    logits = hsel @ params["head.w"] + params["head.b"]
    z = logits - logits.max(-1, keepdims=True)
    lse = np.log(np.exp(z).sum(-1))
    n = len(batch.codes)
    loss = float(np.mean(lse - z[np.arange(n), batch.codes]))
    if not need_grads:
        return loss, None
    dlogits = np.exp(z - lse[:, None])
    dlogits[np.arange(n), batch.codes] -= 1.0
    dlogits /= n
    dhf = np.zeros_like(hf)
    np.add.at(dhf, (batch.rows, batch.cols), dlogits @ params["head.w"].T)
    grads = backward_encode(params, cfg, dhf, caches)
    grads["head.w"] = hsel.T @ dlogits
    grads["head.b"] = dlogits.sum(0)
    return loss, grads


def predict_codes(params: Params, cfg: McmConfig, tokens, cond=None, cond_mask=None) -> np.ndarray:
    """Greedy color-code prediction at every position, (B, T); lowest code wins ties."""
    hf = encode(params, cfg, tokens, cond, cond_mask)
    logits = hf @ params["head.w"][:, :N_CODES] + params["head.b"][:N_CODES]
    return np.argmax(logits, axis=-1)


__all__ = [
    "Batch",
    "MASK",
    "McmConfig",
    "Params",
    "backward_encode",
    "collate",
    "encode",
    "forward",
    "init_params",
    "loss_and_grads",
    "param_count",
    "param_shapes",
    "predict_codes",
    "softmax",
]
