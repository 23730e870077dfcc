import math

import numpy as np
import pytest
from scipy.stats import binom

from oracles import model_gradient_check, straight_line_logits
from palettemcm.color import MASK, N_CODES, PAD, PEND, PSTART, LabColor, dequantize_array, quantize, tokenize_codes
from palettemcm.errors import (
    EmptyDataset,
    EmptyTargets,
    FormatError,
    InvalidConfig,
    MissingCondition,
    NoMaskedSlots,
    ShapeMismatch,
    TooManyMasks,
    UnexpectedCondition,
    VersionError,
)
from palettemcm.mcm import (
    McmConfig,
    PaletteExample,
    TrainConfig,
    apply_masking,
    collate,
    embed_palette,
    evaluate_grid,
    forward,
    init_params,
    load_checkpoint,
    loss_and_grads,
    param_count,
    predict_masked,
    read_pteb,
    save_checkpoint,
    stub_condition_encoder,
    train,
    write_pteb,
)
from palettemcm.mcm.io import checkpoint_bytes
from palettemcm.mcm.model import softmax


def tiny_cfg(cond=False, **kw):
    base = dict(d_model=8, n_layers=1, n_heads=1, seq_len=5)
    base.update(kw)
    if cond:
        base.update(conditioning="cross", cond_dim=16)
    return McmConfig(**base)


def jitter(params, rng, scale=0.3):
    """Move every tensor off its structured init so no gradient is trivially zero."""
    return {k: v + rng.normal(0, scale, v.shape) if k != "tok_emb" else v + rng.normal(0, 0.5, v.shape)
            for k, v in params.items()}


def tokens5(codes):
    return tokenize_codes(codes, 8)


# --- config / init ----------------------------------------------------------

def test_config_validation():
    with pytest.raises(InvalidConfig):
        McmConfig(d_model=12, n_heads=5)
    with pytest.raises(InvalidConfig):
        McmConfig(seq_len=2)
    with pytest.raises(InvalidConfig):
        McmConfig(conditioning="cross", cond_dim=0)
    with pytest.raises(InvalidConfig):
        McmConfig(conditioning="none", cond_dim=4)
    with pytest.raises(InvalidConfig):
        McmConfig(dropout=1.0)


def test_defaults():
    cfg = McmConfig()
    assert (cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.d_ff, cfg.seq_len, cfg.vocab_size) == (768, 4, 8, 3072, 8, 4100)
    tc = TrainConfig()
    assert (tc.lr, tc.batch_size, tc.patience, tuple(tc.mask_counts)) == (1e-4, 32, 30, (1, 2, 3, 4, 5))


@pytest.mark.parametrize("cond", [False, True])
def test_param_count_closed_form(cond):
    d, f, V, T, L, Dc = 8, 32, 4100, 5, 1, 16
    per_layer = 2 * d + 4 * d * d + 2 * d + (d * f + f + f * d + d)
    if cond:
        per_layer += 2 * d + 4 * d * d
    expected = V * d + T * d + L * per_layer + 2 * d + d * V + V + ((Dc * d + d) if cond else 0)
    assert param_count(tiny_cfg(cond)) == expected


def test_init_deterministic_and_scaled():
    cfg = McmConfig(d_model=32, n_layers=2, n_heads=4)
    a, b = init_params(cfg, 3), init_params(cfg, 3)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["head.w"], init_params(cfg, 4)["head.w"])
    assert np.all(a["layers.0.ln1.g"] == 1) and np.all(a["head.b"] == 0)
    assert a["layers.0.ffn.w1"].std() == pytest.approx(1 / math.sqrt(32), rel=0.1)


# --- masking ---------------------------------------------------------------

def test_masking_cases():
    t = tokens5([10, 20, 30, 40, 50])
    out, targets = apply_masking(t, 0, seed=1)
    assert np.array_equal(out, t) and targets == []
    out, targets = apply_masking(t, 5, seed=1)
    assert list(out[1:6]) == [MASK] * 5 and out[0] == PSTART and out[6] == PEND and out[7] == PAD
    assert targets == [(1, 10), (2, 20), (3, 30), (4, 40), (5, 50)]
    with pytest.raises(TooManyMasks):
        apply_masking(t, 6, seed=1)


def test_masking_deterministic_and_only_colors():
    t = tokens5([1, 2, 3, 4, 5])
    a = apply_masking(t, 3, seed=7)
    b = apply_masking(t, 3, seed=7)
    assert np.array_equal(a[0], b[0]) and a[1] == b[1]
    for seed in range(30):
        out, targets = apply_masking(t, 2, seed)
        assert len({p for p, _ in targets}) == 2
        assert all(1 <= p <= 5 for p, _ in targets)


# --- forward ---------------------------------------------------------------

def test_forward_shapes():
    cfg = McmConfig(d_model=16, n_layers=2, n_heads=4)
    p = init_params(cfg)
    t = tokens5([1, 2, MASK, 4, 5])
    assert forward(p, cfg, t).shape == (8, 4100)
    assert forward(p, cfg, np.stack([t, t])).shape == (2, 8, 4100)
    with pytest.raises(ShapeMismatch):
        forward(p, cfg, np.zeros(9, dtype=int))
    with pytest.raises(ShapeMismatch):
        forward(p, cfg, np.full(8, 5000))


def test_pad_position_invariance():
    cfg = McmConfig(d_model=16, n_layers=2, n_heads=4, seq_len=8)
    p = jitter(init_params(cfg, 1, np.float64), np.random.default_rng(0))
    short = np.array([PSTART, 3, 900, MASK, 77, 2000, PEND])
    padded = np.append(short, PAD)
    np.testing.assert_allclose(forward(p, cfg, padded)[:7], forward(p, cfg, short), atol=1e-5)


def test_logits_ignore_values_stored_in_pad_slots():
    cfg = McmConfig(d_model=16, n_layers=2, n_heads=4, seq_len=8)
    p = jitter(init_params(cfg, 1, np.float64), np.random.default_rng(0))
    t = tokenize_codes([5, 6, 7], 8)
    t[2] = MASK
    before = forward(p, cfg, t)
    p2 = dict(p)
    p2["tok_emb"] = p["tok_emb"].copy()
    p2["tok_emb"][PAD] = np.random.default_rng(5).normal(0, 10, 16)
    after = forward(p2, cfg, t)
    nonpad = t != PAD
    np.testing.assert_allclose(after[nonpad], before[nonpad], atol=1e-12)


def test_conditioning_sensitivity_and_rejection():
    cfg = tiny_cfg(cond=True, n_heads=2)
    p = jitter(init_params(cfg, 0, np.float64), np.random.default_rng(1))
    t = tokenize_codes([1, 2, 3], 5)
    c1 = stub_condition_encoder("a cat", 4, 16)
    c2 = stub_condition_encoder("a dog", 4, 16)
    assert not np.allclose(forward(p, cfg, t, c1), forward(p, cfg, t, c2))
    with pytest.raises(MissingCondition):
        forward(p, cfg, t)
    with pytest.raises(ShapeMismatch):
        forward(p, cfg, t, np.zeros((4, 15)))
    plain = tiny_cfg()
    with pytest.raises(UnexpectedCondition):
        forward(init_params(plain), plain, t, c1)


def test_softmax_normalised():
    cfg = McmConfig(d_model=16, n_layers=1, n_heads=2)
    p = jitter(init_params(cfg, 0, np.float64), np.random.default_rng(2), 1.0)
    probs = softmax(forward(p, cfg, tokens5([1, MASK, 3, MASK, 5])))
    np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-6)


@pytest.mark.parametrize("cond,heads", [(False, 1), (False, 2), (True, 1), (True, 2)])
def test_forward_matches_straight_line_oracle(cond, heads):
    cfg = tiny_cfg(cond, n_heads=heads)
    rng = np.random.default_rng(heads + 10 * cond)
    p = jitter(init_params(cfg, 0, np.float64), rng)
    for _ in range(5):
        n = int(rng.integers(1, 4))
        t = tokenize_codes(rng.integers(0, N_CODES, n), 5)
        t[1 + rng.integers(0, n)] = MASK
        c = rng.uniform(-1, 1, (int(rng.integers(1, 5)), 16)) if cond else None
        got = forward(p, cfg, t, c)
        want = straight_line_logits(p, t.tolist(), c, cfg.n_layers, cfg.n_heads)
        np.testing.assert_allclose(got, want, atol=1e-10, rtol=0)


# --- loss / gradients --------------------------------------------------------

def test_uniform_loss_is_log_vocab():
    cfg = tiny_cfg()
    p = init_params(cfg, 0, np.float64)
    p["head.w"][:] = 0
    batch = collate([(np.array([PSTART, MASK, 7, PEND, PAD]), [(1, 5)], None)])
    loss, _ = loss_and_grads(p, cfg, batch)
    assert loss == pytest.approx(math.log(4100), abs=1e-6)


def test_empty_targets():
    with pytest.raises(EmptyTargets):
        collate([(np.array([PSTART, 3, PEND]), [], None)])


def gradient_batch(cond, rng):
    def c():
        return rng.uniform(-1, 1, (4, 16)) if cond else None

    return collate(
        [
            (np.array([PSTART, 5, MASK, MASK, PEND]), [(2, 7), (3, 9)], c()),
            (np.array([PSTART, MASK, 11, PEND, PAD]), [(1, 3)], c()),
            (np.array([PSTART, MASK, MASK, MASK, PEND]), [(1, 3), (2, 100), (3, 4000)], c()),
        ],
        np.float64,
    )


@pytest.mark.parametrize("cond", [False, True])
def test_gradients_match_finite_differences(cond):
    cfg = tiny_cfg(cond, n_heads=2)
    rng = np.random.default_rng(1)
    p = jitter(init_params(cfg, 0, np.float64), rng)
    errors = model_gradient_check(p, cfg, gradient_batch(cond, rng))
    assert set(errors) == set(p)
    worst = max(errors, key=errors.get)
    assert errors[worst] < 1e-4, (worst, errors[worst])


def dequantize_lab(code):
    return LabColor(*map(float, dequantize_array(code)))


def test_memorise_single_example():
    cfg = McmConfig(d_model=32, n_layers=1, n_heads=4, seq_len=7)
    p = init_params(cfg, 0, np.float64)
    batch = collate([(np.array([PSTART, 100, MASK, 300, MASK, 500, PEND]), [(2, 200), (4, 400)], None)])
    losses = []
    for _ in range(50):
        loss, grads = loss_and_grads(p, cfg, batch)
        losses.append(loss)
        for k in p:
            p[k] -= 0.3 * grads[k]
    assert losses[-1] < 0.01 < losses[0]
    out = predict_masked(p, cfg, [dequantize_lab(100), None, dequantize_lab(300), None, dequantize_lab(500)])
    assert [quantize(c) for c in out] == [100, 200, 300, 400, 500]


# --- inference ----------------------------------------------------------------

def test_predict_masked_contract():
    cfg = McmConfig(d_model=16, n_layers=1, n_heads=2)
    p = init_params(cfg)
    colors = [LabColor(50, 10, 10), None, LabColor(20, -5, 3)]
    out = predict_masked(p, cfg, colors)
    assert len(out) == 3
    assert out[0] == colors[0] and out[2] == colors[2]
    with pytest.raises(NoMaskedSlots):
        predict_masked(p, cfg, [LabColor(50, 0, 0)])


def test_embed_palette():
    cfg = McmConfig(d_model=16, n_layers=1, n_heads=2)
    p = jitter(init_params(cfg, 0), np.random.default_rng(0))
    pal = [[50, 10, 10], [20, -5, 3]]
    e = embed_palette(p, cfg, pal)
    assert e.shape == (16,)
    assert np.array_equal(e, embed_palette(p, cfg, pal))
    assert np.linalg.norm(e - embed_palette(p, cfg, [[50, 10, 10], [80, 40, 3]])) > 0


def random_code_examples(n, seed):
    rng = np.random.default_rng(seed)
    return [PaletteExample(dequantize_array(rng.integers(0, N_CODES, 5))) for _ in range(n)]


def test_grid_chance_level_for_untrained_model():
    cfg = McmConfig(d_model=16, n_layers=1, n_heads=2)
    examples = random_code_examples(700, 0)
    rows = evaluate_grid(init_params(cfg, 0), cfg, examples)
    positions = sum(r.n_positions for r in rows)
    assert positions >= 10_000
    hits = sum(round(r.accuracy * r.n_positions) for r in rows)
    lo, hi = binom.interval(0.99, positions, 1 / 4096)
    assert lo <= hits <= hi


def test_grid_perfect_oracle():
    examples = random_code_examples(40, 1)
    cfg = McmConfig(d_model=8, n_layers=1, n_heads=1)
    truth = np.stack([tokenize_codes(ex.codes, 8) for ex in examples])

    def oracle(tokens, cond, cond_mask):
        return truth

    rows = evaluate_grid(None, cfg, examples, seeds=(0, 1), predictor=oracle)
    assert [r.n_mask for r in rows] == [1, 2, 3, 4, 5]
    assert all(r.accuracy == 1.0 and r.dccw == 0.0 for r in rows)
    assert [r.n_positions for r in rows] == [80 * n for n in range(1, 6)]


def test_grid_quantisation_floor():
    rng = np.random.default_rng(3)
    lab = np.column_stack([rng.uniform(0, 100, (20, 5)).ravel(), rng.uniform(-100, 100, (100, 2))]).reshape(20, 5, 3)
    examples = [PaletteExample(x) for x in lab]
    cfg = McmConfig(d_model=8, n_layers=1, n_heads=1)
    truth = np.stack([tokenize_codes(ex.codes, 8) for ex in examples])
    rows = evaluate_grid(None, cfg, examples, predictor=lambda t, c, m: truth)
    assert all(r.accuracy == 1.0 for r in rows)
    assert all(r.dccw > 0 for r in rows)
    assert rows[0].dccw < rows[-1].dccw


def test_grid_errors():
    cfg = McmConfig(d_model=8, n_layers=1, n_heads=1)
    with pytest.raises(EmptyDataset):
        evaluate_grid(None, cfg, [])


# --- persistence -----------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    cfg = tiny_cfg(cond=True)
    p = jitter(init_params(cfg, 0), np.random.default_rng(0))
    p = {k: v.astype(np.float32) for k, v in p.items()}
    save_checkpoint(p, cfg, tmp_path / "m.mcm")
    q, cfg2 = load_checkpoint(tmp_path / "m.mcm")
    assert cfg2 == cfg
    assert all(q[k].dtype == np.float32 and q[k].tobytes() == p[k].tobytes() for k in p)
    assert checkpoint_bytes(q, cfg2) == (tmp_path / "m.mcm").read_bytes()


def test_checkpoint_corruption(tmp_path):
    cfg = tiny_cfg()
    data = checkpoint_bytes(init_params(cfg), cfg)
    (tmp_path / "t.mcm").write_bytes(data[:-10])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "t.mcm")
    (tmp_path / "m.mcm").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "m.mcm")
    (tmp_path / "v.mcm").write_bytes(data.replace(b'"version":1', b'"version":9', 1))
    with pytest.raises(VersionError):
        load_checkpoint(tmp_path / "v.mcm")


def test_stub_encoder():
    a = stub_condition_encoder("sunset beach", 4, 16)
    assert a.shape == (4, 16) and a.dtype == np.float32
    assert np.array_equal(a, stub_condition_encoder("sunset beach", 4, 16))
    assert not np.array_equal(a, stub_condition_encoder("forest", 4, 16))
    assert a.min() >= -1 and a.max() <= 1


def test_pteb_round_trip(tmp_path):
    m = stub_condition_encoder("x", 3, 5)
    write_pteb(tmp_path / "x.pteb", m)
    raw = (tmp_path / "x.pteb").read_bytes()
    assert raw[:5] == b"PTEB\x01" and len(raw) == 13 + 60
    assert np.array_equal(read_pteb(tmp_path / "x.pteb"), m)
    (tmp_path / "y.pteb").write_bytes(raw[:-4])
    with pytest.raises(FormatError):
        read_pteb(tmp_path / "y.pteb")


# --- training --------------------------------------------------------------------

def small_sets(n_train=24, n_val=8):
    return random_code_examples(n_train, 10), random_code_examples(n_val, 11)


def test_early_stopping_mechanics():
    cfg = McmConfig(d_model=8, n_layers=1, n_heads=1)
    tr, va = small_sets()
    losses = [5.0, 4.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0]
    snapshots = {}

    def evaluate(params, epoch):
        return losses[epoch - 1], 0.0

    def on_epoch(epoch, params, history):
        snapshots[epoch] = {k: v.copy() for k, v in params.items()}

    best, hist = train(cfg, TrainConfig(patience=2, max_epochs=50, lr=1e-3), tr, va, evaluate=evaluate, on_epoch=on_epoch)
    assert hist.epochs == 5 and hist.best_epoch == 3
    assert all(np.array_equal(best[k], snapshots[3][k]) for k in best)
    assert not np.array_equal(best["head.w"], snapshots[5]["head.w"])


def test_training_is_deterministic():
    cfg = McmConfig(d_model=8, n_layers=1, n_heads=2)
    tr, va = small_sets()
    tc = TrainConfig(max_epochs=3, batch_size=8, lr=1e-3, seed=4)
    pa, ha = train(cfg, tc, tr, va)
    pb, hb = train(cfg, tc, tr, va)
    assert ha == hb
    assert all(pa[k].tobytes() == pb[k].tobytes() for k in pa)
    assert len(ha.train_loss) == len(ha.val_loss) == len(ha.val_acc1) == 3


def test_training_reduces_loss_and_rejects_empty():
    cfg = McmConfig(d_model=16, n_layers=1, n_heads=2)
    tr, va = small_sets()
    _, hist = train(cfg, TrainConfig(max_epochs=8, batch_size=8, lr=3e-3), tr, tr)
    assert hist.train_loss[-1] < hist.train_loss[0]
    with pytest.raises(EmptyDataset):
        train(cfg, TrainConfig(), [], va)
