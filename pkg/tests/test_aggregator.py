import numpy as np
import pytest

from brmil import numcore as nc
from brmil.aggregator import (AggConfig, Aggregator, TokenBatch, attention_flops, lipschitz_probe, pack,
                              pack_empty, tokenize, truncate_mask)
from brmil.numcore import Tensor

CFG = AggConfig(d_tok=7, width=8, heads=2, depth=2, ff=12)


def batch(g, B, L, counts, d=7):
    tok = np.zeros((B, L, d))
    mask = np.zeros((B, L), dtype=bool)
    for b, c in enumerate(counts):
        tok[b, :c] = g.normal(size=(c, d))
        mask[b, :c] = True
    return tok, mask


def test_tokenize_layout():
    t = tokenize(np.zeros(384), 1.0, 6.0, 0.5).data
    assert t.shape == (387,)
    assert np.all(t[:384] == 0) and t[384:].tolist() == [1.0, 6.0, 0.5]


def test_tokenize_slice_recovers_h(rng):
    h = rng.normal(size=(4, 8))
    t = tokenize(h, rng.normal(size=4), np.full(4, 7.0), rng.random(4)).data
    assert t.shape == (4, 11)
    np.testing.assert_array_equal(t[:, :8], h)


def test_pack_cases(rng):
    toks = list(rng.normal(size=(3, 5)))
    b = pack(toks, 64)
    assert b.count == 3 and np.all(b.tokens[3:] == 0) and b.tokens.shape == (64, 5)
    full = pack(list(rng.normal(size=(4, 5))), 4)
    assert full.mask.all()
    empty = pack_empty(8, 5)
    assert empty.count == 0 and not empty.tokens.any()
    with pytest.raises(ValueError):
        pack(toks, 2)


def test_truncate_mask_cases(rng):
    b = pack(list(rng.normal(size=(5, 3))), 10)
    assert truncate_mask(b, 12).count == 5
    one = truncate_mask(b, 1)
    assert one.count == 1 and not one.tokens[1:].any()
    a = truncate_mask(truncate_mask(b, 8), 4)
    c = truncate_mask(b, 4)
    assert np.array_equal(a.tokens, c.tokens) and np.array_equal(a.mask, c.mask)


def test_single_token_sab_is_value_path(rng):
    agg = Aggregator(CFG, 3)
    P = {k: v.data for k, v in agg.params.items()}
    x = np.zeros((1, 4, 8))
    x[0, 0] = rng.normal(size=8)
    mask = np.array([[True, False, False, False]])
    with nc.no_grad():
        out = agg.sab(0, Tensor(x), mask).data

    def ln(v, g, b):
        mu = v.mean()
        return (v - mu) / np.sqrt(((v - mu) ** 2).mean() + 1e-5) * g + b
    v = x[0, 0] @ P["sab0.v.w"] + P["sab0.v.b"]
    h = ln(x[0, 0] + v @ P["sab0.o.w"] + P["sab0.o.b"], P["sab0.ln1.g"], P["sab0.ln1.b"])
    ff = np.maximum(h @ P["sab0.ff1.w"] + P["sab0.ff1.b"], 0) @ P["sab0.ff2.w"] + P["sab0.ff2.b"]
    want = ln(h + ff, P["sab0.ln2.g"], P["sab0.ln2.b"])
    np.testing.assert_allclose(out[0, 0], want, atol=1e-12)
    assert not out[0, 1:].any()


def test_sab_is_permutation_equivariant(rng):
    agg = Aggregator(CFG, 4)
    x = rng.normal(size=(1, 6, 8))
    mask = np.ones((1, 6), dtype=bool)
    perm = rng.permutation(6)
    with nc.no_grad():
        a = agg.sab(0, Tensor(x), mask).data
        b = agg.sab(0, Tensor(x[:, perm]), mask).data
    np.testing.assert_allclose(a[:, perm], b, atol=1e-10)


def test_duplicate_tokens_match_single_copy(rng):
    agg = Aggregator(CFG, 5)
    t = rng.normal(size=7)
    one = agg.forward(t[None, None], np.ones((1, 1), dtype=bool)).data
    many = agg.forward(np.tile(t, (1, 5, 1)), np.ones((1, 5), dtype=bool)).data
    np.testing.assert_allclose(one, many, atol=1e-12)


def test_zero_head_gives_sigmoid_bias(rng):
    agg = Aggregator(CFG, 6)
    agg.params["out.w"].data[:] = 0
    agg.params["out.b"].data[:] = -0.8
    tok, mask = batch(rng, 1, 5, [3])
    z, y = agg.pair_forward(TokenBatch(tok[0], mask[0]))
    assert z == -0.8 and y == pytest.approx(1 / (1 + np.exp(0.8)), abs=1e-15)


def test_permutation_bit_identical_in_canonical_mode(rng):
    agg = Aggregator(CFG, 7)
    for _ in range(100):
        c = int(rng.integers(1, 9))
        tok, mask = batch(rng, 1, 10, [c])
        perm = np.r_[rng.permutation(c), np.arange(c, 10)]
        a = agg.forward(tok, mask).data
        b = agg.forward(tok[:, perm], mask[:, perm]).data
        assert a.tobytes() == b.tobytes()
        raw = agg.forward(tok[:, perm], mask[:, perm], canonical=False).data
        assert abs(raw[0] - a[0]) < 1e-9


def test_extra_masked_rows_do_not_change_output(rng):
    agg = Aggregator(CFG, 8)
    tok, mask = batch(rng, 3, 4, [4, 2, 3])
    a = agg.forward(tok, mask).data
    pad = np.concatenate([tok, np.zeros((3, 6, 7))], axis=1)
    pmask = np.concatenate([mask, np.zeros((3, 6), dtype=bool)], axis=1)
    np.testing.assert_allclose(agg.forward(pad, pmask).data, a, atol=1e-10)


def test_all_masked_rejected():
    agg = Aggregator(CFG)
    with pytest.raises(ValueError, match="all-masked"):
        agg.forward(np.zeros((1, 3, 7)), np.zeros((1, 3), dtype=bool))


def test_default_token_width():
    assert AggConfig().d_tok == 387
    with pytest.raises(ValueError):
        AggConfig(width=10, heads=4)


def test_lipschitz_probe_finite(rng):
    agg = Aggregator(CFG, 2)
    tok, mask = batch(rng, 1, 6, [4])
    L = lipschitz_probe(agg, TokenBatch(tok[0], mask[0]), rng, samples=16)
    assert np.isfinite(L) and L > 0


def test_attention_flops_quadratic():
    assert attention_flops(64, 128) - 2 * 64 * 128 == 4 * (attention_flops(32, 128) - 2 * 32 * 128) * 1


def test_state_round_trip(rng):
    a, b = Aggregator(CFG, 1), Aggregator(CFG, 2)
    b.load_state(a.state())
    tok, mask = batch(rng, 2, 5, [5, 3])
    assert a.forward(tok, mask).data.tobytes() == b.forward(tok, mask).data.tobytes()
