from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from crossgae import diffnum as dn
from crossgae.diffnum import Tensor, finite_difference_check as fdc
from crossgae.layers import (ConfigError, GcnParams, gcn_block, normalize_adjacency, pooled_size, topk_pool,
                             unpool)

from conftest import away_from_kinks


def _random_graph(rng, n, p=0.4):
    a = np.triu((rng.random((n, n)) < p).astype(np.int8), 1)
    return a + a.T


def test_normalize_adjacency_examples():
    assert np.allclose(normalize_adjacency(np.zeros((1, 1))), [[1.0]])
    assert np.allclose(normalize_adjacency(np.array([[0, 1], [1, 0]])), 0.5)
    tri = np.ones((3, 3)) - np.eye(3)
    assert np.allclose(normalize_adjacency(tri), 1.0 / 3.0)


def test_normalize_adjacency_matches_direct_formula(rng):
    for _ in range(20):
        a = _random_graph(rng, 8)
        a_hat = a + np.eye(8)
        d = np.diag(1.0 / np.sqrt(a_hat.sum(1)))
        got = normalize_adjacency(a)
        assert np.allclose(got, d @ a_hat @ d)
        assert np.allclose(got, got.T)


def test_regular_graph_gives_constant_entries():
    cyc = np.roll(np.eye(6, dtype=np.int8), 1, axis=1)
    cyc = cyc + cyc.T
    vals = normalize_adjacency(cyc)[(cyc + np.eye(6)) > 0]
    assert np.allclose(vals, 1.0 / 3.0)


def _exact_pooled(n: int, ratio: float) -> int:
    # rational arithmetic on the decimal ratio: no float rounding at all
    return max(1, math.ceil(Fraction(str(ratio)) * n))


@given(st.integers(1, 500), st.sampled_from([0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1]))
def test_pooled_size_matches_rational_ceiling(n, ratio):
    assert pooled_size(n, ratio) == _exact_pooled(n, ratio)


def test_protein_chain_on_39_nodes():
    n, chain = 39, []
    for r in (0.9, 0.8, 0.7, 0.6, 0.5):
        n = _exact_pooled(n, r)
        chain.append(n)
    assert chain == [36, 29, 21, 13, 7]
    n = 39
    for r in (0.9, 0.8, 0.7, 0.6, 0.5):
        n = pooled_size(n, r)
    assert n == 7


def test_topk_examples():
    p = Tensor([[1.0]])
    h = Tensor([[3.0], [1.0], [2.0], [0.0]])
    _, _, rec = topk_pool(h, np.zeros((4, 4)), 0.5, p)
    assert list(rec.kept_idx) == [0, 2]
    _, _, rec = topk_pool(Tensor(np.ones((4, 1))), np.zeros((4, 4)), 0.5, p)
    assert list(rec.kept_idx) == [0, 1]
    with pytest.raises(ConfigError):
        topk_pool(h, np.zeros((4, 4)), 0.0, p)


def test_full_ratio_pool_then_unpool_restores_order(rng):
    h = Tensor(rng.normal(size=(5, 3)))
    a = _random_graph(rng, 5)
    p = Tensor(rng.normal(size=(3, 1)))
    h_new, a_new, rec = topk_pool(h, a, 1.0, p)
    assert np.array_equal(a_new, a)
    assert list(rec.kept_idx) == list(range(5))
    back, a_back = unpool(h_new, rec)
    gate = np.tanh(h.data @ p.data / np.linalg.norm(p.data))
    assert np.allclose(back.data, h.data * gate)
    assert a_back is a


def test_unpool_zero_fills_dropped_rows(rng):
    h = Tensor(rng.normal(size=(3, 2)))
    h_new, _, rec = topk_pool(h, np.zeros((3, 3)), 0.3, Tensor(rng.normal(size=(2, 1))))
    back, _ = unpool(h_new, rec)
    assert h_new.shape == (1, 2)
    nonzero = np.flatnonzero(np.abs(back.data).sum(axis=1) > 0)
    assert list(nonzero) == list(rec.kept_idx)
    assert np.allclose(back.data[rec.kept_idx], h.data[rec.kept_idx] * rec.gate.data)
    with pytest.raises(ConfigError):
        unpool(Tensor(np.ones((2, 2))), rec)


def test_pool_is_permutation_consistent(rng):
    for _ in range(20):
        n = 9
        h = rng.normal(size=(n, 4))
        a = _random_graph(rng, n)
        p = Tensor(rng.normal(size=(4, 1)))
        perm = rng.permutation(n)
        _, a1, r1 = topk_pool(Tensor(h), a, 0.6, p)
        _, a2, r2 = topk_pool(Tensor(h[perm]), a[np.ix_(perm, perm)], 0.6, p)
        assert sorted(perm[r2.kept_idx]) == list(r1.kept_idx)
        order = np.argsort(perm[r2.kept_idx])
        assert np.array_equal(a2[np.ix_(order, order)], a1)


def test_gcn_block_examples(rng):
    prm = GcnParams(Tensor(np.eye(3)), Tensor(np.ones((1, 3))), Tensor(np.zeros((1, 3))))
    h = Tensor([[1.0, -2.0, 3.0]])
    out = gcn_block(h, normalize_adjacency(np.zeros((1, 1))), prm, "none")
    expected = dn.layer_norm(Tensor([[1.0, 0.0, 3.0]]), prm.ln_gain, prm.ln_bias).data
    assert np.allclose(out.data, expected)
    zero = Tensor(np.zeros((1, 3)))
    assert np.allclose(gcn_block(zero, np.ones((1, 1)), prm, "add").data,
                       gcn_block(zero, np.ones((1, 1)), prm, "none").data)
    assert gcn_block(h, np.ones((1, 1)), prm, "concat").shape == (1, 6)
    wide = GcnParams.init(rng, 3, 5)
    with pytest.raises(ConfigError):
        gcn_block(h, np.ones((1, 1)), wide, "add")


BLOCK_TOL = 1e-4


def test_gcn_block_gradients(rng):
    worst = 0.0
    for k in range(100):
        r = np.random.default_rng(k)
        a_norm = normalize_adjacency(_random_graph(r, 6))
        prm = GcnParams.init(r, 4, 4)
        mix = Tensor(r.normal(size=(6, 4)))
        f = lambda x: dn.sum_(dn.mul(gcn_block(x, a_norm, prm, "add"), mix))
        worst = max(worst, fdc(f, r.normal(size=(6, 4))))
        h_fixed = Tensor(r.normal(size=(6, 4)))
        g = lambda w: dn.sum_(dn.mul(gcn_block(h_fixed, a_norm, GcnParams(w, prm.ln_gain, prm.ln_bias), "none"),
                                     mix))
        worst = max(worst, fdc(g, away_from_kinks(prm.W.data)))
    assert worst < BLOCK_TOL


def test_pool_unpool_gradients():
    worst = 0.0
    for k in range(100):
        r = np.random.default_rng(500 + k)
        a = _random_graph(r, 7)
        p = Tensor(r.normal(size=(3, 1)))
        mix = Tensor(r.normal(size=(7, 3)))
        h0 = r.normal(size=(7, 3))

        def through_h(x):
            h_new, _, rec = topk_pool(x, a, 0.6, p)
            return dn.sum_(dn.mul(unpool(h_new, rec)[0], mix))

        def through_p(pp):
            h_new, _, rec = topk_pool(Tensor(h0), a, 0.6, pp)
            return dn.sum_(dn.mul(unpool(h_new, rec)[0], mix))

        scores = h0 @ p.data[:, 0]
        if np.min(np.abs(np.diff(np.sort(scores)))) < 1e-3:
            continue  # near-tie: the selection would flip inside the difference stencil
        worst = max(worst, fdc(through_h, h0), fdc(through_p, p.data))
    assert worst < BLOCK_TOL
