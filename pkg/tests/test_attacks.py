from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from crossgae import diffnum as dn
from crossgae.attacks import (AttackConfig, BudgetError, ClassifierHead, adversarial_adjacency, attack_set,
                              cw_latent, delta_edge, finetune_reconstructor, pgd_latent, project_l1_ball,
                              random_latent, results_csv, success_rate, summary_csv, train_classifier)
from crossgae.diffnum import Tape, Tensor
from crossgae.graphdata import GraphSet, protein_like_dataset
from crossgae.models import GraphAutoencoder, ModelConfig, encode
from crossgae.training import AdamW


def _bisection_projection(v, eps):
    a = np.abs(v)
    if a.sum() <= eps:
        return v.copy()
    lo, hi = 0.0, a.max()
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.maximum(a - mid, 0).sum() > eps:
            lo = mid
        else:
            hi = mid
    return np.sign(v) * np.maximum(a - hi, 0)


vectors = arrays(np.float64, st.integers(1, 30), elements=st.floats(-10, 10))


@given(vectors, st.floats(0.01, 20))
def test_l1_projection_matches_bisection(v, eps):
    p = project_l1_ball(v, eps)
    assert np.abs(p).sum() <= eps
    assert np.allclose(p, _bisection_projection(v, eps), atol=1e-9)
    assert np.allclose(project_l1_ball(p, eps), p)


@given(vectors, st.floats(0.01, 20), st.integers(0, 2 ** 31))
def test_l1_projection_is_nearest(v, eps, seed):
    p = project_l1_ball(v, eps)
    rng = np.random.default_rng(seed)
    for _ in range(10):
        x = rng.normal(size=v.shape)
        x *= rng.uniform(0, eps) / max(np.abs(x).sum(), 1e-12)
        assert np.linalg.norm(v - p) <= np.linalg.norm(v - x) + 1e-9


def test_l1_projection_examples():
    assert np.array_equal(project_l1_ball(np.array([3.0, -1.0]), 0.0), [0.0, 0.0])
    assert np.allclose(project_l1_ball(np.array([3.0, -1.0]), 2.0), [2.0, 0.0])
    assert np.allclose(project_l1_ball(np.array([0.5, -0.25]), 1.0), [0.5, -0.25])
    assert project_l1_ball(np.ones((2, 3)), 3.0).shape == (2, 3)


def test_delta_edge_examples():
    a = np.zeros((10, 10), dtype=np.int8)
    b = a.copy()
    b[2, 7] = b[7, 2] = 1
    assert delta_edge(a, b, directed=False) == pytest.approx(1 / 45)
    c = a.copy()
    c[2, 7] = 1
    assert delta_edge(a, c, directed=True) == pytest.approx(1 / 90)
    d = a.copy()
    np.fill_diagonal(d, 1)
    assert delta_edge(a, d, directed=False) == 0.0
    assert delta_edge(a, 1 - a, directed=False) == 1.0
    assert delta_edge(np.zeros((1, 1)), np.ones((1, 1)), False) == 0.0
    with pytest.raises(ValueError):
        delta_edge(a, a[:5, :5], False)


def test_budget_accounting():
    assert AttackConfig(steps=50).queries_needed() == 51
    assert AttackConfig(steps=300, finetune_steps=99).queries_needed() == 400
    with pytest.raises(BudgetError):
        AttackConfig(steps=400)
    with pytest.raises(ValueError):
        AttackConfig(epsilon=-1)


@pytest.fixture(scope="module")
def setup():
    gs = protein_like_dataset()
    gs = GraphSet(gs.graphs[:12], gs.feature_dim)
    model = GraphAutoencoder(ModelConfig(gs.feature_dim, 16, [1.0, 0.8, 1.0]), seed=0)
    head = ClassifierHead(16, 2, hidden=32, seed=0)
    rep = train_classifier(model, head, gs, epochs=3, seed=0)
    return model, head, gs, rep


def test_classifier_training_report(setup):
    _, _, _, rep = setup
    assert len(rep.epoch_loss) == 3 and 0.0 <= rep.train_accuracy <= 1.0 and rep.test_accuracy is None
    model, head, gs, _ = setup
    with pytest.raises(ValueError):
        train_classifier(model, head, gs, mode="bogus")


def test_head_has_capacity_for_separable_latents():
    rng = np.random.default_rng(0)
    data = [(rng.normal(size=(5, 4)) + (2.0 if k % 2 else -2.0), k % 2) for k in range(40)]
    head = ClassifierHead(4, 2, hidden=16, seed=1)
    opt = AdamW(head.parameters(), lr=1e-2)
    for _ in range(30):
        for z, y in data:
            opt.zero_grad()
            with Tape() as tape:
                dn.backward(dn.cross_entropy(head(Tensor(z)), y), tape)
            opt.step()
    with dn.no_grad():
        acc = np.mean([np.argmax(head(Tensor(z)).data) == y for z, y in data])
    assert acc >= 0.99


def test_pgd_stays_in_the_ball_and_leaves_features_alone(setup):
    model, head, gs, _ = setup
    cfg = AttackConfig(epsilon=2.0, step_size=0.3, steps=20)
    for g in gs.graphs[:4]:
        feats, adj = g.features.copy(), g.adjacency.copy()
        r = pgd_latent(model, head, g, cfg)
        assert len(r.l1_trace) == 20 and max(r.l1_trace) <= 2.0
        assert 0.0 <= r.delta_edge <= 1.0 and r.queries == 21
        assert np.array_equal(g.features, feats) and np.array_equal(g.adjacency, adj)
        assert np.all(np.diag(r.adjacency) == 0) and np.array_equal(r.adjacency, r.adjacency.T)


def test_zero_budget_perturbations(setup):
    model, head, gs, _ = setup
    g = gs.graphs[0]
    clean = adversarial_adjacency(model, encode(model, g), np.zeros((encode(model, g).Z.shape)), False)
    for r in (pgd_latent(model, head, g, AttackConfig(epsilon=0.0, steps=10)),
              pgd_latent(model, head, g, AttackConfig(steps=0)),
              random_latent(model, head, g, AttackConfig(epsilon=0.0)),
              cw_latent(model, head, g, AttackConfig(c=0.0, steps=10))):
        assert r.delta_l1 == 0.0
        assert np.array_equal(r.adjacency, clean)
    assert pgd_latent(model, head, g, AttackConfig(steps=0)).queries == 1


def test_random_baseline_has_exact_norm(setup):
    model, head, gs, _ = setup
    r = random_latent(model, head, gs.graphs[1], AttackConfig(epsilon=3.5))
    assert r.delta_l1 == pytest.approx(3.5) and r.queries == 1


def test_cw_moves_toward_a_decision_flip(setup):
    model, head, gs, _ = setup
    g = gs.graphs[2]
    r = cw_latent(model, head, g, AttackConfig(c=5.0, steps=30, step_size=0.05))
    assert r.delta_l1 > 0.0 and r.queries == 31


def test_finetuning_reduces_latent_distance(setup):
    model, _, gs, _ = setup
    g = gs.graphs[3]
    delta = np.random.default_rng(0).normal(scale=0.3, size=encode(model, g).Z.shape)
    before_params = [p.data.copy() for p in model.parameters()]
    _, before, after = finetune_reconstructor(model, g, delta, steps=15, lr=1e-2)
    assert after < before
    assert all(np.array_equal(a, p.data) for a, p in zip(before_params, model.parameters()))
    _, b0, a0 = finetune_reconstructor(model, g, delta, steps=0)
    assert b0 == a0 == pytest.approx(before)


def test_attack_set_is_deterministic_across_threads(setup):
    model, head, gs, _ = setup
    cfg = AttackConfig(epsilon=1.0, steps=5, finetune_steps=2)
    sub = GraphSet(gs.graphs[:3], gs.feature_dim)
    r1 = attack_set(model, head, sub, cfg)
    r2 = attack_set(model, head, sub, cfg, workers=3)
    assert results_csv(r1) == results_csv(r2)
    assert all(r.queries == 8 and r.finetune_distance is not None for r in r1 if r.method != "random")
    assert summary_csv(r1, 0.5) == summary_csv(r2, 0.5)
    assert 0.0 <= success_rate(r1, "pgd") <= 1.0 and np.isnan(success_rate(r1, "nope"))
    with pytest.raises(ValueError):
        attack_set(model, head, sub, cfg, methods=("nope",))
