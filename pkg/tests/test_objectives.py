import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metaforge.errors import NumericError
from metaforge.objectives import (EmbeddingPair, ScorePair, WeightStore, contrastive_loss, cross_entropy, l_adv,
                                  l_tsac, margin_ranking_loss, unified_loss, update_adaptive_weights,
                                  weight_gradients)


def test_cross_entropy():
    assert cross_entropy([1.0, 0.0], 0) == 0.0
    assert cross_entropy([math.exp(-1), 1 - math.exp(-1)], 0) == pytest.approx(1.0, abs=1e-6)
    assert cross_entropy([0.25] * 4, 2) == pytest.approx(1.3863, abs=1e-4)
    assert cross_entropy([0.0, 1.0], 0) == pytest.approx(-math.log(1e-12))


def test_contrastive_examples():
    z = np.zeros(2)
    assert contrastive_loss(EmbeddingPair(z, z, 1)) == 0
    assert contrastive_loss(EmbeddingPair(z, z, 0), m=1.0) == 1.0
    assert contrastive_loss(EmbeddingPair(z, np.array([3.0, 4.0]), 1)) == 25.0
    assert contrastive_loss(EmbeddingPair(z, np.array([3.0, 4.0]), 0), m=5.0) == 0.0
    with pytest.raises(ValueError):
        contrastive_loss(EmbeddingPair(z, np.zeros(3), 1))
    with pytest.raises(ValueError):
        contrastive_loss(EmbeddingPair(z, z, 1), m=0)
    with pytest.raises(ValueError):
        EmbeddingPair(z, z, 2)


def test_margin_ranking_examples():
    assert margin_ranking_loss(ScorePair(2.0, 0.5)) == 0
    assert margin_ranking_loss(ScorePair(0.2, 0.5)) == pytest.approx(1.3)
    assert margin_ranking_loss(ScorePair(0.7, 0.7)) == 1.0
    with pytest.raises(ValueError):
        margin_ranking_loss(ScorePair(0, 0), m=-1)


def test_weighted_sums():
    store = WeightStore()
    pair = EmbeddingPair(np.zeros(2), np.array([3.0, 4.0]), 1, "s1")
    assert l_tsac([], store) == 0 and l_adv([], store) == 0
    assert l_tsac([pair], store) == 25.0
    assert store.w_t == {"s1": 1.0}
    store.w_t["s1"] = 0.5
    assert l_tsac([pair], store) == 12.5
    sp = ScorePair(0.2, 0.5, "a")
    assert l_adv([sp], store) == pytest.approx(1.3)
    assert l_adv([sp, ScorePair(0.2, 0.5, "b")], store) == 2 * l_adv([sp], store)


def test_unified_examples():
    assert unified_loss(1, 2, 4).l_unified == 4.0
    assert unified_loss(1.7, 9, 9, 0, 0).l_unified == 1.7
    assert unified_loss(0, 3, 5, 1, 1).l_unified == 8
    with pytest.raises(ValueError):
        unified_loss(1, 1, 1, -0.1, 0)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 50), st.floats(0, 50), st.floats(0, 50), st.floats(0, 2), st.floats(0, 2))
def test_unified_identity(b, t, a, l1, l2):
    br = unified_loss(b, t, a, l1, l2)
    assert abs(br.l_unified - (b + l1 * t + l2 * a)) <= 1e-6 * max(1, br.l_unified)
    assert br.l_unified >= br.l_base


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3), st.lists(st.floats(-3, 3), min_size=3, max_size=3),
       st.integers(0, 1), st.floats(0.1, 5))
def test_loss_terms_non_negative(a, b, y, m):
    assert contrastive_loss(EmbeddingPair(np.array(a), np.array(b), y), m) >= 0
    assert margin_ranking_loss(ScorePair(a[0], b[0]), m) >= 0
    d = np.linalg.norm(np.subtract(a, b))
    if y == 0 and d >= m:
        assert contrastive_loss(EmbeddingPair(np.array(a), np.array(b), 0), m) == 0


def test_weight_gradient_closed_form():
    rng = np.random.default_rng(0)
    pairs = [EmbeddingPair(rng.normal(size=4), rng.normal(size=4), int(rng.integers(0, 2)), i) for i in range(5)]
    adv = [ScorePair(*rng.normal(size=2), sample_id=i) for i in range(5)]
    lam1, lam2, h = 0.5, 0.5, 1e-4

    def total(store):
        return unified_loss(1.0, l_tsac(pairs, store), l_adv(adv, store), lam1, lam2).l_unified

    base = WeightStore()
    ref = total(base)
    grads = weight_gradients({p.sample_id: contrastive_loss(p) for p in pairs}, lam1)
    for i in range(5):
        bumped = WeightStore(w_t=dict(base.w_t), w_adv=dict(base.w_adv))
        bumped.w_t[i] += h
        assert (total(bumped) - ref) == pytest.approx(grads[i] * h, abs=1e-6)
    grads_adv = weight_gradients({p.sample_id: margin_ranking_loss(p) for p in adv}, lam2)
    for i in range(5):
        bumped = WeightStore(w_t=dict(base.w_t), w_adv=dict(base.w_adv))
        bumped.w_adv[i] += h
        assert (total(bumped) - ref) == pytest.approx(grads_adv[i] * h, abs=1e-6)


def test_weight_updates():
    store = WeightStore(eta=0.1, w_t={"a": 1.0, "b": 0.01, "c": 0.7}, w_adv={"x": 1.0})
    update_adaptive_weights(store, {"a": 0.5, "b": 1.0, "c": 0.0}, {"x": 0.5})
    assert store.w_t["a"] == pytest.approx(0.95)
    assert store.w_t["b"] == 0.0
    assert store.w_t["c"] == 0.7
    assert store.w_adv == {"x": pytest.approx(0.95)}
    update_adaptive_weights(store, {"new": 1.0})
    assert store.w_t["new"] == pytest.approx(0.9)
    with pytest.raises(NumericError):
        update_adaptive_weights(store, {"a": float("nan")})
    with pytest.raises(ValueError):
        update_adaptive_weights(WeightStore(eta=0.0), {})


@settings(max_examples=100, deadline=None)
@given(st.dictionaries(st.integers(0, 20), st.floats(-10, 10), max_size=10), st.floats(1e-4, 1))
def test_weights_stay_non_negative(grads, eta):
    store = WeightStore(eta=eta)
    for _ in range(3):
        update_adaptive_weights(store, grads, grads)
    assert all(w >= 0 for w in store.w_t.values()) and all(w >= 0 for w in store.w_adv.values())
