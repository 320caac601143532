import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metaforge.ranking import (RANDOM_FROM_TOP_K, TOP_K_EXACT, PredictionStats, SelectionPolicy, adaptive_score,
                               batch_stats, prediction_stats, rank_for_adversary, rank_for_synthesis,
                               select_representational, stats_table)

from oracles import entropy_ext, m_adaptive_ext, tier_grid_violations

# frozen from oracles.m_adaptive_ext (fsum evaluation)
M_09_01 = 2.2250829733914483
M_02_08 = -0.29959757646181223


def test_confident_correct_example():
    s = prediction_stats([0.9, 0.1], 0)
    assert (s.p_y, s.p_s, s.correct) == (0.9, 0.1, 1)
    assert s.margin == pytest.approx(0.8)
    assert s.entropy == pytest.approx(0.3251, abs=1e-4)
    assert s.m_adaptive == pytest.approx(M_09_01, abs=1e-9)
    assert s.m_adaptive == pytest.approx(2.2251, abs=1e-3)


def test_confident_wrong_example():
    s = prediction_stats([0.2, 0.8], 0)
    assert s.correct == 0 and s.margin == pytest.approx(0.6)
    assert s.entropy == pytest.approx(0.5004, abs=1e-4)
    assert s.m_adaptive == pytest.approx(M_02_08, abs=1e-9)


def test_tie_counts_as_correct():
    s = prediction_stats([0.5, 0.5], 0)
    assert s.margin == 0 and s.entropy == pytest.approx(math.log(2)) and s.correct == 1
    assert prediction_stats([0.5, 0.5], 1).correct == 0


def test_zero_probability_entropy():
    assert prediction_stats([1.0, 0.0, 0.0], 0).entropy == 0.0


@pytest.mark.parametrize("probs,pos", [([0.5, 0.6], 0), ([1.0], 0), ([0.5, 0.5], 2), ([-0.1, 1.1], 0)])
def test_invalid_inputs(probs, pos):
    with pytest.raises(ValueError):
        prediction_stats(probs, pos)


def test_sum_tolerance():
    prediction_stats([0.5, 0.50009], 0)
    with pytest.raises(ValueError):
        prediction_stats([0.5, 0.5002], 0)


@settings(max_examples=300, deadline=None)
@given(st.integers(2, 6).flatmap(lambda n: st.tuples(
    st.lists(st.floats(0.001, 1), min_size=n, max_size=n), st.integers(0, n - 1))))
def test_stats_match_oracle(args):
    raw, pos = args
    p = np.asarray(raw) / np.sum(raw)
    s = prediction_stats(p, pos)
    assert s.m_adaptive == pytest.approx(m_adaptive_ext(p.tolist(), pos), abs=1e-9)
    assert s.m_adv == -s.m_adaptive
    assert 0 <= s.entropy <= math.log(len(p)) + 1e-12
    assert 0 <= s.margin <= 1
    assert s.entropy == pytest.approx(entropy_ext(p.tolist()), abs=1e-12)


def test_rank_examples():
    stats = [prediction_stats([0.9, 0.1], 0, "a"), prediction_stats([0.2, 0.8], 0, "b")]
    assert rank_for_synthesis(stats) == ["b", "a"]


def test_tier_order_at_fixed_confidence():
    # one synthetic sample per tier, same p_y and entropy
    p_y, h = 0.5, 0.6
    def mk(sid, margin, correct):
        m = adaptive_score(p_y, h, margin, correct)
        return PredictionStats(sid, p_y, 0.0, margin, h, correct, m, -m)
    stats = [mk("right-large", 0.9, 1), mk("wrong-small", 0.1, 0), mk("right-small", 0.1, 1), mk("wrong-large", 0.9, 0)]
    assert rank_for_synthesis(stats) == ["wrong-large", "wrong-small", "right-small", "right-large"]


def test_ranking_is_stable_and_permutation_invariant():
    same = [prediction_stats([0.7, 0.3], 0, i) for i in range(5)]
    assert rank_for_synthesis(same) == list(range(5))
    rng = np.random.default_rng(0)
    stats = batch_stats(rng.dirichlet(np.ones(3), 20), rng.integers(0, 3, 20))
    ranked = rank_for_synthesis(stats)
    perm = rng.permutation(20)
    shuffled = rank_for_synthesis([stats[i] for i in perm])
    assert [stats[i].m_adaptive for i in ranked] == [stats[i].m_adaptive for i in shuffled]
    with pytest.raises(ValueError):
        rank_for_synthesis([])


def test_adversary_ranking():
    stats = [prediction_stats([0.6, 0.4], 0, "soft"), prediction_stats([0.99, 0.01], 0, "sure"),
             prediction_stats([0.3, 0.7], 0, "wrong")]
    assert rank_for_adversary(stats) == ["sure", "soft"]
    assert rank_for_adversary([stats[2]]) == []
    assert rank_for_adversary([stats[0]]) == ["soft"]


def test_selection():
    ids = list(range(10))
    assert select_representational(ids, SelectionPolicy(3, 3, TOP_K_EXACT)) == [0, 1, 2]
    assert select_representational(ids[:2], SelectionPolicy(5, 2, TOP_K_EXACT)) == [0, 1]
    pol = SelectionPolicy(5, 2, RANDOM_FROM_TOP_K, seed=11)
    a = select_representational(ids, pol)
    assert a == select_representational(ids, pol)
    assert len(a) == 2 and set(a) <= set(range(5)) and a == sorted(a)
    assert select_representational([], pol) == []
    assert select_representational([7], pol) == [7]
    for bad in [(3, 0), (3, 4)]:
        with pytest.raises(ValueError):
            SelectionPolicy(*bad)
    with pytest.raises(ValueError):
        SelectionPolicy(mode="greedy")


def test_stats_table_ranks():
    stats = batch_stats([[0.9, 0.1], [0.2, 0.8]], [0, 0], ["a", "b"])
    rows = stats_table(stats, rank_for_synthesis(stats))
    assert [r["rank"] for r in rows] == [2, 1]
    assert set(rows[0]) == {"sample_id", "p_y", "p_s", "margin", "entropy", "correct", "m_adaptive", "m_adv", "rank"}


def test_tier_separation_on_coarse_grid():
    v, n = tier_grid_violations(0.05)
    assert v == 0 and n > 0
