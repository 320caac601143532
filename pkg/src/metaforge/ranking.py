"""Per-sample prediction statistics and difficulty/confidence ranking.

The adaptive score for a sample with true-class probability ``p_y``, best
wrong-class probability ``p_s``, margin ``|p_y - p_s|``, entropy ``H`` and
correctness flag ``i`` (1 when correct, 0 when misclassified) is::

    m_adaptive = -(p_y - H + margin - 2 * i * (1 + margin))

Sorting ascending puts confidently wrong samples first and confidently
right samples last; ``m_adv = -m_adaptive``.
"""
from dataclasses import dataclass

import numpy as np

from .rng import stream

TOP_K_EXACT = "top_k_exact"
RANDOM_FROM_TOP_K = "random_from_top_k"


@dataclass(frozen=True)
class PredictionStats:
    sample_id: object
    p_y: float
    p_s: float
    margin: float
    entropy: float
    correct: int
    m_adaptive: float
    m_adv: float


@dataclass(frozen=True)
class SelectionPolicy:
    top_k: int = 8
    n_select: int = 4
    mode: str = RANDOM_FROM_TOP_K
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.n_select <= self.top_k:
            raise ValueError(f"need 1 <= n_select <= top_k, got {self.n_select}, {self.top_k}")
        if self.mode not in (TOP_K_EXACT, RANDOM_FROM_TOP_K):
            raise ValueError(f"unknown selection mode {self.mode!r}")


def entropy_nats(probs):
    p = np.asarray(probs, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def adaptive_score(p_y, entropy, margin, correct):
    return -(p_y - entropy + margin - 2.0 * correct * (1.0 + margin))


def prediction_stats(probs, true_pos, sample_id=None):
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size < 2:
        raise ValueError("probs must be a vector over at least two classes")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-4:
        raise ValueError(f"probs do not form a distribution (sum={p.sum():.6f})")
    true_pos = int(true_pos)
    if not 0 <= true_pos < p.size:
        raise ValueError(f"true_pos {true_pos} outside {p.size} classes")
    p_y = float(p[true_pos])
    p_s = float(np.delete(p, true_pos).max())
    margin = abs(p_y - p_s)
    h = entropy_nats(p)
    correct = int(np.argmax(p) == true_pos)
    m = adaptive_score(p_y, h, margin, correct)
    return PredictionStats(sample_id, p_y, p_s, margin, h, correct, m, -m)


def batch_stats(probs, true_pos, sample_ids=None):
    probs = np.asarray(probs)
    if sample_ids is None:
        sample_ids = list(range(len(probs)))
    return [prediction_stats(p, t, s) for p, t, s in zip(probs, true_pos, sample_ids)]


def rank_for_synthesis(stats):
    """Sample ids by ascending m_adaptive; ties keep input order."""
    if not stats:
        raise ValueError("cannot rank an empty list")
    order = sorted(range(len(stats)), key=lambda i: stats[i].m_adaptive)
    return [stats[i].sample_id for i in order]


def rank_for_adversary(stats):
    """Correctly classified sample ids by descending m_adv (stable)."""
    if not stats:
        raise ValueError("cannot rank an empty list")
    keep = [i for i, s in enumerate(stats) if s.correct == 1]
    keep.sort(key=lambda i: -stats[i].m_adv)
    return [stats[i].sample_id for i in keep]


def select_representational(ranked, policy):
    head = list(ranked[:policy.top_k])
    if policy.mode == TOP_K_EXACT:
        return head
    n = min(policy.n_select, len(head))
    if n == 0:
        return []
    picks = stream(policy.seed, "select").choice(len(head), n, replace=False)
    return [head[i] for i in sorted(picks)]


def stats_table(stats, ranked_ids=None):
    """Rows for the rank-demo CSV (``rank`` is 1-based, 0 when unranked)."""
    ranks = {sid: i + 1 for i, sid in enumerate(ranked_ids or [])}
    return [
        {"sample_id": s.sample_id, "p_y": s.p_y, "p_s": s.p_s, "margin": s.margin,
         "entropy": s.entropy, "correct": s.correct, "m_adaptive": s.m_adaptive,
         "m_adv": s.m_adv, "rank": ranks.get(s.sample_id, 0)}
        for s in stats
    ]
