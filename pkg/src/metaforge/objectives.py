"""Loss terms of the refinement phase and the adaptive per-sample weights.

Scalar reference implementations live here; the trainer evaluates the same
quantities on the gradient tape via :mod:`metaforge.autodiff`.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class EmbeddingPair:
    e_orig: np.ndarray
    e_alt: np.ndarray
    similar: int
    sample_id: object = None

    def __post_init__(self):
        if self.similar not in (0, 1):
            raise ValueError(f"similar must be 0 or 1, got {self.similar}")


@dataclass(frozen=True)
class ScorePair:
    s_clean: float
    s_adv: float
    sample_id: object = None


@dataclass
class WeightStore:
    """Per-sample weights for the consistency and adversarial terms.

    Unknown ids read as 1.0 and are materialized on first use.
    """

    eta: float = 0.01
    w_t: dict = field(default_factory=dict)
    w_adv: dict = field(default_factory=dict)

    def tsac_weight(self, sample_id):
        return self.w_t.setdefault(sample_id, 1.0)

    def adv_weight(self, sample_id):
        return self.w_adv.setdefault(sample_id, 1.0)


@dataclass(frozen=True)
class LossBreakdown:
    l_base: float
    l_tsac: float
    l_adv: float
    l_unified: float
    lambda1: float
    lambda2: float


def cross_entropy(probs, true_pos):
    return float(-np.log(max(float(np.asarray(probs)[int(true_pos)]), PROB_FLOOR)))


def contrastive_loss(pair, m=1.0):
    if m <= 0:
        raise ValueError("margin must be positive")
    a = np.asarray(pair.e_orig, dtype=np.float64)
    b = np.asarray(pair.e_alt, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"embedding dimensions differ: {a.shape} vs {b.shape}")
    d = float(np.sqrt(((a - b) ** 2).sum()))
    y = pair.similar
    return y * d * d + (1 - y) * max(0.0, m - d) ** 2


def margin_ranking_loss(pair, m=1.0):
    if m <= 0:
        raise ValueError("margin must be positive")
    return max(0.0, m - (float(pair.s_clean) - float(pair.s_adv)))


def l_tsac(pairs, weights, m=1.0):
    return float(sum(weights.tsac_weight(p.sample_id) * contrastive_loss(p, m) for p in pairs))


def l_adv(pairs, weights, m=1.0):
    return float(sum(weights.adv_weight(p.sample_id) * margin_ranking_loss(p, m) for p in pairs))


def unified_loss(l_base, l_tsac, l_adv, lambda1=0.5, lambda2=0.5):
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("lambdas must be non-negative")
    total = l_base + lambda1 * l_tsac + lambda2 * l_adv
    return LossBreakdown(l_base, l_tsac, l_adv, total, lambda1, lambda2)


def weight_gradients(inner_losses, lam):
    """d L_unified / d W_i: the loss is linear in every weight."""
    return {sid: lam * float(v) for sid, v in inner_losses.items()}


def _descend(table, grads, eta):
    for sid, g in grads.items():
        if not np.isfinite(g):
            raise NumericError(f"non-finite weight gradient for sample {sid!r}")
        table[sid] = max(0.0, table.get(sid, 1.0) - eta * g)


def update_adaptive_weights(store, grads_t=None, grads_adv=None):
    """One projected gradient step on both weight tables (in place; returns store)."""
    if not store.eta > 0:
        raise ValueError("eta must be positive")
    _descend(store.w_t, grads_t or {}, store.eta)
    _descend(store.w_adv, grads_adv or {}, store.eta)
    return store
