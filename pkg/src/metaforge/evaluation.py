"""Real/fake metrics, cross-dataset evaluation and N-way / K-shot sweeps."""
import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata, spearmanr

from .data import sample_task
from .errors import ValidationError
from .model import forward, softmax_restricted
from .rng import derive_key
from .trainer import few_shot_adapt

SCENARIOS = ("unseen", "seen-train")


@dataclass
class MetricsReport:
    accuracy: float
    auc: float  # None when only one label is present
    f1: float
    n_samples: int
    scenario: str = ""
    dataset_id: int = None
    seen_train: bool = False
    adapted: bool = False
    breakdown: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


@dataclass
class SweepTable:
    axis: str
    rows: list  # (axis_value, mean_acc, std, n_tasks)

    def values(self):
        return [r[0] for r in self.rows]

    def means(self):
        return [r[1] for r in self.rows]

    def spearman(self):
        return float(spearmanr(self.values(), self.means()).statistic)


def _as_binary(labels):
    out = []
    for lab in labels:
        if lab in ("fake", 1, True):
            out.append(1)
        elif lab in ("real", 0, False):
            out.append(0)
        else:
            raise ValueError(f"label must be real/fake, got {lab!r}")
    return np.asarray(out, dtype=int)


def rank_auc(scores, labels):
    """Mann-Whitney AUC with midranks for ties; None if a class is absent."""
    s = np.asarray(scores, dtype=np.float64)
    y = _as_binary(labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def compute_metrics(scores, labels, threshold=0.5):
    s = np.asarray(scores, dtype=np.float64)
    y = _as_binary(labels)
    if len(s) < 1 or len(s) != len(y):
        raise ValueError("scores and labels need equal, non-zero length")
    pred = (s >= threshold).astype(int)
    tp = int(((pred == 1) & (y == 1)).sum())
    fp = int(((pred == 1) & (y == 0)).sum())
    fn = int(((pred == 0) & (y == 1)).sum())
    denom = 2 * tp + fp + fn
    f1 = 2 * tp / denom if denom else 0.0
    return MetricsReport(float((pred == y).mean()), rank_auc(s, y), float(f1), int(len(s)))


def binary_scores(params, batch, class_subset, authenticity):
    """Softmax mass on fake-flagged classes within ``class_subset``."""
    unknown = [c for c in class_subset if c not in authenticity]
    if unknown:
        raise ValueError(f"classes {unknown} are not registered")
    probs = softmax_restricted(forward(params, batch, class_subset).logits.value)
    fake = np.asarray([authenticity[c] == "fake" for c in class_subset])
    return probs[:, fake].sum(axis=1)


def _batched_scores(params, X, subset, authenticity, batch_size=256):
    parts = [binary_scores(params, X[i:i + batch_size], subset, authenticity)
             for i in range(0, len(X), batch_size)]
    return np.concatenate(parts) if parts else np.zeros(0)


def cross_dataset_eval(params, dataset, dataset_ids, scenario="unseen", score_classes=None,
                       authenticity=None, seen_train=(), adapt_steps=0, adapt_lr=0.05,
                       adapt_per_class=None, seed=0):
    """Evaluate a checkpoint on the test split of each listed dataset.

    ``unseen``: no adaptation; scores use ``score_classes`` (normally the
    checkpoint's training classes). ``seen-train``: optionally adapt on the
    dataset's own train split, then score over its own classes.
    """
    if scenario not in SCENARIOS:
        raise ValueError(f"scenario must be one of {SCENARIOS}")
    auth = dict(dataset.authenticity_map())
    if authenticity:
        auth.update(authenticity)
    seen = {int(d) for d in seen_train}
    reports = []
    for did in dataset_ids:
        classes = dataset.classes_of([did])
        ids = {c.class_id for c in classes}
        X, y = dataset.split_arrays("test", ids)
        if len(X) == 0:
            raise ValidationError([f"dataset {did} has an empty test split"])
        labels = [auth[c] for c in y]
        model = params
        adapted = False
        if scenario == "unseen":
            subset = list(score_classes) if score_classes is not None else sorted(ids)
        else:
            subset = sorted(ids)
            if adapt_steps > 0:
                Xa, ya = dataset.split_arrays("train", ids)
                if adapt_per_class:
                    rng = np.random.Generator(np.random.Philox(derive_key(seed, "adapt", did)))
                    keep = np.concatenate([rng.choice(np.flatnonzero(ya == c),
                                                      min(adapt_per_class, int((ya == c).sum())),
                                                      replace=False) for c in subset])
                    Xa, ya = Xa[np.sort(keep)], ya[np.sort(keep)]
                model = few_shot_adapt(params, Xa, ya, adapt_steps, adapt_lr, subset)
                adapted = True
        scores = _batched_scores(model, X, subset, auth)
        rep = compute_metrics(scores, labels)
        rep.scenario = scenario
        rep.dataset_id = int(did)
        rep.seen_train = int(did) in seen
        rep.adapted = adapted
        rep.breakdown = {"n_real": labels.count("real"), "n_fake": labels.count("fake"),
                         "score_classes": [int(c) for c in subset]}
        reports.append(rep)
    return reports


def sweep(params, dataset, axis, values, tasks_per_value=50, fixed_n=3, fixed_k=5,
          adapt_steps=5, adapt_lr=0.05, split="train", query_per_class=5, seed=0, dataset_ids=None):
    """Mean post-adaptation query accuracy as one episode axis varies."""
    if axis not in ("n_way", "k_shot"):
        raise ValueError("axis must be 'n_way' or 'k_shot'")
    values = [int(v) for v in values]
    if len(values) < 2 or values != sorted(values):
        raise ValueError("values must be sorted with at least two entries")
    n_classes = len(dataset.classes_of(dataset_ids))
    rows = []
    for v in values:
        n, k = (v, fixed_k) if axis == "n_way" else (fixed_n, v)
        if n > n_classes or n < 2:
            raise ValueError(f"n_way={n} infeasible with {n_classes} classes")
        accs = []
        task_seed = derive_key(seed, "sweep", axis, v)
        for t in range(tasks_per_value):
            ep = sample_task(dataset, (n, n), (k, k), split, task_seed, t, query_per_class,
                             dataset_ids=dataset_ids)
            Xs, ps = ep.support_batch()
            ys = np.asarray(ep.class_subset)[ps]
            phi = few_shot_adapt(params, Xs, ys, adapt_steps, adapt_lr, ep.class_subset)
            Xq, pq = ep.query_batch()
            logits = forward(phi, Xq, ep.class_subset).logits.value
            accs.append(float(np.mean(np.argmax(logits, axis=1) == pq)))
        rows.append((v, float(np.mean(accs)), float(np.std(accs)), tasks_per_value))
    return SweepTable(axis, rows)


def write_sweep_csv(table, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["axis_value", "mean_acc", "std", "n_tasks"])
        for v, m, s, n in table.rows:
            w.writerow([v, f"{m:.6f}", f"{s:.6f}", n])


def reports_json(reports):
    return json.dumps([r.to_dict() for r in reports], indent=2)


def reports_text(reports):
    header = f"{'dataset':>8} {'scenario':>10} {'seen':>5} {'n':>6} {'acc':>7} {'auc':>7} {'f1':>7}"
    lines = [header]
    for r in reports:
        auc = "n/a" if r.auc is None else f"{r.auc:.4f}"
        lines.append(f"{r.dataset_id!s:>8} {r.scenario:>10} {str(r.seen_train).lower():>5} "
                     f"{r.n_samples:>6} {r.accuracy:>7.4f} {auc:>7} {r.f1:>7.4f}")
    return "\n".join(lines)
