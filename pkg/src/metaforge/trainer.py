"""Meta-training: episodes, refinement, unified inner loop and Reptile updates."""
import csv
import logging
import multiprocessing
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .data import EpisodeSample, TaskEpisode, sample_task
from .errors import MetaForgeError, NumericError, TrainingError
from .model import (DEFAULT_CHANNELS, backward, forward, init_params, interpolate_params,
                    save_checkpoint, sgd_step, softmax_restricted)
from .objectives import WeightStore, update_adaptive_weights
from .ranking import (RANDOM_FROM_TOP_K, SelectionPolicy, batch_stats, rank_for_adversary,
                      rank_for_synthesis, select_representational)
from .rng import derive_key, stream
from .synthesis import (ATTACK_KINDS, AUG_KINDS, AttackContext, compose_ensemble,
                        draw_random_ensemble, spec_to_dict)

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "task", "step", "support_loss", "support_acc", "query_loss", "query_acc",
               "l_base", "l_tsac", "l_adv", "l_unified", "n_aug", "n_adv", "ms")


@dataclass
class TrainConfig:
    meta_epochs: int = 30
    tasks_per_epoch: int = 10
    inner_steps: int = 5
    inner_lr: float = 0.05
    outer_eps: float = 0.5
    n_range: tuple = (2, 5)
    k_range: tuple = (1, 10)
    query_per_class: int = 5
    lambda1: float = 0.5
    lambda2: float = 0.5
    margin_tsac: float = 1.0
    margin_adv: float = 1.0
    eta: float = 0.01
    top_k: int = 8
    n_select: int = 4
    selection_mode: str = RANDOM_FROM_TOP_K
    attack_pool: tuple = ATTACK_KINDS
    aug_pool: tuple = AUG_KINDS
    max_ensemble_len: int = 3
    copies_per_representative: int = 1
    within_dataset_tasks: bool = False
    train_datasets: tuple = None
    num_classes_total: int = None
    channels: tuple = DEFAULT_CHANNELS
    seed: int = 0

    def __post_init__(self):
        self.n_range = tuple(int(v) for v in self.n_range)
        self.k_range = tuple(int(v) for v in self.k_range)
        self.attack_pool = tuple(self.attack_pool)
        self.aug_pool = tuple(self.aug_pool)
        self.channels = tuple(int(c) for c in self.channels)
        if self.train_datasets is not None:
            self.train_datasets = tuple(int(d) for d in self.train_datasets)
        self.validate()

    def validate(self):
        problems = []
        for name in ("meta_epochs", "tasks_per_epoch", "inner_steps", "query_per_class",
                     "max_ensemble_len", "copies_per_representative"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        for name in ("inner_lr", "eta", "margin_tsac", "margin_adv"):
            if not getattr(self, name) > 0:
                problems.append(f"{name} must be > 0")
        if not 0 < self.outer_eps <= 1:
            problems.append("outer_eps must be in (0, 1]")
        if self.lambda1 < 0 or self.lambda2 < 0:
            problems.append("lambdas must be >= 0")
        if self.top_k < 0 or self.n_select < 0 or self.n_select > self.top_k:
            problems.append("need 0 <= n_select <= top_k")
        for name in ("n_range", "k_range"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                problems.append(f"{name} must satisfy 1 <= lo <= hi")
        if self.n_range[0] < 2:
            problems.append("tasks need at least two classes")
        bad = [k for k in self.attack_pool if k not in ATTACK_KINDS]
        bad += [k for k in self.aug_pool if k not in AUG_KINDS]
        if bad:
            problems.append(f"unknown synthesis kinds {bad}")
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def synthesis_enabled(self):
        return self.n_select > 0

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


@dataclass
class AugmentedTask:
    """A task whose support set carries synthesized samples and pair metadata.

    ``tsac_pairs`` rows are (orig_index, alt_index, similar, pair_id) and
    ``adv_pairs`` rows are (orig_index, adv_index, pair_id), with indices into
    ``episode.support``.
    """

    episode: TaskEpisode
    tsac_pairs: list = field(default_factory=list)
    adv_pairs: list = field(default_factory=list)
    provenance: list = field(default_factory=list)

    @property
    def n_aug(self):
        return sum(1 for s in self.episode.support if s.kind == "augmented")

    @property
    def n_adv(self):
        return sum(1 for s in self.episode.support if s.kind == "adversarial")


def _task_seed(config, epoch, task_index, *tags):
    return derive_key(config.seed, "refine", epoch, task_index, *tags)


def episode_seed(config, epoch):
    return derive_key(config.seed, "epoch", epoch)


def refinement_phase(params, task, config, weights=None, epoch=0):
    """Rank the support set, synthesize copies of the representatives, append them."""
    if not task.support:
        raise ValueError("task support set is empty")
    aug_task = AugmentedTask(TaskEpisode(task.class_subset, list(task.support), list(task.query),
                                         task.n_way, task.k_shot, task.task_index))
    if not config.synthesis_enabled:
        return aug_task
    t_idx = task.task_index
    X, pos = task.support_batch()
    probs = softmax_restricted(forward(params, X, task.class_subset).logits.value)
    ids = [s.sample_id for s in task.support]
    stats = batch_stats(probs, pos, ids)
    by_id = {s.sample_id: i for i, s in enumerate(task.support)}
    wrong = {s.sample_id for s in stats if s.correct == 0}

    def policy(tag):
        return SelectionPolicy(config.top_k, config.n_select, config.selection_mode,
                               seed=_task_seed(config, epoch, t_idx, tag))

    aug_reps = select_representational([sid for sid in rank_for_synthesis(stats) if sid in wrong],
                                       policy("select-aug"))
    adv_reps = select_representational(rank_for_adversary(stats), policy("select-adv"))
    context = AttackContext(params, task.class_subset)
    support = aug_task.episode.support
    neg_rng = stream(config.seed, "refine-neg", epoch, t_idx)

    try:
        for r, rep in enumerate(aug_reps):
            src = task.support[by_id[rep]]
            for copy in range(config.copies_per_representative):
                spec = draw_random_ensemble(config.aug_pool, config.max_ensemble_len,
                                            _task_seed(config, epoch, t_idx, "aug", r, copy))
                img = compose_ensemble(spec)(src.image, src.position)
                sid = f"aug:{rep}:{copy}"
                support.append(EpisodeSample(sid, src.position, img, "augmented", rep))
                aug_task.tsac_pairs.append((by_id[rep], len(support) - 1, 1, sid))
                others = [i for i, s in enumerate(task.support) if s.position != src.position]
                if others:
                    neg = others[int(neg_rng.integers(0, len(others)))]
                    aug_task.tsac_pairs.append((by_id[rep], neg, 0, f"neg:{rep}:{copy}"))
                aug_task.provenance.append({"sample_id": sid, "kind": "augmented", "source": rep,
                                            "spec": spec_to_dict(spec)})
        for r, rep in enumerate(adv_reps):
            src = task.support[by_id[rep]]
            for copy in range(config.copies_per_representative):
                spec = draw_random_ensemble(config.attack_pool, config.max_ensemble_len,
                                            _task_seed(config, epoch, t_idx, "adv", r, copy))
                img = compose_ensemble(spec, context)(src.image, src.position)
                sid = f"adv:{rep}:{copy}"
                support.append(EpisodeSample(sid, src.position, img, "adversarial", rep))
                aug_task.adv_pairs.append((by_id[rep], len(support) - 1, sid))
                aug_task.provenance.append({"sample_id": sid, "kind": "adversarial", "source": rep,
                                            "spec": spec_to_dict(spec)})
    except MetaForgeError as exc:
        raise TrainingError(f"synthesis failed: {exc}", context={"epoch": epoch, "task": t_idx}) from exc
    return aug_task


def _accuracy(logits, targets):
    return float(np.mean(np.argmax(logits, axis=1) == targets))


def evaluate_query(params, episode):
    Xq, yq = episode.query_batch()
    fr = forward(params, Xq, episode.class_subset)
    loss = ad.mean_cross_entropy(fr.logits, yq)
    return float(loss.value), _accuracy(fr.logits.value, yq)


def inner_loop(params, aug_task, config, weights=None, epoch=0):
    """Run ``config.inner_steps`` SGD steps on the unified loss; returns (phi, rows)."""
    weights = weights if weights is not None else WeightStore(config.eta)
    episode = aug_task.episode
    X, y = episode.support_batch()
    tsac = aug_task.tsac_pairs
    adv = aug_task.adv_pairs
    tsac_ids = [p[3] for p in tsac]
    adv_ids = [p[2] for p in adv]
    phi = params
    rows = []
    for step in range(config.inner_steps):
        try:
            phi, row = _inner_step(phi, aug_task, config, weights, X, y, tsac_ids, adv_ids)
        except NumericError as exc:
            raise TrainingError(f"numeric divergence: {exc}", last_finite_state=phi,
                                context={"epoch": epoch, "task": episode.task_index, "step": step}) from exc
        rows.append(dict(row, epoch=epoch, task=episode.task_index, step=step))
    return phi, rows


def _inner_step(phi, aug_task, config, weights, X, y, tsac_ids, adv_ids):
    episode = aug_task.episode
    tsac = aug_task.tsac_pairs
    adv = aug_task.adv_pairs
    t0 = time.perf_counter()
    fr = forward(phi, X, episode.class_subset)
    l_base = ad.mean_cross_entropy(fr.logits, y)
    terms, coefs = [l_base], [1.0]
    l_tsac_val = l_adv_val = 0.0
    c_terms = m_terms = None
    if tsac:
        e_o = ad.gather_rows(fr.embeddings, [p[0] for p in tsac])
        e_a = ad.gather_rows(fr.embeddings, [p[1] for p in tsac])
        c_terms = ad.contrastive_terms(e_o, e_a, [p[2] for p in tsac], config.margin_tsac)
        l_t = ad.dot(c_terms, [weights.tsac_weight(i) for i in tsac_ids])
        terms.append(l_t)
        coefs.append(config.lambda1)
        l_tsac_val = float(l_t.value)
    if adv:
        s_clean = ad.gather(fr.logits, [p[0] for p in adv], y[[p[0] for p in adv]])
        s_adv = ad.gather(fr.logits, [p[1] for p in adv], y[[p[1] for p in adv]])
        m_terms = ad.margin_ranking_terms(s_clean, s_adv, config.margin_adv)
        l_a = ad.dot(m_terms, [weights.adv_weight(i) for i in adv_ids])
        terms.append(l_a)
        coefs.append(config.lambda2)
        l_adv_val = float(l_a.value)
    loss = terms[0] if len(terms) == 1 else ad.linear_combination(terms, coefs)
    if not np.isfinite(loss.value):
        raise NumericError("non-finite unified loss")
    grads, _ = backward(fr.tape, loss=loss)
    phi = sgd_step(phi, grads, config.inner_lr)
    if not all(np.all(np.isfinite(v)) for _, v in phi):
        raise NumericError("non-finite parameters after inner step")
    update_adaptive_weights(
        weights,
        {i: config.lambda1 * float(v) for i, v in zip(tsac_ids, c_terms.value)} if tsac else None,
        {i: config.lambda2 * float(v) for i, v in zip(adv_ids, m_terms.value)} if adv else None,
    )
    q_loss, q_acc = evaluate_query(phi, episode)
    return phi, {
        "epoch": None, "task": None, "step": None,
        "support_loss": float(l_base.value), "support_acc": _accuracy(fr.logits.value, y),
        "query_loss": q_loss, "query_acc": q_acc,
        "l_base": float(l_base.value), "l_tsac": l_tsac_val, "l_adv": l_adv_val,
        "l_unified": float(loss.value), "n_aug": aug_task.n_aug, "n_adv": aug_task.n_adv,
        "ms": round((time.perf_counter() - t0) * 1000.0, 3),
    }


def run_task(theta, dataset, config, epoch, task_index):
    """Sample, refine and adapt one task from ``theta``; returns (phi, rows, provenance)."""
    episode = sample_task(dataset, config.n_range, config.k_range, "train", episode_seed(config, epoch),
                          task_index, config.query_per_class, config.within_dataset_tasks,
                          config.train_datasets)
    weights = WeightStore(config.eta)
    aug = refinement_phase(theta, episode, config, weights, epoch)
    phi, rows = inner_loop(theta, aug, config, weights, epoch)
    return phi, rows, aug.provenance


def outer_update(theta, phis, eps):
    """Reptile step toward the mean adapted parameters (summed in task order)."""
    acc = phis[0].copy()
    for phi in phis[1:]:
        acc = acc.zip_map(phi, lambda a, b: a + b)
    n = len(phis)
    mean = acc.map(lambda a: a / a.dtype.type(n))
    return interpolate_params(theta, mean, eps)


_WORKER = {}


def _worker_init(dataset, config):
    _WORKER["dataset"] = dataset
    _WORKER["config"] = config


def _worker_task(theta, epoch, task_index):
    return run_task(theta, _WORKER["dataset"], _WORKER["config"], epoch, task_index)


def _context():
    methods = multiprocessing.get_all_start_methods()
    return multiprocessing.get_context("fork" if "fork" in methods else "spawn")


def meta_train(dataset, config, workers=1, init=None, on_epoch=None):
    """Meta-train from scratch (or ``init``); returns (params, log_rows, provenance).

    Every task of an epoch adapts from the same meta-parameters, so tasks can
    run on parallel workers; the outer update folds results in task order.
    """
    n_classes = config.num_classes_total or dataset.num_classes_total
    pool = dataset.classes_of(config.train_datasets)
    if config.n_range[1] > len(pool):
        raise ValueError(f"n_range upper bound {config.n_range[1]} exceeds {len(pool)} training classes")
    in_ch = dataset.image_shape[0]
    theta = init if init is not None else init_params(config.seed, n_classes, in_ch, config.channels)
    rows, provenance = [], []
    executor = None
    if workers > 1:
        executor = ProcessPoolExecutor(max_workers=workers, mp_context=_context(),
                                       initializer=_worker_init, initargs=(dataset, config))
    try:
        for epoch in range(config.meta_epochs):
            indices = range(config.tasks_per_epoch)
            try:
                if executor is None:
                    results = [run_task(theta, dataset, config, epoch, t) for t in indices]
                else:
                    futures = [executor.submit(_worker_task, theta, epoch, t) for t in indices]
                    results = [f.result() for f in futures]
            except TrainingError:
                raise
            except MetaForgeError as exc:
                raise TrainingError(str(exc), last_finite_state=theta, context={"epoch": epoch}) from exc
            for t, (_, task_rows, prov) in enumerate(results):
                rows.extend(task_rows)
                provenance.extend(dict(p, epoch=epoch, task=t) for p in prov)
            theta = outer_update(theta, [r[0] for r in results], config.outer_eps)
            if on_epoch is not None:
                on_epoch(epoch, theta, rows)
            log.info("epoch %d: mean query acc %.3f", epoch,
                     np.mean([r["query_acc"] for r in rows[-config.tasks_per_epoch * config.inner_steps:]]))
    finally:
        if executor is not None:
            executor.shutdown()
    return theta, rows, provenance


def write_train_log(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in row.items()})


def checkpoint_sidecar(config, dataset):
    classes = dataset.classes_of(config.train_datasets)
    return {
        "config": config.to_dict(),
        "seed": config.seed,
        "channels": list(config.channels),
        "num_classes_total": config.num_classes_total or dataset.num_classes_total,
        "train_classes": [{"class_id": c.class_id, "dataset_id": c.dataset_id,
                           "authenticity": c.authenticity} for c in classes],
    }


def save_training(path, params, config, dataset):
    save_checkpoint(path, params, checkpoint_sidecar(config, dataset))


def few_shot_adapt(params, X, y, adapt_steps=5, lr=0.05, class_subset=None, registry=None):
    """Plain cross-entropy fine-tuning on a labelled support set.

    ``y`` holds class ids; ``registry`` (an iterable of known ids) rejects
    labels the checkpoint cannot represent.
    """
    X = np.asarray(X, dtype=np.float32)
    y = np.asarray(y).astype(int)
    if len(X) == 0 or len(X) != len(y):
        raise ValueError("support set must be non-empty with one label per sample")
    known = set(range(params.num_classes_total)) if registry is None else {int(c) for c in registry}
    unknown = sorted(set(y.tolist()) - known)
    if unknown:
        raise ValueError(f"unknown class ids {unknown}")
    subset = sorted(set(y.tolist())) if class_subset is None else [int(c) for c in class_subset]
    missing = sorted(set(y.tolist()) - set(subset))
    if missing:
        raise ValueError(f"labels {missing} not in class_subset")
    pos = np.asarray([subset.index(c) for c in y], dtype=np.intp)
    phi = params.copy()
    for _ in range(adapt_steps):
        fr = forward(phi, X, subset)
        loss = ad.mean_cross_entropy(fr.logits, pos)
        grads, _ = backward(fr.tape, loss=loss)
        phi = sgd_step(phi, grads, lr)
    return phi


def train_conventional(dataset, dataset_ids=None, epochs=5, lr=0.05, batch_size=32, seed=0,
                       channels=DEFAULT_CHANNELS, num_classes_total=None, init=None):
    """Standard minibatch classifier training on the train split of some datasets."""
    classes = [c.class_id for c in dataset.classes_of(dataset_ids)]
    X, y = dataset.split_arrays("train", set(classes))
    pos = np.asarray([classes.index(c) for c in y], dtype=np.intp)
    n_classes = num_classes_total or dataset.num_classes_total
    params = init if init is not None else init_params(seed, n_classes, X.shape[1], channels)
    for epoch in range(epochs):
        order = stream(seed, "conventional", epoch).permutation(len(X))
        for start in range(0, len(X), batch_size):
            idx = order[start:start + batch_size]
            fr = forward(params, X[idx], classes)
            loss = ad.mean_cross_entropy(fr.logits, pos[idx])
            grads, _ = backward(fr.tape, loss=loss)
            params = sgd_step(params, grads, lr)
    return params
