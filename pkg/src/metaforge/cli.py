"""Command line entry point: ``metaforge <subcommand> [--config PATH] [--key value ...]``."""
import argparse
import json
import logging
import os
import sys
import time
from dataclasses import fields

import numpy as np

from . import __version__
from .data import ToyGenSpec, build_toy_metadataset, generate_toy_metadataset, load_manifest, sample_task
from .errors import MetaForgeError
from .evaluation import (SCENARIOS, cross_dataset_eval, reports_text, sweep, write_sweep_csv)
from .model import forward, init_params, load_checkpoint, save_checkpoint, softmax_restricted
from .ranking import batch_stats, rank_for_adversary, rank_for_synthesis, stats_table
from .synthesis import ATTACK_KINDS, AttackSpec, apply_attack
from .tensorio import atomic_write_bytes
from .trainer import TrainConfig, few_shot_adapt, meta_train, save_training, write_train_log

log = logging.getLogger("metaforge")

TOY_KEYS = {f.name: f.default for f in fields(ToyGenSpec) if f.name != "seed"}
TRAIN_KEYS = {f.name: f.default for f in fields(TrainConfig) if f.name != "seed"}
COMMON_KEYS = {"seed": 0, "out_dir": None, "workers": 1, "log_level": "WARNING"}
DATA_KEYS = {"dataset": None}
EVAL_KEYS = {"checkpoint": None, "scenario": "unseen", "dataset_ids": None, "seen_train": [],
             "adapt_steps": 0, "adapt_lr": 0.05, "adapt_per_class": None, "score_classes": None}
ADAPT_KEYS = {"checkpoint": None, "dataset_ids": None, "adapt_steps": 5, "adapt_lr": 0.05,
              "adapt_per_class": None, "split": "train"}
SWEEP_KEYS = {"checkpoint": None, "axis": "n_way", "values": [2, 3, 4, 5], "tasks_per_value": 50, "fixed_n": 3,
              "fixed_k": 5, "adapt_steps": 5, "adapt_lr": 0.05, "query_per_class": 5, "split": "train",
              "dataset_ids": None}
RANK_KEYS = {"checkpoint": None, "n_way": 3, "k_shot": 5, "task_index": 0, "split": "train",
             "dataset_ids": None}
ATTACK_KEYS = {"checkpoint": None, "attack_kinds": list(ATTACK_KINDS), "epsilon": 8 / 255, "alpha": 2 / 255,
               "steps": 10, "n_samples": 16, "split": "test", "dataset_ids": None}

COMMANDS = {
    "gen-data": ({**TOY_KEYS, "data_dir": None}, "generate the toy meta-dataset (manifest + NFT1 files)"),
    "train": ({**TRAIN_KEYS, **TOY_KEYS, **DATA_KEYS}, "meta-train and write checkpoint and log"),
    "eval": ({**EVAL_KEYS, **DATA_KEYS}, "score a checkpoint on datasets' test splits"),
    "adapt": ({**ADAPT_KEYS, **DATA_KEYS}, "few-shot adapt a checkpoint on a dataset"),
    "sweep": ({**SWEEP_KEYS, **DATA_KEYS}, "N-way or K-shot query accuracy sweep"),
    "rank-demo": ({**RANK_KEYS, **TOY_KEYS, **DATA_KEYS}, "rank one task's support samples"),
    "attack-demo": ({**ATTACK_KEYS, **TOY_KEYS, **DATA_KEYS}, "run every attack on a batch"),
}
ALL_KEYS = set(COMMON_KEYS).union(*(set(keys) for keys, _ in COMMANDS.values()))


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def parse_value(text):
    """JSON literal, comma list, or plain string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    if "," in text:
        return [parse_value(p) for p in text.split(",")]
    return text


def build_parser():
    parser = _Parser(prog="metaforge", description="Adversarial meta-learning toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, (keys, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file with flat keys")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", dest="out_dir")
        p.add_argument("--workers", type=int)
        p.add_argument("--log-level", dest="log_level")
        for key in sorted(keys):
            p.add_argument("--" + key.replace("_", "-"), dest=key, type=parse_value, metavar="VALUE")
    return parser


def load_config_file(path):
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ValueError(f"config {path} must be a JSON object")
    doc.pop("meta", None)
    unknown = sorted(set(doc) - ALL_KEYS)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    return doc


def resolve_config(args):
    keys, _ = COMMANDS[args.command]
    cfg = {**COMMON_KEYS, **keys}
    if args.config:
        cfg.update(load_config_file(args.config))
    for key in list(COMMON_KEYS) + list(keys):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if not cfg["out_dir"]:
        cfg["out_dir"] = os.environ.get("METAFORGE_OUT") or "out"
    return cfg


def _json_bytes(doc):
    return (json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n").encode("utf-8")


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, tuple):
        return list(v)
    raise TypeError(f"not JSON serializable: {type(v).__name__}")


def write_json(path, doc):
    atomic_write_bytes(path, _json_bytes(doc))


def _meta(command):
    return {"command": command, "version": __version__,
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z")}


def _pick(cfg, keys):
    return {k: cfg[k] for k in keys if k in cfg}


def _toy_spec(cfg):
    return ToyGenSpec(**_pick(cfg, TOY_KEYS), seed=int(cfg["seed"]))


def _dataset(cfg, required=False):
    path = cfg.get("dataset")
    if not path:
        if required:
            raise ValueError("this command needs --dataset (a manifest path or its directory)")
        return build_toy_metadataset(_toy_spec(cfg))
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.json")
    return load_manifest(path)


def _checkpoint(cfg, dataset=None, required=True):
    path = cfg.get("checkpoint")
    if not path:
        if required:
            raise ValueError("this command needs --checkpoint")
        return init_params(int(cfg["seed"]), dataset.num_classes_total, dataset.image_shape[0]), None
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _ids(value):
    return None if value is None else [int(v) for v in (value if isinstance(value, list) else [value])]


# subcommands

def cmd_gen_data(cfg):
    target = cfg["data_dir"] or cfg["out_dir"]
    ds = generate_toy_metadataset(_toy_spec(cfg), target)
    return {"manifest": "manifest.json", "n_classes": len(ds.classes),
            "n_samples": len(ds.images), "datasets": [d for d, _ in ds.datasets]}


def cmd_train(cfg, out):
    dataset = _dataset(cfg)
    tc = TrainConfig(**_pick(cfg, TRAIN_KEYS), seed=int(cfg["seed"]))
    params, rows, provenance = meta_train(dataset, tc, workers=int(cfg["workers"]))
    save_training(os.path.join(out, "model.mfck"), params, tc, dataset)
    write_train_log(rows, os.path.join(out, "train_log.csv"))
    write_json(os.path.join(out, "provenance.json"), provenance)
    last = rows[-tc.tasks_per_epoch * tc.inner_steps:]
    # file names in results are relative to out_dir so reruns elsewhere compare equal
    return {"checkpoint": "model.mfck", "log": "train_log.csv",
            "n_rows": len(rows), "n_tasks": tc.meta_epochs * tc.tasks_per_epoch,
            "final_query_acc": float(np.mean([r["query_acc"] for r in last]))}


def cmd_eval(cfg, out):
    if cfg["scenario"] not in SCENARIOS:
        raise ValueError(f"scenario must be one of {SCENARIOS}")
    dataset = _dataset(cfg, required=True)
    params, sidecar = _checkpoint(cfg)
    auth = {}
    score_classes = _ids(cfg["score_classes"])
    if sidecar:
        auth = {c["class_id"]: c["authenticity"] for c in sidecar.get("train_classes", [])}
        if score_classes is None and cfg["scenario"] == "unseen":
            score_classes = sorted(auth)
    ids = _ids(cfg["dataset_ids"]) or dataset.dataset_ids()
    reports = cross_dataset_eval(params, dataset, ids, cfg["scenario"], score_classes, auth,
                                 _ids(cfg["seen_train"]) or (), int(cfg["adapt_steps"]), float(cfg["adapt_lr"]),
                                 cfg["adapt_per_class"], int(cfg["seed"]))
    atomic_write_bytes(os.path.join(out, "report.txt"), (reports_text(reports) + "\n").encode("utf-8"))
    return {"reports": [r.to_dict() for r in reports]}


def _accuracy(params, X, y, subset):
    pos = np.asarray([subset.index(c) for c in y])
    return float(np.mean(np.argmax(forward(params, X, subset).logits.value, axis=1) == pos))


def cmd_adapt(cfg, out):
    dataset = _dataset(cfg, required=True)
    params, sidecar = _checkpoint(cfg)
    classes = [c.class_id for c in dataset.classes_of(_ids(cfg["dataset_ids"]))]
    X, y = dataset.split_arrays(cfg["split"], set(classes))
    if cfg["adapt_per_class"]:
        keep = np.concatenate([np.flatnonzero(y == c)[:int(cfg["adapt_per_class"])] for c in classes])
        X, y = X[keep], y[keep]
    phi = few_shot_adapt(params, X, y, int(cfg["adapt_steps"]), float(cfg["adapt_lr"]), classes)
    Xt, yt = dataset.split_arrays("test", set(classes))
    path = os.path.join(out, "adapted.mfck")
    save_checkpoint(path, phi, dict(sidecar or {}, adapted_on=classes))
    return {"checkpoint": "adapted.mfck", "n_support": int(len(X)), "classes": classes,
            "test_acc_before": _accuracy(params, Xt, yt, classes), "test_acc_after": _accuracy(phi, Xt, yt, classes)}


def cmd_sweep(cfg, out):
    dataset = _dataset(cfg, required=True)
    params, _ = _checkpoint(cfg)
    values = cfg["values"] if isinstance(cfg["values"], list) else [cfg["values"]]
    table = sweep(params, dataset, cfg["axis"], values, int(cfg["tasks_per_value"]), int(cfg["fixed_n"]),
                  int(cfg["fixed_k"]), int(cfg["adapt_steps"]), float(cfg["adapt_lr"]), cfg["split"],
                  int(cfg["query_per_class"]), int(cfg["seed"]), _ids(cfg["dataset_ids"]))
    write_sweep_csv(table, os.path.join(out, "sweep.csv"))
    return {"axis": table.axis, "rows": [list(r) for r in table.rows], "spearman": table.spearman()}


def cmd_rank_demo(cfg, out):
    dataset = _dataset(cfg)
    params, _ = _checkpoint(cfg, dataset, required=False)
    n, k = int(cfg["n_way"]), int(cfg["k_shot"])
    ep = sample_task(dataset, (n, n), (k, k), cfg["split"], int(cfg["seed"]), int(cfg["task_index"]),
                     dataset_ids=_ids(cfg["dataset_ids"]))
    X, pos = ep.support_batch()
    probs = softmax_restricted(forward(params, X, ep.class_subset).logits.value)
    stats = batch_stats(probs, pos, [s.sample_id for s in ep.support])
    ranked = rank_for_synthesis(stats)
    rows = stats_table(stats, ranked)
    header = f"{'rank':>4} {'p_y':>7} {'margin':>7} {'entropy':>7} {'ok':>3} {'m_adaptive':>10}  sample"
    lines = [header] + [f"{r['rank']:>4} {r['p_y']:>7.4f} {r['margin']:>7.4f} {r['entropy']:>7.4f} "
                        f"{r['correct']:>3} {r['m_adaptive']:>10.4f}  {r['sample_id']}"
                        for r in sorted(rows, key=lambda r: r["rank"])]
    atomic_write_bytes(os.path.join(out, "ranking.txt"), ("\n".join(lines) + "\n").encode("utf-8"))
    return {"class_subset": ep.class_subset, "synthesis_order": ranked,
            "adversary_order": rank_for_adversary(stats), "stats": rows}


def cmd_attack_demo(cfg, out):
    dataset = _dataset(cfg)
    params, _ = _checkpoint(cfg, dataset, required=False)
    classes = [c.class_id for c in dataset.classes_of(_ids(cfg["dataset_ids"]))]
    X, y = dataset.split_arrays(cfg["split"], set(classes))
    idx = np.sort(np.random.Generator(np.random.Philox(int(cfg["seed"]))).choice(
        len(X), min(int(cfg["n_samples"]), len(X)), replace=False))
    X, pos = X[idx], np.asarray([classes.index(c) for c in y[idx]])

    def loss(batch):
        p = softmax_restricted(forward(params, batch, classes).logits.value)
        return float(np.mean(-np.log(np.maximum(p[np.arange(len(pos)), pos], 1e-12))))

    results = []
    base = loss(X)
    for kind in cfg["attack_kinds"]:
        alpha = float(cfg["alpha"])
        if kind == "RFGSM":
            alpha = min(alpha, float(cfg["epsilon"]) / 2)
        spec = AttackSpec(kind, float(cfg["epsilon"]), alpha, int(cfg["steps"]), seed=int(cfg["seed"]))
        adv = apply_attack(params, X, pos, classes, spec)
        diff = (adv - X).reshape(len(X), -1)
        results.append({"kind": kind, "clean_loss": base, "adv_loss": loss(adv),
                        "max_linf": float(np.abs(diff).max()), "max_l2": float(np.linalg.norm(diff, axis=1).max())})
    return {"n_samples": int(len(X)), "attacks": results}


HANDLERS = {"train": cmd_train, "eval": cmd_eval, "adapt": cmd_adapt, "sweep": cmd_sweep,
            "rank-demo": cmd_rank_demo, "attack-demo": cmd_attack_demo}


def run(cfg, command):
    out = cfg["out_dir"]
    os.makedirs(out, exist_ok=True)
    write_json(os.path.join(out, "resolved_config.json"), dict(cfg, meta=_meta(command)))
    result = cmd_gen_data(cfg) if command == "gen-data" else HANDLERS[command](cfg, out)
    write_json(os.path.join(out, "result.json"), {"result": result, "meta": _meta(command)})
    return result


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError(build_parser().format_usage() + "metaforge: error: a subcommand is required")
        cfg = resolve_config(args)
        logging.basicConfig(level=str(cfg["log_level"]).upper(), stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        run(cfg, args.command)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (ValueError, TypeError, KeyError, FileNotFoundError) as exc:
        print(f"metaforge: invalid input: {exc}", file=sys.stderr)
        return 1
    except (MetaForgeError, OSError, RuntimeError, ArithmeticError) as exc:
        print(f"metaforge: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
