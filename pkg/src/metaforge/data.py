"""Meta-dataset registry, manifest I/O, the procedural toy generator and the
N-way K-shot episode sampler."""
import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import EpisodeError, ValidationError
from .rng import stream
from .tensorio import read_tensor_file, write_tensor_file

SPLITS = ("train", "val", "test")
AUTHENTICITY = ("real", "fake")
MANIFEST_VERSION = 1


@dataclass
class ClassRecord:
    class_id: int
    dataset_id: int
    authenticity: str
    splits: dict
    name: str = ""

    @property
    def is_fake(self):
        return self.authenticity == "fake"


@dataclass
class MetaDataset:
    """Class registry over one or more source datasets.

    ``images`` maps every sample ref (a manifest-relative path, or any unique
    key for in-memory datasets) to its C x H x W float32 array.
    """

    datasets: list
    classes: list
    images: dict = field(repr=False)
    root: str = None

    def __post_init__(self):
        self._by_id = {c.class_id: c for c in self.classes}

    @property
    def class_ids(self):
        return [c.class_id for c in self.classes]

    def by_id(self, class_id):
        try:
            return self._by_id[int(class_id)]
        except KeyError:
            raise ValueError(f"unknown class id {class_id}") from None

    @property
    def num_classes_total(self):
        return max(self.class_ids) + 1

    @property
    def image_shape(self):
        return next(iter(self.images.values())).shape

    def authenticity_map(self):
        return {c.class_id: c.authenticity for c in self.classes}

    def dataset_ids(self):
        return [d for d, _ in self.datasets]

    def classes_of(self, dataset_ids=None):
        if dataset_ids is None:
            return list(self.classes)
        wanted = {int(d) for d in dataset_ids}
        return [c for c in self.classes if c.dataset_id in wanted]

    def subset(self, dataset_ids):
        """Restrict the registry to the given source datasets."""
        wanted = {int(d) for d in dataset_ids}
        classes = [c for c in self.classes if c.dataset_id in wanted]
        refs = {r for c in classes for s in c.splits.values() for r in s}
        return MetaDataset([d for d in self.datasets if d[0] in wanted], classes,
                           {r: self.images[r] for r in refs}, self.root)

    def split_arrays(self, split, class_ids=None):
        """Stack every sample of a split; returns (X, class_ids)."""
        xs, ys = [], []
        for c in self.classes:
            if class_ids is not None and c.class_id not in class_ids:
                continue
            for ref in c.splits[split]:
                xs.append(self.images[ref])
                ys.append(c.class_id)
        if not xs:
            return np.zeros((0,) + tuple(self.image_shape), np.float32), np.zeros(0, int)
        return np.stack(xs), np.asarray(ys)

    def structure(self):
        return {
            "datasets": [list(d) for d in self.datasets],
            "classes": [(c.class_id, c.dataset_id, c.authenticity,
                         {s: list(c.splits[s]) for s in SPLITS}) for c in self.classes],
        }


# manifests

def manifest_document(dataset):
    return {
        "format_version": MANIFEST_VERSION,
        "datasets": [{"dataset_id": d, "name": n} for d, n in dataset.datasets],
        "classes": [
            {"class_id": c.class_id, "dataset_id": c.dataset_id, "authenticity": c.authenticity,
             "name": c.name, "splits": {s: list(c.splits.get(s, [])) for s in SPLITS}}
            for c in dataset.classes
        ],
    }


def write_manifest(dataset, path, write_samples=True):
    """Write ``manifest.json`` (and, by default, every sample as NFT1)."""
    root = os.path.dirname(os.path.abspath(path))
    if write_samples:
        for ref, img in dataset.images.items():
            target = os.path.join(root, ref)
            os.makedirs(os.path.dirname(target), exist_ok=True)
            write_tensor_file(target, img)
    with open(path, "w") as fh:
        json.dump(manifest_document(dataset), fh, indent=1)
        fh.write("\n")


def load_manifest(path):
    """Load and validate a manifest; every violation is reported at once."""
    if not os.path.exists(path):
        raise ValidationError([f"manifest not found: {path}"])
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError([f"manifest is not valid JSON: {exc}"]) from None
    root = os.path.dirname(os.path.abspath(path))
    violations = []
    for key in ("format_version", "datasets", "classes"):
        if key not in doc:
            violations.append(f"missing top-level key '{key}'")
    if violations:
        raise ValidationError(violations)
    if doc["format_version"] != MANIFEST_VERSION:
        violations.append(f"unsupported format_version {doc['format_version']}")

    datasets = []
    for d in doc["datasets"]:
        datasets.append((int(d["dataset_id"]), str(d.get("name", ""))))
    known_datasets = {d for d, _ in datasets}

    seen = {}
    classes = []
    images = {}
    shape = None
    for entry in doc["classes"]:
        cid = int(entry.get("class_id", -1))
        if cid < 0:
            violations.append(f"class entry without valid class_id: {entry.get('class_id')!r}")
            continue
        if cid in seen:
            violations.append(f"duplicate class_id {cid}")
            continue
        seen[cid] = True
        did = int(entry.get("dataset_id", -1))
        if did not in known_datasets:
            violations.append(f"class {cid} references unknown dataset_id {did}")
        auth = entry.get("authenticity")
        if auth not in AUTHENTICITY:
            violations.append(f"class {cid} has invalid authenticity {auth!r}")
        splits = entry.get("splits", {})
        clean = {}
        for s in SPLITS:
            refs = list(splits.get(s, []))
            if not refs:
                violations.append(f"class {cid} has empty split '{s}'")
            clean[s] = refs
            for ref in refs:
                full = os.path.join(root, ref)
                if not os.path.exists(full):
                    violations.append(f"class {cid}: missing sample file {full}")
                    continue
                try:
                    img = read_tensor_file(full)
                except ValueError as exc:
                    violations.append(f"class {cid}: unreadable sample {full}: {exc}")
                    continue
                if shape is None:
                    shape = img.shape
                elif img.shape != shape:
                    violations.append(f"class {cid}: sample {full} has shape {img.shape}, expected {shape}")
                images[ref] = img
        classes.append(ClassRecord(cid, did, auth, clean, str(entry.get("name", ""))))
    if violations:
        raise ValidationError(violations)
    return MetaDataset(datasets, classes, images, root)


def from_arrays(X, y, authenticity=None, groups=None, split="train"):
    """Build an in-memory MetaDataset from stacked images and class labels.

    All samples land in ``split``; the other splits alias it so that the
    registry stays valid.
    """
    X = np.asarray(X, dtype=np.float32)
    y = np.asarray(y).astype(int)
    groups = np.zeros(len(y), int) if groups is None else np.asarray(groups).astype(int)
    authenticity = authenticity or {}
    classes = []
    images = {}
    for cid in sorted(set(y.tolist())):
        idx = np.flatnonzero(y == cid)
        refs = []
        for i in idx:
            ref = f"mem/{cid}/{i}"
            images[ref] = X[i]
            refs.append(ref)
        dids = set(groups[idx].tolist())
        if len(dids) != 1:
            raise ValueError(f"class {cid} spans several groups {sorted(dids)}")
        splits = {s: refs for s in SPLITS}
        classes.append(ClassRecord(cid, dids.pop(), authenticity.get(cid, "real"), splits))
    datasets = [(d, f"group{d}") for d in sorted(set(groups.tolist()))]
    return MetaDataset(datasets, classes, images)


# toy generator

@dataclass
class ToyGenSpec:
    n_real_classes: int = 3
    n_fake_classes: int = 5
    samples_per_class: int = 100
    image_size: int = 32
    seed: int = 0
    n_datasets: int = 1
    class_id_offset: int = 0
    dataset_id_offset: int = 0
    name: str = "toy"

    def validate(self):
        problems = []
        for f in ("n_real_classes", "n_fake_classes", "n_datasets"):
            if getattr(self, f) < 1:
                problems.append(f"{f} must be >= 1")
        if self.samples_per_class < 3:
            problems.append("samples_per_class must be >= 3 to fill three splits")
        if self.image_size < 8 or self.image_size % 8:
            problems.append("image_size must be a positive multiple of 8")
        if self.class_id_offset < 0 or self.dataset_id_offset < 0:
            problems.append("id offsets must be non-negative")
        if problems:
            raise ValidationError(problems)


REAL_FAMILIES = ("grating", "blobs", "checker", "value_noise")
FAKE_OPERATORS = ("block_quant", "highpass_ring", "channel_shift", "local_warp")


def _class_tint(class_id):
    hue = (class_id * 0.6180339887) % 1.0 * 2 * np.pi
    return 0.5 + 0.17 * np.cos(hue + np.array([0.0, 2.0944, 4.1888]))


def _family_params(family, rng, dataset_idx):
    if family == "grating":
        return {"freq": rng.uniform(1.5, 5.0) + dataset_idx * 0.7, "theta": rng.uniform(0, np.pi)}
    if family == "blobs":
        return {"sigma": rng.uniform(2.0, 5.0), "count": int(rng.integers(3, 7))}
    if family == "checker":
        return {"cell": int(rng.integers(3, 7)) + dataset_idx % 2}
    return {"cells": int(rng.integers(3, 8)) + dataset_idx}


def _pattern(family, params, size, rng):
    yy, xx = np.mgrid[0:size, 0:size] / size
    if family == "grating":
        theta = params["theta"] + rng.normal(0, 0.08)
        phase = rng.uniform(0, 2 * np.pi)
        u = np.cos(theta) * xx + np.sin(theta) * yy
        return 0.5 + 0.5 * np.sin(2 * np.pi * params["freq"] * u + phase)
    if family == "blobs":
        t = np.zeros((size, size))
        s = params["sigma"] / size
        for _ in range(params["count"]):
            cy, cx = rng.uniform(0, 1, 2)
            t += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        return t / max(t.max(), 1e-6)
    if family == "checker":
        cell = params["cell"]
        oy, ox = rng.integers(0, cell, 2)
        iy = (np.arange(size)[:, None] + oy) // cell
        ix = (np.arange(size)[None, :] + ox) // cell
        return ((iy + ix) % 2).astype(float)
    cells = params["cells"]
    grid = rng.uniform(0, 1, (cells + 1, cells + 1))
    t = ndimage.zoom(grid, size / (cells + 1), order=3, mode="nearest")[:size, :size]
    t = t - t.min()
    return t / max(t.max(), 1e-6)


def _render(pattern, tint, weights, rng):
    img = tint[:, None, None] + 0.55 * weights[:, None, None] * (pattern[None] - 0.5)
    img = img + rng.normal(0, 0.02, img.shape)
    return np.clip(img, 0, 1)


def _apply_operator(op, img, strength, rng):
    c, h, w = img.shape
    if op == "block_quant":
        b = 8
        blocks = img.reshape(c, h // b, b, w // b, b)
        mean = blocks.mean(axis=(2, 4), keepdims=True)
        levels = 2.0 + 2.0 * (1 - strength)
        out = mean + np.round((blocks - mean) * levels) / levels
        return np.clip(out.reshape(c, h, w), 0, 1)
    if op == "highpass_ring":
        blur = ndimage.gaussian_filter(img, sigma=(0, 1.0, 1.0), mode="reflect")
        sharp = img + (1.5 + strength) * (img - blur)
        yy, xx = np.mgrid[0:h, 0:w]
        ring = 0.05 * (1 + strength) * np.where((yy + xx) % 2 == 0, 1.0, -1.0)
        return np.clip(sharp + ring[None], 0, 1)
    if op == "channel_shift":
        out = img.copy()
        shift = 2 + int(round(strength * 2))
        ch = int(rng.integers(0, c))
        out[ch] = np.roll(img[ch], (shift, -shift), axis=(0, 1))
        return out
    amp = 1.2 + strength * 1.2
    field_y = ndimage.gaussian_filter(rng.normal(0, 1, (h, w)), 3.0, mode="wrap")
    field_x = ndimage.gaussian_filter(rng.normal(0, 1, (h, w)), 3.0, mode="wrap")
    field_y *= amp / max(np.abs(field_y).max(), 1e-6)
    field_x *= amp / max(np.abs(field_x).max(), 1e-6)
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    coords = np.stack([yy + field_y, xx + field_x])
    out = np.stack([ndimage.map_coordinates(img[k], coords, order=1, mode="reflect") for k in range(c)])
    return np.clip(out, 0, 1)


def toy_class_plan(spec):
    """Per-class description: (class_id, dataset_id, authenticity, family, operator)."""
    plan = []
    cid = spec.class_id_offset
    for d in range(spec.n_datasets):
        did = spec.dataset_id_offset + d
        for r in range(spec.n_real_classes):
            plan.append((cid, did, "real", REAL_FAMILIES[(r + d) % len(REAL_FAMILIES)], None))
            cid += 1
        for j in range(spec.n_fake_classes):
            fam = REAL_FAMILIES[(j % spec.n_real_classes + d) % len(REAL_FAMILIES)]
            op = FAKE_OPERATORS[(j + did) % len(FAKE_OPERATORS)]
            plan.append((cid, did, "fake", fam, op))
            cid += 1
    return plan


def split_counts(n):
    n_train = int(round(0.8 * n))
    n_val = max(1, int(round(0.1 * n)))
    n_train = min(n_train, n - n_val - 1)
    return n_train, n_val, n - n_train - n_val


def generate_toy_images(spec):
    """Return (plan, {class_id: array[samples, 3, S, S]}) without touching disk."""
    spec.validate()
    plan = toy_class_plan(spec)
    out = {}
    for cid, did, auth, family, op in plan:
        rng = stream(spec.seed, "toy-class", cid)
        params = _family_params(family, rng, did)
        tint = _class_tint(cid)
        weights = rng.uniform(0.6, 1.0, 3)
        strength = rng.uniform(0, 1)
        imgs = np.empty((spec.samples_per_class, 3, spec.image_size, spec.image_size), np.float32)
        for i in range(spec.samples_per_class):
            srng = stream(spec.seed, "toy-sample", cid, i)
            img = _render(_pattern(family, params, spec.image_size, srng), tint, weights, srng)
            if op is not None:
                img = _apply_operator(op, img, strength, srng)
            imgs[i] = img
        out[cid] = imgs
    return plan, out


def build_toy_metadataset(spec):
    """Materialize the toy meta-dataset in memory with manifest-style refs."""
    plan, arrays = generate_toy_images(spec)
    n_train, n_val, _ = split_counts(spec.samples_per_class)
    classes, images = [], {}
    for cid, did, auth, family, op in plan:
        refs = []
        for i, img in enumerate(arrays[cid]):
            ref = f"d{did:02d}/c{cid:03d}/{i:05d}.nft"
            images[ref] = img
            refs.append(ref)
        splits = {"train": refs[:n_train], "val": refs[n_train:n_train + n_val],
                  "test": refs[n_train + n_val:]}
        name = f"{family}" if op is None else f"{family}+{op}"
        classes.append(ClassRecord(cid, did, auth, splits, name))
    datasets = [(spec.dataset_id_offset + d, f"{spec.name}{d}") for d in range(spec.n_datasets)]
    return MetaDataset(datasets, classes, images)


def generate_toy_metadataset(spec, out_dir):
    """Write the toy meta-dataset under ``out_dir``; returns the loaded registry."""
    ds = build_toy_metadataset(spec)
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "manifest.json")
    write_manifest(ds, path)
    ds.root = os.path.abspath(out_dir)
    return ds


# episodes

@dataclass
class EpisodeSample:
    sample_id: str
    position: int
    image: np.ndarray = field(repr=False)
    kind: str = "original"
    source: str = None


@dataclass
class TaskEpisode:
    class_subset: list
    support: list
    query: list
    n_way: int
    k_shot: int
    task_index: int = 0

    def support_batch(self):
        return (np.stack([s.image for s in self.support]),
                np.asarray([s.position for s in self.support], dtype=np.intp))

    def query_batch(self):
        return (np.stack([s.image for s in self.query]),
                np.asarray([s.position for s in self.query], dtype=np.intp))


def sample_task(dataset, n_range, k_range, split="train", seed=0, task_index=0,
                query_per_class=5, within_dataset_tasks=False, dataset_ids=None):
    """Draw one N-way K-shot episode from a counter-keyed stream."""
    n_lo, n_hi = (int(v) for v in n_range)
    k_lo, k_hi = (int(v) for v in k_range)
    if not (1 <= n_lo <= n_hi) or not (1 <= k_lo <= k_hi):
        raise ValueError(f"invalid ranges n={n_range} k={k_range}")
    if query_per_class < 1:
        raise ValueError("query_per_class must be >= 1")
    pool = dataset.classes_of(dataset_ids)
    rng = stream(seed, "task", task_index)
    n_way = int(rng.integers(n_lo, n_hi + 1))
    k_shot = int(rng.integers(k_lo, k_hi + 1))
    if within_dataset_tasks:
        by_ds = {}
        for c in pool:
            by_ds.setdefault(c.dataset_id, []).append(c)
        eligible = [d for d in sorted(by_ds) if len(by_ds[d]) >= n_way]
        if not eligible:
            raise EpisodeError(f"no single dataset has {n_way} classes")
        pool = by_ds[eligible[int(rng.integers(0, len(eligible)))]]
    if n_way > len(pool):
        raise EpisodeError(f"n_way={n_way} exceeds {len(pool)} available classes")
    chosen = [pool[i] for i in rng.choice(len(pool), n_way, replace=False)]
    support, query = [], []
    for pos, cls in enumerate(chosen):
        refs = cls.splits[split]
        need = k_shot + query_per_class
        if len(refs) < need:
            raise EpisodeError(
                f"class {cls.class_id} has {len(refs)} '{split}' samples, episode needs {need}",
                class_id=cls.class_id)
        picks = rng.choice(len(refs), need, replace=False)
        for j, idx in enumerate(picks):
            ref = refs[idx]
            item = EpisodeSample(ref, pos, dataset.images[ref])
            (support if j < k_shot else query).append(item)
    return TaskEpisode([c.class_id for c in chosen], support, query, n_way, k_shot, task_index)
