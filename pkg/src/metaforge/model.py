"""MicroConvNet parameters, forward/backward, and parameter-space arithmetic.

The network is a stack of blocks ``conv3x3 -> ReLU -> maxpool2`` followed by a
global average pool (the embedding) and one linear head spanning every class
of the meta-dataset. Each task reads only the head columns of its own classes.
"""
import json
import os
from collections import namedtuple

import numpy as np

from . import autodiff as ad
from .errors import NumericError, ShapeError
from .rng import stream
from .tensorio import atomic_write_bytes, decode_checkpoint, encode_checkpoint

DEFAULT_CHANNELS = (16, 32, 64)

ForwardResult = namedtuple("ForwardResult", ["logits", "embeddings", "tape"])


class ModelParams:
    """Ordered, immutable-by-convention set of named parameter arrays."""

    def __init__(self, tensors):
        self.tensors = dict(tensors)
        names = list(self.tensors)
        if len(names) < 4 or names[-2:] != ["head.weight", "head.bias"]:
            raise ShapeError("params", "expected conv blocks followed by head.weight/head.bias")
        prev = None
        for i in range(self.n_blocks):
            w = self.tensors[f"conv{i}.weight"]
            b = self.tensors[f"conv{i}.bias"]
            if w.ndim != 4 or b.shape != (w.shape[0],):
                raise ShapeError(f"conv{i}", f"inconsistent weight {w.shape} / bias {b.shape}")
            if prev is not None and w.shape[1] != prev:
                raise ShapeError(f"conv{i}", f"expects {w.shape[1]} input channels, previous block emits {prev}")
            prev = w.shape[0]
        hw = self.tensors["head.weight"]
        if hw.ndim != 2 or hw.shape[1] != prev or self.tensors["head.bias"].shape != (hw.shape[0],):
            raise ShapeError("head", f"weight {hw.shape} incompatible with embedding dim {prev}")

    @property
    def n_blocks(self):
        return (len(self.tensors) - 2) // 2

    @property
    def names(self):
        return list(self.tensors)

    @property
    def embedding_dim(self):
        return self.tensors["head.weight"].shape[1]

    @property
    def num_classes_total(self):
        return self.tensors["head.weight"].shape[0]

    @property
    def in_channels(self):
        return self.tensors["conv0.weight"].shape[1]

    @property
    def channels(self):
        return tuple(self.tensors[f"conv{i}.weight"].shape[0] for i in range(self.n_blocks))

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def copy(self):
        return ModelParams({k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype):
        return ModelParams({k: v.astype(dtype) for k, v in self.tensors.items()})

    def map(self, fn):
        return ModelParams({k: fn(v) for k, v in self.tensors.items()})

    def zip_map(self, other, fn, op="params"):
        check_same_shapes(self, other, op)
        return ModelParams({k: fn(v, other.tensors[k]) for k, v in self.tensors.items()})

    def flat(self):
        return np.concatenate([v.reshape(-1) for v in self.tensors.values()])

    def equals(self, other):
        if self.names != other.names:
            return False
        return all(np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items())

    def __repr__(self):
        return (f"ModelParams(channels={self.channels}, in_channels={self.in_channels}, "
                f"classes={self.num_classes_total})")


def check_same_shapes(a, b, op):
    if a.names != b.names:
        raise ValueError(f"{op}: parameter sets have different layers")
    for k, v in a.tensors.items():
        if v.shape != b.tensors[k].shape:
            raise ValueError(f"{op}: shape mismatch at {k}: {v.shape} vs {b.tensors[k].shape}")


def init_params(seed, num_classes_total, in_channels=3, channels=DEFAULT_CHANNELS, dtype=np.float32):
    """He-uniform weights and zero biases, one seeded stream per layer."""
    if num_classes_total < 1:
        raise ValueError("num_classes_total must be >= 1")
    tensors = {}
    prev = in_channels
    for i, ch in enumerate(channels):
        fan_in = prev * 9
        bound = np.sqrt(6.0 / fan_in)
        rng = stream(seed, "init", i)
        tensors[f"conv{i}.weight"] = rng.uniform(-bound, bound, size=(ch, prev, 3, 3)).astype(dtype)
        tensors[f"conv{i}.bias"] = np.zeros(ch, dtype=dtype)
        prev = ch
    bound = np.sqrt(6.0 / prev)
    rng = stream(seed, "init", len(channels))
    tensors["head.weight"] = rng.uniform(-bound, bound, size=(num_classes_total, prev)).astype(dtype)
    tensors["head.bias"] = np.zeros(num_classes_total, dtype=dtype)
    return ModelParams(tensors)


def zero_params(like):
    return like.map(np.zeros_like)


def _check_subset(class_subset, num_classes):
    subset = [int(c) for c in class_subset]
    if not subset:
        raise ValueError("class_subset must be non-empty")
    if len(set(subset)) != len(subset):
        raise ValueError(f"class_subset has duplicates: {subset}")
    bad = [c for c in subset if c < 0 or c >= num_classes]
    if bad:
        raise ValueError(f"class ids {bad} outside head of width {num_classes}")
    return subset


def forward(params, batch, class_subset, tape=None):
    """Run the network; returns logits (B x n), embeddings (B x d) and the tape."""
    batch = np.asarray(batch)
    if batch.ndim != 4:
        raise ShapeError("input", f"expected B x C x H x W batch, got shape {batch.shape}")
    if batch.shape[1] != params.in_channels:
        raise ShapeError("conv0", f"batch has {batch.shape[1]} channels, model expects {params.in_channels}")
    subset = _check_subset(class_subset, params.num_classes_total)
    dtype = params["head.weight"].dtype
    tape = tape or ad.GradTape()
    x = tape.leaf(batch.astype(dtype, copy=False))
    tape.input = x
    nodes = {name: tape.leaf(v) for name, v in params}
    tape.params = nodes
    h = x
    for i in range(params.n_blocks):
        name = f"conv{i}"
        h = ad.conv2d(h, nodes[f"{name}.weight"], nodes[f"{name}.bias"], name=name)
        h = ad.relu(h)
        h = ad.maxpool2(h, name=f"pool{i}")
    emb = ad.global_avg_pool(h)
    full = ad.affine(emb, nodes["head.weight"], nodes["head.bias"], name="head")
    logits = ad.take_columns(full, subset)
    return ForwardResult(logits, emb, tape)


def backward(tape, loss_grad=1.0, loss=None):
    """Gradients of a scalar loss w.r.t. every parameter and the input batch.

    ``loss`` defaults to the last node recorded on the tape.
    """
    if loss is None:
        loss = tape.last
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
    names = list(tape.params)
    wrt = [tape.params[n] for n in names] + [tape.input]
    grads = tape.gradients(loss, seed=loss_grad, wrt=wrt)
    return ModelParams(dict(zip(names, grads[:-1]))), grads[-1]


def softmax_restricted(logits, class_subset=None):
    """Softmax over the task's classes (last axis)."""
    z = np.asarray(logits)
    if class_subset is not None and z.shape[-1] != len(class_subset):
        raise ValueError(f"{z.shape[-1]} logits for {len(class_subset)} classes")
    if z.shape[-1] < 2:
        raise ValueError("need at least two classes")
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite logits")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def predict_proba(params, batch, class_subset):
    fr = forward(params, batch, class_subset)
    return softmax_restricted(fr.logits.value)


def argmax_lowest(probs):
    """Row-wise argmax; np.argmax already returns the first maximal index."""
    return np.argmax(probs, axis=-1)


def sgd_step(params, grads, lr):
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    return params.zip_map(grads, lambda p, g: p - p.dtype.type(lr) * g, "sgd_step")


def interpolate_params(theta, phi, eps_outer):
    """theta + eps * (phi - theta); exact at eps 0 and 1."""
    if not 0.0 <= eps_outer <= 1.0:
        raise ValueError(f"eps_outer must be in [0, 1], got {eps_outer}")
    check_same_shapes(theta, phi, "interpolate_params")
    if eps_outer == 0.0:
        return theta.copy()
    if eps_outer == 1.0:
        return phi.copy()
    return theta.zip_map(phi, lambda t, p: t + t.dtype.type(eps_outer) * (p - t))


def save_checkpoint(path, params, sidecar=None):
    """Write the MFCK file and, when given, a ``<path>.json`` sidecar."""
    atomic_write_bytes(path, encode_checkpoint([v for _, v in params]))
    if sidecar is not None:
        atomic_write_bytes(os.fspath(path) + ".json",
                           json.dumps(sidecar, indent=2, sort_keys=True).encode("utf-8"))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        tensors = decode_checkpoint(fh.read())
    if len(tensors) < 4 or len(tensors) % 2:
        raise ShapeError("checkpoint", f"expected weight/bias pairs, found {len(tensors)} tensors")
    names = []
    for i in range(len(tensors) // 2 - 1):
        names += [f"conv{i}.weight", f"conv{i}.bias"]
    names += ["head.weight", "head.bias"]
    params = ModelParams(dict(zip(names, tensors)))
    sidecar = None
    side_path = os.fspath(path) + ".json"
    if os.path.exists(side_path):
        with open(side_path) as fh:
            sidecar = json.load(fh)
    return params, sidecar
