"""A small reverse-mode differentiation tape over numpy arrays.

Values are recorded on a :class:`GradTape` in creation order, which is already a
topological order, so backward is a single reverse sweep. Gradients are
accumulated into a fresh buffer on every call: running backward twice on the
same tape gives bit-identical results.

Ops keep the dtype of their inputs. Production code runs in float32; the
finite-difference oracles run the same ops in float64.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ShapeError


class Node:
    __slots__ = ("tape", "index", "value")

    def __init__(self, tape, index, value):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(#{self.index}, shape={self.value.shape})"


class GradTape:
    """Records one forward computation."""

    def __init__(self):
        self._nodes = []
        self._parents = []
        self._vjps = []
        self.params = {}
        self.input = None

    def __len__(self):
        return len(self._nodes)

    def leaf(self, value):
        return self.record(np.asarray(value), (), None)

    def record(self, value, parents, vjp):
        node = Node(self, len(self._nodes), value)
        self._nodes.append(node)
        self._parents.append(tuple(p.index for p in parents))
        self._vjps.append(vjp)
        return node

    @property
    def last(self):
        return self._nodes[-1]

    def gradients(self, output, seed=1.0, wrt=None):
        """Backpropagate from ``output``; return gradients for ``wrt`` nodes.

        Nodes the output does not depend on get zero gradients.
        """
        if output.tape is not self:
            raise ValueError("output node belongs to a different tape")
        grads = [None] * (output.index + 1)
        grads[output.index] = np.full(output.value.shape, seed, dtype=output.value.dtype)
        for i in range(output.index, -1, -1):
            g = grads[i]
            vjp = self._vjps[i]
            if g is None or vjp is None:
                continue
            for parent, pg in zip(self._parents[i], vjp(g)):
                if pg is None:
                    continue
                if grads[parent] is None:
                    grads[parent] = pg
                else:
                    grads[parent] = grads[parent] + pg
        if wrt is None:
            wrt = self._nodes
        out = []
        for node in wrt:
            g = grads[node.index] if node.index < len(grads) else None
            out.append(np.zeros_like(node.value) if g is None else g)
        return out


def _same_tape(*nodes):
    tape = nodes[0].tape
    for n in nodes[1:]:
        if n.tape is not tape:
            raise ValueError("nodes recorded on different tapes")
    return tape


# elementwise and reductions

def add(a, b):
    tape = _same_tape(a, b)
    return tape.record(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b):
    tape = _same_tape(a, b)
    return tape.record(a.value - b.value, (a, b), lambda g: (g, -g))


def scale(a, c):
    c = a.value.dtype.type(c)
    return a.tape.record(a.value * c, (a,), lambda g: (g * c,))


def relu(a):
    mask = a.value > 0
    return a.tape.record(np.where(mask, a.value, 0).astype(a.value.dtype), (a,),
                         lambda g: (np.where(mask, g, 0).astype(g.dtype),))


def total(a):
    return a.tape.record(a.value.sum(dtype=a.value.dtype), (a,),
                         lambda g: (np.broadcast_to(g, a.value.shape).copy(),))


def dot(a, w):
    """Weighted sum of a vector against a constant weight vector."""
    w = np.asarray(w, dtype=a.value.dtype)
    if w.shape != a.value.shape:
        raise ShapeError("dot", f"weights {w.shape} vs values {a.value.shape}")
    return a.tape.record((a.value * w).sum(dtype=a.value.dtype), (a,), lambda g: (g * w,))


def linear_combination(nodes, coefs):
    """sum_i coefs[i] * nodes[i] for scalar nodes, evaluated left to right."""
    tape = _same_tape(*nodes)
    dtype = nodes[0].value.dtype
    coefs = [dtype.type(c) for c in coefs]
    val = nodes[0].value * coefs[0]
    for n, c in zip(nodes[1:], coefs[1:]):
        val = val + n.value * c
    return tape.record(val, tuple(nodes), lambda g: tuple(g * c for c in coefs))


def gather_rows(a, rows):
    """Select rows of a 2-D (or leading axis of an n-D) node."""
    rows = np.asarray(rows, dtype=np.intp)
    shape = a.value.shape

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, rows, g)
        return (out,)

    return a.tape.record(a.value[rows], (a,), vjp)


def gather(a, rows, cols):
    """Pick a[rows[i], cols[i]] into a vector."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    shape = a.value.shape

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, (rows, cols), g)
        return (out,)

    return a.tape.record(a.value[rows, cols], (a,), vjp)


def take_columns(a, cols):
    cols = np.asarray(cols, dtype=np.intp)
    shape = a.value.shape

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[:, cols] = g
        return (out,)

    return a.tape.record(a.value[:, cols], (a,), vjp)


# network layers

def _im2col(x, k):
    b, c, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * k * k)


def _conv_same(x, w):
    o, c, k, _ = w.shape
    b, _, h, wd = x.shape
    cols = _im2col(x, k)
    out = cols @ w.reshape(o, c * k * k).T
    return out.reshape(b, h, wd, o).transpose(0, 3, 1, 2), cols


def conv2d(x, w, b, name="conv"):
    """Stride-1 convolution with 'same' zero padding (odd square kernels)."""
    tape = _same_tape(x, w, b)
    xv, wv, bv = x.value, w.value, b.value
    if xv.ndim != 4 or wv.ndim != 4:
        raise ShapeError(name, f"expected 4-D input and weight, got {xv.shape} and {wv.shape}")
    if xv.shape[1] != wv.shape[1]:
        raise ShapeError(name, f"input has {xv.shape[1]} channels, weight expects {wv.shape[1]}")
    if wv.shape[2] != wv.shape[3] or wv.shape[2] % 2 == 0:
        raise ShapeError(name, f"kernel must be odd and square, got {wv.shape[2:]}")
    if bv.shape != (wv.shape[0],):
        raise ShapeError(name, f"bias shape {bv.shape} does not match {wv.shape[0]} filters")
    out, cols = _conv_same(xv, wv)
    out = out + bv[None, :, None, None]
    o, c, k, _ = wv.shape

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(wv.shape)
        gb = g2.sum(axis=0)
        flipped = np.ascontiguousarray(wv[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gx, _ = _conv_same(np.ascontiguousarray(g), flipped)
        return gx, gw, gb

    return tape.record(np.ascontiguousarray(out), (x, w, b), vjp)


def maxpool2(x, name="pool"):
    """2x2 max pooling, stride 2; ties resolve to the first window element."""
    v = x.value
    bsz, c, h, w = v.shape
    if h % 2 or w % 2:
        raise ShapeError(name, f"spatial size {h}x{w} not divisible by 2")
    win = v.reshape(bsz, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(bsz, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gw = gw.reshape(bsz, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gw.reshape(bsz, c, h, w),)

    return x.tape.record(out, (x,), vjp)


def global_avg_pool(x):
    v = x.value
    bsz, c, h, w = v.shape
    inv = v.dtype.type(1.0 / (h * w))

    def vjp(g):
        return (np.broadcast_to(g[:, :, None, None] * inv, v.shape).copy(),)

    return x.tape.record(v.mean(axis=(2, 3), dtype=v.dtype), (x,), vjp)


def affine(x, w, b, name="linear"):
    """x @ w.T + b with w shaped (out, in)."""
    tape = _same_tape(x, w, b)
    xv, wv, bv = x.value, w.value, b.value
    if xv.ndim != 2 or xv.shape[1] != wv.shape[1]:
        raise ShapeError(name, f"input {xv.shape} incompatible with weight {wv.shape}")
    if bv.shape != (wv.shape[0],):
        raise ShapeError(name, f"bias shape {bv.shape} does not match {wv.shape[0]} outputs")

    def vjp(g):
        return g @ wv, g.T @ xv, g.sum(axis=0)

    return tape.record(xv @ wv.T + bv, (x, w, b), vjp)


# losses

def log_softmax_rows(z):
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def mean_cross_entropy(logits, targets):
    """Mean softmax cross-entropy over rows, targets are column positions."""
    z = logits.value
    targets = np.asarray(targets, dtype=np.intp)
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite logits in cross-entropy")
    logp = log_softmax_rows(z)
    n = z.shape[0]
    rows = np.arange(n)
    val = -logp[rows, targets].sum(dtype=z.dtype) / z.dtype.type(n)

    def vjp(g):
        p = np.exp(logp)
        p[rows, targets] -= 1
        return (p * (g / z.dtype.type(n)),)

    return logits.tape.record(np.asarray(val, dtype=z.dtype), (logits,), vjp)


def contrastive_terms(e_orig, e_alt, similar, margin):
    """Per-pair y*d^2 + (1-y)*max(0, m-d)^2 with Euclidean distance d."""
    tape = _same_tape(e_orig, e_alt)
    a, b = e_orig.value, e_alt.value
    if a.shape != b.shape:
        raise ShapeError("contrastive", f"embedding shapes differ: {a.shape} vs {b.shape}")
    y = np.asarray(similar, dtype=a.dtype)
    m = a.dtype.type(margin)
    diff = a - b
    d = np.sqrt((diff * diff).sum(axis=1))
    hinge = np.maximum(0, m - d)
    val = y * d * d + (1 - y) * hinge * hinge

    def vjp(g):
        safe = np.where(d > 0, d, 1).astype(a.dtype)
        coef = 2 * y - (1 - y) * 2 * hinge / safe
        coef = np.where(d > 0, coef, 2 * y).astype(a.dtype)
        ga = (g * coef)[:, None] * diff
        return ga, -ga

    return tape.record(val.astype(a.dtype), (e_orig, e_alt), vjp)


def margin_ranking_terms(s_clean, s_adv, margin):
    """Per-pair max(0, m - (s_clean - s_adv))."""
    tape = _same_tape(s_clean, s_adv)
    a, b = s_clean.value, s_adv.value
    m = a.dtype.type(margin)
    raw = m - (a - b)
    active = (raw > 0).astype(a.dtype)

    def vjp(g):
        return -g * active, g * active

    return tape.record(np.maximum(0, raw).astype(a.dtype), (s_clean, s_adv), vjp)


def kl_to_reference(logits, ref_probs):
    """Sum over rows of KL(ref || softmax(logits))."""
    z = logits.value
    p = np.asarray(ref_probs, dtype=z.dtype)
    logq = log_softmax_rows(z)
    with np.errstate(divide="ignore", invalid="ignore"):
        logp = np.where(p > 0, np.log(np.where(p > 0, p, 1)), 0).astype(z.dtype)
    val = (p * (logp - logq)).sum(dtype=z.dtype)

    def vjp(g):
        q = np.exp(logq)
        rowsum = p.sum(axis=1, keepdims=True)
        return (g * (q * rowsum - p),)

    return logits.tape.record(np.asarray(val, dtype=z.dtype), (logits,), vjp)


def finite_diff_grad(fn, x, h=1e-3):
    """Central-difference gradient of a scalar function, evaluated in float64."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn(x))
        flat[i] = orig - h
        fm = float(fn(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2 * h)
    return grad
