"""Gradient-based attacks, image augmentations and sequential ensembles.

Images are C x H x W (or B x C x H x W for attacks) float arrays in [0, 1].
Every output is clamped back to [0, 1].
"""
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .errors import CapabilityError, NumericError
from .model import forward, softmax_restricted
from .rng import stream

ATTACK_KINDS = ("FGSM", "RFGSM", "FFGSM", "BIM", "MIFGSM", "PGD", "PGDL2", "TPGD")
AUG_KINDS = ("HFlip", "VFlip", "Rotate30", "Rotate90", "ColorJitter", "Grayscale", "Resize128",
             "CenterCrop", "RandomSolarize", "RandomInvert", "RandomErasing", "GaussianBlur",
             "RandomResizedCrop")

DEFAULT_EPS = 8 / 255
DEFAULT_ALPHA = 2 / 255
DEFAULT_STEPS = 10
DEFAULT_MU = 1.0

# (low, high) ranges used by draw_random_ensemble; alpha is drawn as a fraction of epsilon.
ATTACK_RANGES = {
    "FGSM": {"epsilon": (2 / 255, 8 / 255)},
    "RFGSM": {"epsilon": (4 / 255, 8 / 255), "alpha_frac": (0.25, 0.5)},
    "FFGSM": {"epsilon": (4 / 255, 8 / 255), "alpha_frac": (1.0, 1.25)},
    "BIM": {"epsilon": (4 / 255, 8 / 255), "alpha_frac": (0.2, 0.3), "steps": (3, 10)},
    "MIFGSM": {"epsilon": (4 / 255, 8 / 255), "alpha_frac": (0.2, 0.3), "steps": (3, 10),
               "mu": (0.5, 1.0)},
    "PGD": {"epsilon": (4 / 255, 8 / 255), "alpha_frac": (0.2, 0.3), "steps": (3, 10)},
    "PGDL2": {"epsilon": (0.25, 1.0), "alpha_frac": (0.2, 0.3), "steps": (3, 10)},
    "TPGD": {"epsilon": (4 / 255, 8 / 255), "alpha_frac": (0.2, 0.3), "steps": (3, 10)},
}

AUG_RANGES = {
    "HFlip": {},
    "VFlip": {},
    "Rotate30": {"angle": (-30.0, 30.0)},
    "Rotate90": {"k": (1, 3)},
    "ColorJitter": {"brightness": (0.5, 1.5), "contrast": (0.5, 1.5), "saturation": (0.5, 1.5)},
    "Grayscale": {},
    "Resize128": {"size": (128, 128)},
    "CenterCrop": {"scale": (0.6, 0.9)},
    "RandomSolarize": {"threshold": (0.0, 1.0)},
    "RandomInvert": {},
    "RandomErasing": {"area": (0.02, 0.2), "ratio": (0.3, 3.3)},
    "GaussianBlur": {"sigma": (0.1, 2.0)},
    "RandomResizedCrop": {"scale": (0.3, 1.0), "ratio": (0.75, 4 / 3)},
}


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    epsilon: float = DEFAULT_EPS
    alpha: float = DEFAULT_ALPHA
    steps: int = DEFAULT_STEPS
    mu: float = DEFAULT_MU
    random_start: bool = True
    seed: int = 0

    requires_model = True

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.kind != "FGSM" and not self.alpha > 0:
            raise ValueError(f"{self.kind} needs a positive alpha")
        if self.kind == "RFGSM" and not self.alpha < self.epsilon:
            raise ValueError("RFGSM needs alpha < epsilon")

    @property
    def norm(self):
        return "l2" if self.kind == "PGDL2" else "linf"


@dataclass(frozen=True)
class AugSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    requires_model = False

    def __post_init__(self):
        if self.kind not in AUG_KINDS:
            raise ValueError(f"unknown augmentation kind {self.kind!r}")
        for name, value in self.params.items():
            rng_ = AUG_RANGES[self.kind].get(name)
            if rng_ is not None and not rng_[0] <= value <= rng_[1]:
                raise ValueError(f"{self.kind}.{name}={value} outside [{rng_[0]}, {rng_[1]}]")


@dataclass(frozen=True)
class SynthSpec:
    steps: tuple

    def __post_init__(self):
        if not self.steps:
            raise ValueError("a synthesis ensemble needs at least one step")

    @property
    def requires_model(self):
        return any(s.requires_model for s in self.steps)

    @property
    def kinds(self):
        return [s.kind for s in self.steps]


@dataclass
class AttackContext:
    params: object
    class_subset: list


# attacks

def _ce_input_grad(params, x, targets, class_subset):
    fr = forward(params, x, class_subset)
    loss = ad.mean_cross_entropy(fr.logits, targets)
    (g,) = fr.tape.gradients(loss, wrt=[fr.tape.input])
    return g


def _kl_input_grad(params, x, ref_probs, class_subset):
    fr = forward(params, x, class_subset)
    loss = ad.kl_to_reference(fr.logits, ref_probs)
    (g,) = fr.tape.gradients(loss, wrt=[fr.tape.input])
    return g


def _checked(g):
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite input gradient during attack")
    return g


def _project_linf(x_adv, x, eps):
    # Only coordinates outside the ball are moved, so an in-ball point is left bit-exact.
    d = x_adv - x
    outside = np.abs(d) > eps
    if np.any(outside):
        x_adv = np.where(outside, x + np.sign(d) * x.dtype.type(eps), x_adv)
    return x_adv


def _l2_norms(v):
    return np.sqrt((v.reshape(len(v), -1).astype(np.float64) ** 2).sum(axis=1))


def _project_l2(x_adv, x, eps):
    d = x_adv - x
    n = _l2_norms(d)
    factor = np.where(n > eps, eps / np.maximum(n, 1e-12), 1.0).astype(x.dtype)
    return x + d * factor[:, None, None, None]


def _clip(v):
    return np.clip(v, 0, 1)


def apply_attack(params, x, true_pos, class_subset, spec, trace=None):
    """Perturb ``x`` to raise the classifier's loss on its true class.

    ``trace``, when a list, receives every iterate (including random starts).
    """
    if not isinstance(spec, AttackSpec):
        raise ValueError(f"not an attack spec: {spec!r}")
    single = np.asarray(x).ndim == 3
    x = np.asarray(x, dtype=np.float32)
    xb = x[None] if single else x
    targets = np.atleast_1d(np.asarray(true_pos, dtype=np.intp))
    if len(targets) == 1 and len(xb) > 1:
        targets = np.repeat(targets, len(xb))
    eps = np.float32(spec.epsilon)
    alpha = np.float32(spec.alpha)
    rng = stream(spec.seed, "attack", spec.kind)
    record = trace.append if trace is not None else (lambda v: None)

    def grad(v):
        return _checked(_ce_input_grad(params, v, targets, class_subset))

    kind = spec.kind
    if kind == "FGSM":
        out = _clip(xb + eps * np.sign(grad(xb)))
        record(out)
    elif kind == "RFGSM":
        start = _clip(xb + alpha * np.sign(rng.standard_normal(xb.shape).astype(np.float32)))
        record(start)
        out = _clip(_project_linf(start + (eps - alpha) * np.sign(grad(start)), xb, eps))
        record(out)
    elif kind == "FFGSM":
        start = _clip(xb + rng.uniform(-eps, eps, xb.shape).astype(np.float32))
        record(start)
        out = _clip(_project_linf(start + alpha * np.sign(grad(start)), xb, eps))
        record(out)
    elif kind in ("BIM", "PGD"):
        out = xb.copy()
        if kind == "PGD" and spec.random_start:
            out = _clip(xb + rng.uniform(-eps, eps, xb.shape).astype(np.float32))
            record(out)
        for _ in range(spec.steps):
            out = _clip(_project_linf(out + alpha * np.sign(grad(out)), xb, eps))
            record(out)
    elif kind == "MIFGSM":
        out = xb.copy()
        momentum = np.zeros_like(xb)
        mu = np.float32(spec.mu)
        for _ in range(spec.steps):
            g = grad(out)
            l1 = np.abs(g).reshape(len(g), -1).sum(axis=1)
            momentum = mu * momentum + g / np.maximum(l1, 1e-12).astype(np.float32)[:, None, None, None]
            out = _clip(_project_linf(out + alpha * np.sign(momentum), xb, eps))
            record(out)
    elif kind == "PGDL2":
        out = xb.copy()
        if spec.random_start:
            d = rng.standard_normal(xb.shape).astype(np.float32)
            n = _l2_norms(d)
            r = rng.uniform(0, 1, len(xb)) * spec.epsilon
            d = d * (r / np.maximum(n, 1e-12)).astype(np.float32)[:, None, None, None]
            out = _clip(xb + d)
            record(out)
        for _ in range(spec.steps):
            g = grad(out)
            n = _l2_norms(g)
            step = g * (1.0 / np.maximum(n, 1e-12)).astype(np.float32)[:, None, None, None]
            out = _clip(_project_l2(out + alpha * step, xb, spec.epsilon))
            record(out)
    else:  # TPGD
        ref = softmax_restricted(forward(params, xb, class_subset).logits.value)
        out = _clip(_project_linf(xb + 0.001 * rng.standard_normal(xb.shape).astype(np.float32), xb, eps))
        record(out)
        for _ in range(spec.steps):
            g = _checked(_kl_input_grad(params, out, ref, class_subset))
            out = _clip(_project_linf(out + alpha * np.sign(g), xb, eps))
            record(out)
    out = out.astype(np.float32)
    return out[0] if single else out


# augmentations

def _bilinear_resize(img, out_h, out_w):
    c, h, w = img.shape
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    coords = np.stack([yy, xx])
    return np.stack([ndimage.map_coordinates(img[k], coords, order=1, mode="nearest") for k in range(c)])


def _crop_resize(img, top, left, ch, cw):
    c, h, w = img.shape
    if ch > h or cw > w or ch < 1 or cw < 1:
        raise ValueError(f"crop {ch}x{cw} does not fit image {h}x{w}")
    return _bilinear_resize(img[:, top:top + ch, left:left + cw], h, w)


def _luminance(img):
    if img.shape[0] != 3:
        return img.mean(axis=0)
    return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]


def _uniform_param(rng, lo, hi):
    if isinstance(lo, int) and isinstance(hi, int):
        return int(rng.integers(lo, hi + 1))
    return float(rng.uniform(lo, hi))


def apply_augmentation(x, spec):
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 3:
        raise ValueError(f"augmentations take C x H x W images, got shape {x.shape}")
    c, h, w = x.shape
    p = spec.params
    rng = stream(spec.seed, "aug", spec.kind)
    kind = spec.kind
    if kind == "HFlip":
        out = x[:, :, ::-1]
    elif kind == "VFlip":
        out = x[:, ::-1, :]
    elif kind == "Rotate90":
        out = np.rot90(x, k=int(p.get("k", 1)), axes=(1, 2))
    elif kind == "Rotate30":
        angle = np.deg2rad(p.get("angle", 30.0))
        cy, cx = (h - 1) / 2, (w - 1) / 2
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        cos, sin = np.cos(angle), np.sin(angle)
        sy = cos * (yy - cy) - sin * (xx - cx) + cy
        sx = sin * (yy - cy) + cos * (xx - cx) + cx
        coords = np.stack([sy, sx])
        out = np.stack([ndimage.map_coordinates(x[k], coords, order=1, mode="constant", cval=0.0)
                        for k in range(c)])
    elif kind == "ColorJitter":
        out = x * p.get("brightness", 1.0)
        mean = _luminance(out).mean()
        out = (out - mean) * p.get("contrast", 1.0) + mean
        gray = _luminance(out)[None]
        out = gray + (out - gray) * p.get("saturation", 1.0)
    elif kind == "Grayscale":
        out = np.broadcast_to(_luminance(x)[None], x.shape)
    elif kind == "Resize128":
        size = int(p.get("size", 128))
        out = _bilinear_resize(_bilinear_resize(x, size, size), h, w)
    elif kind == "CenterCrop":
        size = int(p["size"]) if "size" in p else max(1, int(round(p.get("scale", 0.75) * min(h, w))))
        if size > min(h, w):
            raise ValueError(f"center crop {size} larger than image {h}x{w}")
        top, left = (h - size) // 2, (w - size) // 2
        out = _crop_resize(x, top, left, size, size)
    elif kind == "RandomSolarize":
        t = p.get("threshold", 0.5)
        out = np.where(x >= t, 1.0 - x, x)
    elif kind == "RandomInvert":
        out = 1.0 - x
    elif kind == "RandomErasing":
        area = p.get("area", rng.uniform(0.02, 0.2)) * h * w
        ratio = p.get("ratio", float(np.exp(rng.uniform(np.log(0.3), np.log(3.3)))))
        eh = int(min(h, max(1, round(np.sqrt(area * ratio)))))
        ew = int(min(w, max(1, round(np.sqrt(area / ratio)))))
        top = int(rng.integers(0, h - eh + 1))
        left = int(rng.integers(0, w - ew + 1))
        out = x.copy()
        out[:, top:top + eh, left:left + ew] = rng.uniform(0, 1, (c, eh, ew))
    elif kind == "GaussianBlur":
        sigma = p.get("sigma", 1.0)
        out = ndimage.gaussian_filter(x, sigma=(0, sigma, sigma), mode="reflect")
    else:  # RandomResizedCrop
        scale = p["scale"] if "scale" in p else rng.uniform(0.3, 1.0)
        ratio = p.get("ratio", float(np.exp(rng.uniform(np.log(0.75), np.log(4 / 3)))))
        area = scale * h * w
        ch = int(min(h, max(1, round(np.sqrt(area / ratio)))))
        cw = int(min(w, max(1, round(np.sqrt(area * ratio)))))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        out = _crop_resize(x, top, left, ch, cw)
    return np.clip(np.ascontiguousarray(out), 0, 1).astype(np.float32)


# ensembles

def compose_ensemble(spec, context=None):
    """Return ``transform(x, true_pos) -> x'`` applying the steps left to right."""
    if spec.requires_model and context is None:
        raise CapabilityError(f"ensemble {spec.kinds} contains attacks but no model context was given")

    def transform(x, true_pos=0, trace=None):
        out = np.asarray(x, dtype=np.float32)
        for step in spec.steps:
            if isinstance(step, AttackSpec):
                out = apply_attack(context.params, out, true_pos, context.class_subset, step, trace=trace)
            else:
                out = apply_augmentation(out, step)
        return out

    return transform


def draw_random_ensemble(pool, max_len, seed):
    """Random sequential ensemble drawn from ``pool`` (attack or augmentation kinds)."""
    pool = list(pool)
    if not pool:
        raise ValueError("pool must be non-empty")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    rng = stream(seed, "ensemble")
    length = int(rng.integers(1, min(max_len, len(pool)) + 1))
    kinds = [pool[i] for i in rng.choice(len(pool), length, replace=False)]
    steps = []
    for i, kind in enumerate(kinds):
        step_seed = int(rng.integers(0, 2**63))
        if kind in ATTACK_RANGES:
            r = ATTACK_RANGES[kind]
            eps = _uniform_param(rng, *r["epsilon"])
            alpha = eps * _uniform_param(rng, *r["alpha_frac"]) if "alpha_frac" in r else DEFAULT_ALPHA
            steps_n = _uniform_param(rng, *r["steps"]) if "steps" in r else 1
            mu = _uniform_param(rng, *r["mu"]) if "mu" in r else DEFAULT_MU
            steps.append(AttackSpec(kind, eps, alpha, steps_n, mu, True, step_seed))
        elif kind in AUG_RANGES:
            params = {name: _uniform_param(rng, lo, hi) for name, (lo, hi) in AUG_RANGES[kind].items()}
            steps.append(AugSpec(kind, params, step_seed))
        else:
            raise ValueError(f"unknown synthesis kind {kind!r}")
    return SynthSpec(tuple(steps))


def spec_to_dict(spec):
    out = []
    for s in spec.steps:
        if isinstance(s, AttackSpec):
            out.append({"type": "attack", "kind": s.kind, "epsilon": s.epsilon, "alpha": s.alpha,
                        "steps": s.steps, "mu": s.mu, "random_start": s.random_start, "seed": s.seed})
        else:
            out.append({"type": "augmentation", "kind": s.kind, "params": dict(s.params), "seed": s.seed})
    return out
