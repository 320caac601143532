from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metaforge import autodiff as ad
from metaforge.errors import CapabilityError
from metaforge.model import ModelParams, forward, init_params
from metaforge.synthesis import (ATTACK_KINDS, AUG_KINDS, AUG_RANGES, AttackContext, AttackSpec, AugSpec,
                                 SynthSpec, apply_attack, apply_augmentation, compose_ensemble,
                                 draw_random_ensemble, spec_to_dict)


def scalar_feature_net(head_w):
    """One 1x1-channel block on 2x2 inputs: the embedding is the pooled top-left pixel."""
    w = np.zeros((1, 1, 3, 3), np.float32)
    w[0, 0, 1, 1] = 1.0
    return ModelParams({"conv0.weight": w, "conv0.bias": np.zeros(1, np.float32),
                        "head.weight": np.asarray(head_w, np.float32).reshape(-1, 1),
                        "head.bias": np.zeros(len(head_w), np.float32)})


def locally_linear_net(rng, channels=2, n_classes=3):
    """Identity conv with a large bias (ReLU always on) over 2x2 images."""
    w = np.zeros((channels, channels, 3, 3), np.float32)
    for c in range(channels):
        w[c, c, 1, 1] = 1.0
    return ModelParams({"conv0.weight": w, "conv0.bias": np.full(channels, 5.0, np.float32),
                        "head.weight": rng.normal(0, 2, (n_classes, channels)).astype(np.float32),
                        "head.bias": rng.normal(0, 1, n_classes).astype(np.float32)})


def micro(seed):
    rng = np.random.default_rng(seed)
    p = init_params(seed, 4, 3, (4, 4))
    x = rng.uniform(0, 1, (2, 3, 8, 8)).astype(np.float32)
    return p, x


def ce(params, x, targets, subset):
    return float(ad.mean_cross_entropy(forward(params.astype(np.float64), x.astype(np.float64), subset).logits,
                                       targets).value)


# attacks

def test_fgsm_sign_rule():
    p = scalar_feature_net([1.0, -1.0])
    x = np.full((1, 2, 2), 0.5, np.float32)
    out = apply_attack(p, x, 0, [0, 1], AttackSpec("FGSM", epsilon=0.1))
    # d loss / d x[0,0] < 0, every other pixel has zero gradient
    assert out[0, 0, 0] == np.float32(0.5) - np.float32(0.1)
    assert np.all(out.reshape(-1)[1:] == 0.5)


@pytest.mark.parametrize("seed", range(10))
def test_pgd_one_step_is_fgsm(seed):
    p, x = micro(seed)
    eps = float(np.random.default_rng(seed).uniform(0.01, 0.1))
    a = apply_attack(p, x, [0, 1], [0, 1], AttackSpec("FGSM", epsilon=eps))
    b = apply_attack(p, x, [0, 1], [0, 1], AttackSpec("PGD", epsilon=eps, alpha=eps, steps=1, random_start=False))
    assert np.array_equal(a, b)


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(ATTACK_KINDS), st.floats(0.005, 0.3), st.integers(1, 4))
def test_iterates_stay_in_ball_and_range(seed, kind, eps, steps):
    p, x = micro(seed)
    alpha = eps * 0.5
    trace = []
    out = apply_attack(p, x, [1, 0], [2, 3], AttackSpec(kind, eps, alpha, steps, seed=seed), trace=trace)
    assert len(trace) >= 1 and np.array_equal(trace[-1], out)
    for it in trace:
        assert it.min() >= 0 and it.max() <= 1
        d = (it - x).reshape(len(x), -1).astype(np.float64)
        if kind == "PGDL2":
            assert np.sqrt((d ** 2).sum(axis=1)).max() <= eps + 1e-5
        else:
            assert np.abs(d).max() <= eps + 1e-6


def test_attacks_are_seeded():
    p, x = micro(3)
    for kind in ATTACK_KINDS:
        a = apply_attack(p, x, [0, 1], [0, 1], AttackSpec(kind, seed=5))
        b = apply_attack(p, x, [0, 1], [0, 1], AttackSpec(kind, seed=5))
        assert np.array_equal(a, b), kind


def test_single_image_and_batch_agree():
    p, x = micro(4)
    spec = AttackSpec("BIM", steps=3)
    batch = apply_attack(p, x[:1], [1], [0, 1], spec)
    single = apply_attack(p, x[0], 1, [0, 1], spec)
    assert single.shape == x[0].shape and np.array_equal(batch[0], single)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.005, 0.09), st.floats(0.005, 0.09))
def test_fgsm_monotone_on_linear_model(seed, e1, e2):
    e1, e2 = sorted((e1, e2))
    rng = np.random.default_rng(seed)
    p = locally_linear_net(rng)
    x = rng.uniform(0.3, 0.5, (4, 2, 2, 2)).astype(np.float32)
    x[:, :, 0, 0] = 0.8  # pooled winner, clear of the others by more than 2 * eps
    t = rng.integers(0, 3, 4)
    l1 = ce(p, apply_attack(p, x, t, [0, 1, 2], AttackSpec("FGSM", epsilon=e1)), t, [0, 1, 2])
    l2 = ce(p, apply_attack(p, x, t, [0, 1, 2], AttackSpec("FGSM", epsilon=e2)), t, [0, 1, 2])
    assert l2 >= l1


def test_fgsm_raises_loss_on_trained_model(trained_small):
    params, ds = trained_small
    X, y = ds.split_arrays("test")
    subset = ds.class_ids
    pos = np.asarray([subset.index(c) for c in y])
    wins = 0
    for seed in range(10):
        idx = np.random.default_rng(seed).choice(len(X), 8, replace=False)
        adv = apply_attack(params, X[idx], pos[idx], subset, AttackSpec("FGSM", epsilon=0.05))
        wins += ce(params, adv, pos[idx], subset) > ce(params, X[idx], pos[idx], subset)
    assert wins >= 9


@pytest.mark.parametrize("bad", [dict(kind="CW"), dict(kind="FGSM", epsilon=0), dict(kind="BIM", steps=0),
                                 dict(kind="PGD", alpha=0), dict(kind="RFGSM", epsilon=0.01, alpha=0.02)])
def test_attack_spec_validation(bad):
    with pytest.raises(ValueError):
        AttackSpec(**bad)


# augmentations

def img(seed=0, size=16):
    return np.random.default_rng(seed).uniform(0, 1, (3, size, size)).astype(np.float32)


def test_involutions():
    x = img()
    h = AugSpec("HFlip")
    assert np.array_equal(apply_augmentation(apply_augmentation(x, h), h), x)
    r = AugSpec("Rotate90")
    out = x
    for _ in range(4):
        out = apply_augmentation(out, r)
    assert np.array_equal(out, x)
    assert np.array_equal(apply_augmentation(x, AugSpec("Rotate90", {"k": 2})),
                          apply_augmentation(apply_augmentation(x, r), r))


@pytest.mark.parametrize("sigma", [0.1, 0.5, 1.0, 2.0])
def test_blur_preserves_mean(sigma):
    x = img(1, 32)
    out = apply_augmentation(x, AugSpec("GaussianBlur", {"sigma": sigma}))
    assert abs(out.mean() - x.mean()) < 1e-3


@pytest.mark.parametrize("kind", AUG_KINDS)
def test_every_augmentation_keeps_shape_range_and_seed(kind):
    x = img(2)
    for seed in range(3):
        a = apply_augmentation(x, AugSpec(kind, seed=seed))
        assert a.shape == x.shape and a.dtype == np.float32
        assert a.min() >= 0 and a.max() <= 1
        assert np.array_equal(a, apply_augmentation(x, AugSpec(kind, seed=seed)))


def test_augmentation_rules():
    x = img(3)
    np.testing.assert_allclose(apply_augmentation(x, AugSpec("RandomInvert")), 1 - x, atol=1e-7)
    sol = apply_augmentation(x, AugSpec("RandomSolarize", {"threshold": 0.5}))
    np.testing.assert_allclose(sol, np.where(x >= 0.5, 1 - x, x), atol=1e-7)
    g = apply_augmentation(x, AugSpec("Grayscale"))
    assert np.array_equal(g[0], g[1]) and np.array_equal(g[1], g[2])
    ident = apply_augmentation(x, AugSpec("ColorJitter", {"brightness": 1.0, "contrast": 1.0, "saturation": 1.0}))
    np.testing.assert_allclose(ident, x, atol=1e-6)
    full = apply_augmentation(x, AugSpec("RandomResizedCrop", {"scale": 1.0, "ratio": 1.0}))
    np.testing.assert_allclose(full, x, atol=1e-6)
    erased = apply_augmentation(x, AugSpec("RandomErasing", {"area": 0.1, "ratio": 1.0}, seed=1))
    changed = np.any(erased != x, axis=0)
    assert 0.05 * 256 <= changed.sum() <= 0.15 * 256
    rot = apply_augmentation(np.ones((1, 8, 8), np.float32), AugSpec("Rotate30"))
    assert rot[0, 4, 4] == 1.0 and rot[0, 0, 0] == 0.0  # zero padding in the corners


def test_center_crop_bounds():
    x = img(4)
    assert apply_augmentation(x, AugSpec("CenterCrop", {"size": 16})).shape == x.shape
    with pytest.raises(ValueError, match="larger"):
        apply_augmentation(x, AugSpec("CenterCrop", {"size": 17}))
    np.testing.assert_allclose(apply_augmentation(x, AugSpec("CenterCrop", {"size": 16})), x, atol=1e-6)


@pytest.mark.parametrize("kind,params", [("ColorJitter", {"brightness": 1.6}), ("RandomSolarize", {"threshold": 1.5}),
                                         ("GaussianBlur", {"sigma": 0.0})])
def test_out_of_range_parameters(kind, params):
    with pytest.raises(ValueError):
        AugSpec(kind, params)


def test_augmentation_needs_3d():
    with pytest.raises(ValueError):
        apply_augmentation(np.zeros((1, 3, 4, 4)), AugSpec("HFlip"))


# ensembles

def test_compose():
    x = img(5)
    flip2 = compose_ensemble(SynthSpec((AugSpec("HFlip"), AugSpec("HFlip"))))
    assert np.array_equal(flip2(x), x)
    p = init_params(0, 3, 3, (4,))
    rot = apply_augmentation(x, AugSpec("Rotate90"))
    t = compose_ensemble(SynthSpec((AugSpec("Rotate90"), AttackSpec("FGSM", epsilon=0.1))), AttackContext(p, [0, 2]))
    out = t(x, 1)
    assert np.abs(out - rot).max() <= 0.1 + 1e-6 and out.min() >= 0 and out.max() <= 1
    with pytest.raises(CapabilityError):
        compose_ensemble(SynthSpec((AttackSpec("FGSM"),)))
    with pytest.raises(ValueError):
        SynthSpec(())


def test_random_ensembles():
    assert draw_random_ensemble(ATTACK_KINDS, 3, 7) == draw_random_ensemble(ATTACK_KINDS, 3, 7)
    for s in range(50):
        assert len(draw_random_ensemble(AUG_KINDS, 1, s).steps) == 1
    lengths = Counter(len(draw_random_ensemble(AUG_KINDS, 3, s).steps) for s in range(10_000))
    for n in (1, 2, 3):
        assert abs(lengths[n] / 10_000 - 1 / 3) <= 0.02
    for s in range(200):
        spec = draw_random_ensemble(AUG_KINDS + ATTACK_KINDS, 4, s)
        assert len(set(spec.kinds)) == len(spec.kinds)
        for step in spec.steps:
            if isinstance(step, AugSpec):
                for name, value in step.params.items():
                    lo, hi = AUG_RANGES[step.kind][name]
                    assert lo <= value <= hi
            else:
                assert step.alpha <= step.epsilon * 1.25 + 1e-12
    assert spec_to_dict(draw_random_ensemble(["FGSM", "HFlip"], 2, 1))[0]["type"] in ("attack", "augmentation")
    with pytest.raises(ValueError):
        draw_random_ensemble([], 2, 0)
    with pytest.raises(ValueError):
        draw_random_ensemble(["Nope"], 1, 0)
