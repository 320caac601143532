import numpy as np
import pytest
from sklearn.base import clone

from metaforge.errors import CapabilityError
from metaforge.estimator import MetaForgeClassifier, SynthesisTransformer, check_images


@pytest.fixture(scope="module")
def arrays(small_toy):
    X, y = small_toy.split_arrays("train")
    return X, y, small_toy.authenticity_map()


@pytest.fixture(scope="module")
def fitted(arrays):
    X, y, auth = arrays
    return MetaForgeClassifier(meta_epochs=2, tasks_per_epoch=3, channels=(8, 16), k_range=(2, 4),
                               query_per_class=3, seed=1).fit(X, y, authenticity=auth)


def test_check_images():
    with pytest.raises(ValueError):
        check_images(np.zeros((3, 8, 8)))
    with pytest.raises(ValueError):
        check_images(np.full((1, 3, 8, 8), 2.0))
    with pytest.raises(ValueError):
        check_images(np.zeros((0, 3, 8, 8)))
    assert check_images(np.zeros((1, 3, 8, 8), np.float64)).dtype == np.float32


def test_fit_predict(fitted, arrays):
    X, y, _ = arrays
    assert fitted.classes_.tolist() == [0, 1, 2, 3]
    p = fitted.predict_proba(X[:7])
    assert p.shape == (7, 4) and np.allclose(p.sum(1), 1, atol=1e-6)
    assert set(fitted.predict(X).tolist()) <= {0, 1, 2, 3}
    assert 0 <= fitted.score(X, y) <= 1
    assert len(fitted.train_log_) == 2 * 3 * 5
    s = fitted.fake_score(X[:7])
    assert np.all((s >= 0) & (s <= 1))


def test_fit_is_deterministic_and_clonable(fitted, arrays):
    X, y, auth = arrays
    again = clone(fitted).fit(X, y, authenticity=auth)
    assert again.params_.equals(fitted.params_)
    assert clone(fitted).get_params() == fitted.get_params()


def test_adapt_returns_a_new_model(fitted, arrays):
    X, y, _ = arrays
    adapted = fitted.adapt(X[:8], y[:8], steps=2)
    assert not adapted.params_.equals(fitted.params_)
    assert fitted.predict_proba(X[:2]).shape == adapted.predict_proba(X[:2]).shape
    with pytest.raises(ValueError):
        fitted.adapt(X[:2], [0, 9])


def test_fit_errors(arrays):
    X, y, _ = arrays
    with pytest.raises(ValueError):
        MetaForgeClassifier().fit(X, y[:-1])
    with pytest.raises(ValueError):
        MetaForgeClassifier().fit(X, np.zeros(len(X)))
    with pytest.raises(Exception):
        MetaForgeClassifier().predict(X)


def test_synthesis_transformer(arrays, fitted):
    X, y, _ = arrays
    out = SynthesisTransformer(seed=3).fit_transform(X[:6])
    assert out.shape == X[:6].shape and out.min() >= 0 and out.max() <= 1
    assert np.array_equal(out, SynthesisTransformer(seed=3).fit_transform(X[:6]))
    with pytest.raises(CapabilityError):
        SynthesisTransformer(pool=("FGSM",)).fit_transform(X[:2])
    adv = SynthesisTransformer(pool=("FGSM",), max_len=1, model=fitted).fit(X[:4]).transform(X[:4], y[:4])
    assert np.abs(adv - X[:4]).max() <= 16 / 255 + 1e-6
