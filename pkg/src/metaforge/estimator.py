"""scikit-learn style wrappers around meta-training and synthesis."""
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import from_arrays
from .errors import CapabilityError
from .model import DEFAULT_CHANNELS, forward, softmax_restricted
from .rng import derive_key
from .synthesis import AUG_KINDS, AttackContext, compose_ensemble, draw_random_ensemble
from .trainer import TrainConfig, few_shot_adapt, meta_train


def check_images(X):
    """Validate a B x C x H x W float batch in [0, 1]."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 4:
        raise ValueError(f"expected a B x C x H x W image batch, got shape {X.shape}")
    if len(X) == 0:
        raise ValueError("empty image batch")
    if not np.all(np.isfinite(X)) or X.min() < 0 or X.max() > 1:
        raise ValueError("pixel values must be finite and within [0, 1]")
    return X


class MetaForgeClassifier(ClassifierMixin, BaseEstimator):
    """Meta-trained image classifier over integer class ids.

    ``fit`` treats every class as an episode class; ``groups`` assigns classes
    to source datasets and ``authenticity`` maps class id to real/fake. The
    upper bound of ``n_range`` is capped at the number of classes seen.
    """

    def __init__(self, meta_epochs=30, tasks_per_epoch=10, inner_steps=5, inner_lr=0.05, outer_eps=0.5,
                 n_range=(2, 5), k_range=(1, 10), query_per_class=5, lambda1=0.5, lambda2=0.5, top_k=8,
                 n_select=4, channels=DEFAULT_CHANNELS, seed=0, workers=1, batch_size=256):
        self.meta_epochs = meta_epochs
        self.tasks_per_epoch = tasks_per_epoch
        self.inner_steps = inner_steps
        self.inner_lr = inner_lr
        self.outer_eps = outer_eps
        self.n_range = n_range
        self.k_range = k_range
        self.query_per_class = query_per_class
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.top_k = top_k
        self.n_select = n_select
        self.channels = channels
        self.seed = seed
        self.workers = workers
        self.batch_size = batch_size

    def _config(self, n_classes, num_classes_total):
        lo, hi = self.n_range
        return TrainConfig(meta_epochs=self.meta_epochs, tasks_per_epoch=self.tasks_per_epoch,
                           inner_steps=self.inner_steps, inner_lr=self.inner_lr, outer_eps=self.outer_eps,
                           n_range=(min(lo, n_classes), min(hi, n_classes)), k_range=self.k_range,
                           query_per_class=self.query_per_class, lambda1=self.lambda1, lambda2=self.lambda2,
                           top_k=self.top_k, n_select=self.n_select, channels=self.channels, seed=self.seed,
                           num_classes_total=num_classes_total)

    def fit(self, X, y, authenticity=None, groups=None):
        X = check_images(X)
        y = np.asarray(y)
        if y.ndim != 1 or len(y) != len(X):
            raise ValueError("y must be one class id per image")
        if np.any(y < 0) or not np.all(y == np.round(y)):
            raise ValueError("class ids must be non-negative integers")
        y = y.astype(int)
        dataset = from_arrays(X, y, authenticity, groups)
        self.classes_ = np.asarray(sorted(set(y.tolist())))
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.config_ = self._config(len(self.classes_), int(self.classes_.max()) + 1)
        self.params_, self.train_log_, self.provenance_ = meta_train(dataset, self.config_, workers=self.workers)
        self.authenticity_ = dataset.authenticity_map()
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _probs(self, params, X):
        X = check_images(X)
        subset = self.classes_.tolist()
        parts = [softmax_restricted(forward(params, X[i:i + self.batch_size], subset).logits.value)
                 for i in range(0, len(X), self.batch_size)]
        return np.concatenate(parts)

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        return self._probs(self.params_, X)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def fake_score(self, X):
        """Softmax mass on fake-flagged classes."""
        fake = np.asarray([self.authenticity_[c] == "fake" for c in self.classes_.tolist()])
        return self.predict_proba(X)[:, fake].sum(axis=1)

    def adapt(self, X, y, steps=5, lr=0.05):
        """Return a copy fine-tuned on a labelled support set of known classes."""
        check_is_fitted(self, "params_")
        X = check_images(X)
        out = self.__class__(**self.get_params())
        out.__dict__.update({k: v for k, v in self.__dict__.items() if k.endswith("_")})
        out.params_ = few_shot_adapt(self.params_, X, y, steps, lr, self.classes_.tolist(),
                                     registry=self.classes_.tolist())
        return out


class SynthesisTransformer(TransformerMixin, BaseEstimator):
    """Applies one random synthesis ensemble per image.

    Augmentation-only pools need no model; pools with attack kinds need a
    fitted ``model`` (a MetaForgeClassifier) and labels at transform time.
    """

    def __init__(self, pool=AUG_KINDS, max_len=3, seed=0, model=None):
        self.pool = pool
        self.max_len = max_len
        self.seed = seed
        self.model = model

    def fit(self, X, y=None):
        check_images(X)
        return self

    def transform(self, X, y=None):
        X = check_images(X)
        context = None
        positions = np.zeros(len(X), int)
        if self.model is not None:
            check_is_fitted(self.model, "params_")
            context = AttackContext(self.model.params_, self.model.classes_.tolist())
            if y is not None:
                positions = np.searchsorted(self.model.classes_, np.asarray(y))
        out = np.empty_like(X)
        for i, x in enumerate(X):
            spec = draw_random_ensemble(self.pool, self.max_len, derive_key(self.seed, "row", i))
            if spec.requires_model and (context is None or y is None):
                raise CapabilityError(f"ensemble {spec.kinds} needs a fitted model and labels")
            out[i] = compose_ensemble(spec, context)(x, int(positions[i]))
        return out
