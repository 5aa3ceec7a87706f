"""scikit-learn style wrappers.

``ManifoldVAE`` is a transformer (images -> latent means), ``UNetSegmenter``
a fit/predict estimator scored by Dice, and ``GradientGuidedSuggester`` is
fitted on the unannotated pool and then asked for suggestions given the
annotated sources. All follow the usual ``get_params``/``set_params``
contract so they can be cloned and grid-searched.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .data.dataset import Sample
from .exceptions import DimensionError
from .models import (
    decode_latent,
    encode_latent,
    init_unet,
    init_vae,
    predict_proba,
    train_segmenter,
    train_vae,
)
from .models.losses import dice_score
from .sampling import (
    DEFAULT_ALPHA,
    DEFAULT_THETA_MAX,
    build_latent_index,
    gradient_ascend_input,
    suggest_gradient_guided,
)


def check_images(X, name: str = "X") -> np.ndarray:
    """Validate an image stack: finite floats shaped (N, H, W); a single (H, W) image is promoted."""
    arr = check_array(X, ensure_2d=False, allow_nd=True, dtype=np.float64, input_name=name)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim == 4 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim != 3:
        raise DimensionError(f"{name} must be an (N, H, W) image stack, got shape {arr.shape}")
    return arr


def check_masks(y, shape) -> np.ndarray:
    arr = check_images(y, "y")
    if arr.shape != shape:
        raise DimensionError(f"masks {arr.shape} do not match images {shape}")
    if not np.all((arr == 0) | (arr == 1)):
        raise DimensionError("masks must be binary")
    return arr


class ManifoldVAE(TransformerMixin, BaseEstimator):
    """Learn a low-dimensional image manifold; ``transform`` returns encoder means."""

    def __init__(self, latent_dim=5, channels=(8, 16, 32), epochs=50, learning_rate=1e-4,
                 batch_size=16, random_state=0):
        self.latent_dim = latent_dim
        self.channels = channels
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_images(X)
        model = init_vae(X.shape[1:], self.latent_dim, self.channels, seed=self.random_state)
        self.model_, self.loss_history_ = train_vae(
            model, X, self.epochs, self.learning_rate, seed=self.random_state, batch_size=self.batch_size
        )
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return np.atleast_2d(encode_latent(self.model_, check_images(X)))

    def inverse_transform(self, Z):
        check_is_fitted(self, "model_")
        return decode_latent(self.model_, Z)


class UNetSegmenter(BaseEstimator):
    """Binary segmenter trained with the soft Dice loss."""

    def __init__(self, base_channels=8, depth=2, epochs=30, learning_rate=1e-3, batch_size=16,
                 threshold=0.5, random_state=0, warm_start=False):
        self.base_channels = base_channels
        self.depth = depth
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.threshold = threshold
        self.random_state = random_state
        self.warm_start = warm_start

    def fit(self, X, y):
        X = check_images(X)
        y = check_masks(y, X.shape)
        if self.warm_start and hasattr(self, "model_"):
            model = self.model_
        else:
            model = init_unet(self.base_channels, self.depth, seed=self.random_state)
        self.model_, self.loss_history_ = train_segmenter(
            model, X, y, self.epochs, self.learning_rate, seed=self.random_state, batch_size=self.batch_size
        )
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return predict_proba(self.model_, check_images(X))

    def predict(self, X):
        return (self.predict_proba(X) > self.threshold).astype(np.uint8)

    def score(self, X, y):
        """Mean per-slice hard Dice."""
        pred = self.predict(X)
        y = check_masks(y, pred.shape)
        return float(np.mean([dice_score(p, t) for p, t in zip(pred, y)]))

    def input_gradient_step(self, X, y, alpha=DEFAULT_ALPHA):
        """Images moved by ``alpha`` along the gradient of their Dice loss."""
        check_is_fitted(self, "model_")
        X = check_images(X)
        return gradient_ascend_input(self.model_, X, check_masks(y, X.shape), alpha)


def _as_samples(X, y=None, ids=None, groups=None):
    n = len(X)
    ids = [f"{i:06d}" for i in range(n)] if ids is None else [str(i) for i in ids]
    groups = ids if groups is None else [str(g) for g in groups]
    if len(ids) != n or len(groups) != n:
        raise DimensionError("ids and groups must have one entry per image")
    seen: dict = {}
    out = []
    for i in range(n):
        k = seen.get(groups[i], 0)
        seen[groups[i]] = k + 1
        mask = None if y is None else y[i].astype(np.uint8)
        out.append(Sample(ids[i], groups[i], "", k, X[i], mask))
    return out


class GradientGuidedSuggester(BaseEstimator):
    """Suggest pool samples by following segmentation-loss gradients on a learnt manifold.

    ``fit`` embeds the unannotated pool with ``manifold``; ``suggest`` takes the
    annotated sources and returns a :class:`~gradsuggest.sampling.SuggestionResult`.
    With ``strategy="patient"`` the ``groups`` arrays name each image's patient
    and whole patients are suggested.
    """

    def __init__(self, segmenter=None, manifold=None, alpha=DEFAULT_ALPHA, theta_max=DEFAULT_THETA_MAX,
                 strategy="image"):
        self.segmenter = segmenter
        self.manifold = manifold
        self.alpha = alpha
        self.theta_max = theta_max
        self.strategy = strategy

    def fit(self, X, y=None, ids=None, groups=None):
        X = check_images(X)
        check_is_fitted(self.manifold, "model_")
        self.index_ = build_latent_index(self.manifold.model_, _as_samples(X, None, ids, groups), self.strategy)
        return self

    def suggest(self, X, y, m, ids=None, groups=None):
        check_is_fitted(self, "index_")
        check_is_fitted(self.segmenter, "model_")
        X = check_images(X)
        y = check_masks(y, X.shape)
        prefix = "src"
        ids = [f"{prefix}{i:06d}" for i in range(len(X))] if ids is None else ids
        sources = _as_samples(X, y, ids, groups)
        return suggest_gradient_guided(
            self.segmenter.model_, self.manifold.model_, sources, self.index_, m,
            self.alpha, self.theta_max, self.strategy,
        )
