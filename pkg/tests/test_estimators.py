import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from gradsuggest.data import generate_phantom_dataset
from gradsuggest.estimators import (
    GradientGuidedSuggester,
    ManifoldVAE,
    UNetSegmenter,
    check_images,
)
from gradsuggest.exceptions import DimensionError
from gradsuggest.models import encode_latent
from gradsuggest.sampling import build_latent_index, suggest_gradient_guided


@pytest.fixture(scope="module")
def cohort():
    return generate_phantom_dataset(0, 6, 4, "A")


@pytest.fixture(scope="module")
def arrays(cohort):
    ids = cohort.sample_ids()
    return cohort.images(ids), cohort.masks(ids), ids, [cohort[i].patient_id for i in ids]


@pytest.fixture(scope="module")
def fitted(arrays):
    X, y, _, _ = arrays
    return ManifoldVAE(epochs=1).fit(X), UNetSegmenter(epochs=2).fit(X[:8], y[:8])


def test_check_images():
    assert check_images(np.zeros((4, 4))).shape == (1, 4, 4)
    assert check_images(np.zeros((2, 1, 4, 4))).shape == (2, 4, 4)
    with pytest.raises(DimensionError):
        check_images(np.zeros((2, 2, 4, 4)))
    with pytest.raises(ValueError):
        check_images(np.full((2, 4, 4), np.nan))


def test_params_and_clone():
    est = UNetSegmenter(epochs=3, threshold=0.4)
    assert est.get_params()["epochs"] == 3
    c = clone(est)
    assert c.get_params() == est.get_params() and c is not est
    assert ManifoldVAE().set_params(latent_dim=3).latent_dim == 3


def test_not_fitted(arrays):
    with pytest.raises(NotFittedError):
        ManifoldVAE().transform(arrays[0])
    with pytest.raises(NotFittedError):
        UNetSegmenter().predict(arrays[0])


def test_manifold_transform(fitted, arrays):
    vae, _ = fitted
    X = arrays[0]
    Z = vae.transform(X[:3])
    assert Z.shape == (3, 5)
    np.testing.assert_array_equal(Z, encode_latent(vae.model_, X[:3]))
    assert len(vae.loss_history_) == 1
    assert vae.inverse_transform(Z).shape[-2:] == (32, 32)


def test_segmenter(fitted, arrays):
    _, seg = fitted
    X, y = arrays[0], arrays[1]
    pred = seg.predict(X[:4])
    assert pred.shape == (4, 32, 32) and set(np.unique(pred)) <= {0, 1}
    assert 0.0 <= seg.score(X[:4], y[:4]) <= 1.0
    np.testing.assert_array_equal(seg.input_gradient_step(X[:2], y[:2], alpha=0.0), X[:2])
    with pytest.raises(DimensionError):
        UNetSegmenter(epochs=1).fit(X[:2], y[:3])


def test_warm_start(arrays):
    X, y = arrays[0][:4], arrays[1][:4]
    est = UNetSegmenter(epochs=1, warm_start=True).fit(X, y)
    first = {k: v.copy() for k, v in est.model_.params.items()}
    est.fit(X, y)
    assert any(not np.array_equal(first[k], est.model_.params[k]) for k in first)
    cold = UNetSegmenter(epochs=1).fit(X, y)
    assert all(np.array_equal(first[k], cold.model_.params[k]) for k in first)


@pytest.mark.parametrize("strategy", ["image", "patient"])
def test_suggester_matches_functional_api(fitted, cohort, arrays, strategy):
    vae, seg = fitted
    X, y, ids, groups = arrays
    src, pool = slice(0, 8), slice(8, None)
    sugg = GradientGuidedSuggester(seg, vae, alpha=1e-2, strategy=strategy)
    sugg.fit(X[pool], ids=ids[pool], groups=groups[pool])
    res = sugg.suggest(X[src], y[src], 2, ids=ids[src], groups=groups[src])
    index = build_latent_index(vae.model_, [cohort[i] for i in ids[pool]], strategy)
    ref = suggest_gradient_guided(seg.model_, vae.model_, [cohort[i] for i in ids[src]], index, 2, 1e-2, 45.0, strategy)
    assert res == ref
