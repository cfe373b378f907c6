"""sklearn-facing estimator and transformer behavior."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from diunet.estimator import ChannelZScorer, DiuNetSegmenter, IntensityWindower
from diunet.phantom import PhantomSpec, generate_phantoms
from diunet.preprocess import preprocess_dataset


@pytest.fixture(scope="module")
def phantom_arrays():
    samples = preprocess_dataset(generate_phantoms(PhantomSpec(size=32, count=12, seed=3)), 16)
    X = np.stack([s.image for s in samples])
    y = np.stack([s.labels for s in samples])
    return X, y


class TestDiuNetSegmenter:
    def test_get_set_params_round_trip(self):
        est = DiuNetSegmenter(depth=2, base_filters=4, epochs=5)
        params = est.get_params()
        assert params["depth"] == 2 and params["epochs"] == 5
        est2 = DiuNetSegmenter().set_params(**params)
        assert est2.get_params() == params

    def test_clone_keeps_params(self):
        est = DiuNetSegmenter(depth=1, base_filters=2, variant="baseline")
        cloned = clone(est)
        assert cloned.get_params() == est.get_params()

    def test_unfitted_predict_raises(self):
        with pytest.raises(NotFittedError):
            DiuNetSegmenter().predict(np.zeros((1, 16, 16, 4), dtype=np.float32))

    def test_fit_predict_shapes_and_binary_output(self, phantom_arrays):
        X, y = phantom_arrays
        est = DiuNetSegmenter(depth=1, base_filters=2, epochs=2, batch_size=4, seed=0)
        est.fit(X, y)
        masks = est.predict(X)
        assert masks.shape == X.shape[:3] + (3,)
        assert set(np.unique(masks)) <= {0, 1}
        proba = est.predict_proba(X)
        assert proba.min() > 0.0 and proba.max() < 1.0

    def test_fit_returns_self_and_records_history(self, phantom_arrays):
        X, y = phantom_arrays
        est = DiuNetSegmenter(depth=1, base_filters=2, epochs=3, batch_size=4)
        assert est.fit(X, y) is est
        assert len(est.history_) == 3

    def test_score_in_unit_range(self, phantom_arrays):
        X, y = phantom_arrays
        est = DiuNetSegmenter(depth=1, base_filters=2, epochs=2, batch_size=4)
        est.fit(X, y)
        assert 0.0 <= est.score(X, y) <= 1.0

    def test_label_shape_mismatch_rejected(self, phantom_arrays):
        X, _ = phantom_arrays
        with pytest.raises(ValueError, match="y must be"):
            DiuNetSegmenter(depth=1, base_filters=2).fit(X, np.zeros((len(X), 8, 8)))


class TestTransformers:
    def test_windower_output_range(self, phantom_arrays):
        X, _ = phantom_arrays
        out = IntensityWindower().fit_transform(X)
        assert out.min() >= 0.0 and out.max() <= 255.0
        assert out.shape == X.shape

    def test_zscorer_standardizes(self, phantom_arrays):
        X, _ = phantom_arrays
        scorer = ChannelZScorer().fit(X)
        out = scorer.transform(X)
        np.testing.assert_allclose(out.mean(axis=(0, 1, 2)), 0.0, atol=1e-3)
        np.testing.assert_allclose(out.std(axis=(0, 1, 2)), 1.0, atol=1e-3)

    def test_zscorer_unfitted_raises(self, phantom_arrays):
        X, _ = phantom_arrays
        with pytest.raises(NotFittedError):
            ChannelZScorer().transform(X)

    def test_zscorer_params_learned_from_fit_split_only(self, phantom_arrays):
        X, _ = phantom_arrays
        scorer = ChannelZScorer().fit(X[:6])
        out = scorer.transform(X[6:])
        assert out.shape == X[6:].shape
        # statistics come from the fit split, so the transform split is not
        # exactly standardized
        assert abs(out.mean()) > 1e-6
