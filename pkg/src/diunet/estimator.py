"""scikit-learn style wrappers around the segmentation network.

DiuNetSegmenter exposes the network through the familiar fit/predict
surface so it composes with sklearn tooling (get_params/set_params,
cloning, pipelines). X is a (n, H, W, D) float array of slices; y is a
(n, H, W) label map with values in {0, 1, 2, 4}. predict returns binary
per-structure masks, predict_proba the underlying sigmoid scores.

The two preprocessing transformers mirror the pipeline's intensity steps:
IntensityWindower is stateless per image, ChannelZScorer learns
per-channel statistics from the data it is fitted on.
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .metrics import binarize, compose_from_channels, compose_subregions, dice_score, structure_target
from .network import ModelConfig, build_model
from .preprocess import SegmentationSample, channel_stats, window_image, zscore
from .train import TrainConfig, train_model


def _check_images(X):
    X = np.asarray(X)
    if X.ndim != 4:
        raise ValueError(f"X must be (n, H, W, D), got shape {X.shape}")
    return X.astype(np.float32, copy=False)


class DiuNetSegmenter(BaseEstimator):
    """Trainable encoder/decoder segmenter with a fit/predict interface."""

    def __init__(
        self,
        depth=3,
        base_filters=8,
        variant="dilated",
        epochs=20,
        batch_size=16,
        learning_rate=3e-3,
        lr_decay=0.9,
        threshold=0.5,
        seed=0,
    ):
        self.depth = depth
        self.base_filters = base_filters
        self.variant = variant
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_decay = lr_decay
        self.threshold = threshold
        self.seed = seed

    def fit(self, X, y):
        X = _check_images(X)
        y = np.asarray(y)
        if y.shape != X.shape[:3]:
            raise ValueError(f"y must be (n, H, W) matching X, got {y.shape}")
        samples = [
            SegmentationSample(image=X[i], labels=y[i].astype(np.uint8), patient_id=i)
            for i in range(len(X))
        ]
        config = ModelConfig(
            depth=self.depth,
            base_filters=self.base_filters,
            height=X.shape[1],
            width=X.shape[2],
            in_channels=X.shape[3],
            classes=3,
            variant=self.variant,
        )
        self.model_ = build_model(config, seed=self.seed)
        train_config = TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            base_lr=self.learning_rate,
            lr_decay=self.lr_decay,
            seed=self.seed,
            threshold=self.threshold,
        )
        self.history_ = train_model(self.model_, samples, [], train_config)
        self.n_features_in_ = X.shape[3]
        return self

    def predict_proba(self, X):
        """Sigmoid scores per structure channel, shape (n, H, W, 3)."""
        check_is_fitted(self)
        return self.model_.predict(_check_images(X))

    def predict(self, X):
        """Binary structure masks (channels: label 1, 2, 4), shape (n, H, W, 3)."""
        return binarize(self.predict_proba(X), self.threshold)

    def score(self, X, y):
        """Mean over samples of the mean WT/TC/ET Dice against y."""
        check_is_fitted(self)
        y = np.asarray(y)
        pred = self.predict(X)
        scores = []
        for i in range(len(pred)):
            pm = compose_from_channels(pred[i])
            gm = compose_subregions(y[i].astype(np.uint8))
            scores.append(
                np.mean(
                    [
                        dice_score(pm.wt, gm.wt),
                        dice_score(pm.tc, gm.tc),
                        dice_score(pm.et, gm.et),
                    ]
                )
            )
        return float(np.mean(scores))


class IntensityWindower(TransformerMixin, BaseEstimator):
    """Per-image, per-channel percentile windowing onto [0, 255]."""

    def fit(self, X, y=None):
        _check_images(X)
        return self

    def transform(self, X):
        X = _check_images(X)
        return np.stack([window_image(img) for img in X])


class ChannelZScorer(TransformerMixin, BaseEstimator):
    """Standardize channels with statistics learned from the fitted data."""

    def fit(self, X, y=None):
        X = _check_images(X)
        self.mean_, self.std_ = channel_stats(list(X))
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = _check_images(X)
        return np.stack([zscore(img, self.mean_, self.std_) for img in X])
