"""scikit-learn style wrapper around the U-Net restorer."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .datagen import ChannelNormalizer, compute_channel_stats
from .exceptions import ShapeError
from .metrics import DEFAULT_TAU, dice, extract_segmentation
from .model import REFLECT, ModelSpec, build_model, forward
from .train import ArraySource, TrainConfig, fit_source


def check_images(X, name="X") -> np.ndarray:
    """Validate an N×H×W×3 batch of images in [0, 1] and return it as float32."""
    X = np.asarray(X)
    if X.ndim == 3 and X.shape[-1] == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ShapeError(f"{name} must be N×H×W×3, got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    X = X.astype(np.float32, copy=False)
    if not np.isfinite(X).all():
        raise ValueError(f"{name} contains non-finite values")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError(f"{name} must lie in [0, 1]; got range [{X.min():.4g}, {X.max():.4g}]")
    return X


class AnnotationRemover(TransformerMixin, BaseEstimator):
    """Learns to remove annotation overlays from images.

    ``fit(X, y)`` trains on noisy inputs ``X`` and targets ``y``: a second
    independently annotated copy (Noise2Noise) or the clean image
    (Noise2Clean). The estimator does not need to know which; the scheme is
    only recorded. ``predict`` returns restored images, ``transform`` the
    binary annotation masks found by differencing input and output, and
    ``score`` the mean Dice against reference masks.
    """

    def __init__(self, depth=3, base_channels=24, residual=True, loss="l1", learning_rate=1e-4,
                 momentum=0.9, weight_decay=1e-8, batch_size=16, epochs=4, normalization="linear",
                 padding_policy=REFLECT, tau=DEFAULT_TAU, scheme="n2n", random_state=0, max_steps=None):
        self.depth = depth
        self.base_channels = base_channels
        self.residual = residual
        self.loss = loss
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.normalization = normalization
        self.padding_policy = padding_policy
        self.tau = tau
        self.scheme = scheme
        self.random_state = random_state
        self.max_steps = max_steps

    def fit(self, X, y):
        X = check_images(X)
        y = check_images(y, "y")
        if X.shape != y.shape:
            raise ShapeError(f"X {X.shape} and y {y.shape} differ")
        seed = int(self.random_state or 0)
        config = TrainConfig(scheme=self.scheme, batch_size=self.batch_size, epochs=self.epochs, loss=self.loss,
                             learning_rate=self.learning_rate, momentum=self.momentum,
                             weight_decay=self.weight_decay, normalization=self.normalization, seed=seed,
                             padding_policy=self.padding_policy, max_steps=self.max_steps)
        self.normalizer_ = ChannelNormalizer(config.normalization, stats=compute_channel_stats(list(X))).fit(None)
        spec = ModelSpec(depth=self.depth, base_channels=self.base_channels, residual=self.residual)
        self.model_, self.loss_curve_ = fit_source(build_model(spec, seed), ArraySource(X, y), config,
                                                   normalizer=self.normalizer_)
        self.n_features_in_ = X.shape[-1]
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_images(X)
        out = []
        for start in range(0, len(X), max(1, int(self.batch_size))):
            x = self.normalizer_.transform(X[start:start + self.batch_size]).transpose(0, 3, 1, 2)
            y = forward(self.model_, x, self.padding_policy, clamp=False).transpose(0, 2, 3, 1)
            out.append(np.clip(self.normalizer_.inverse_transform(y), 0.0, 1.0))
        return np.concatenate(out)

    def transform(self, X):
        X = check_images(X)
        restored = self.predict(X)
        return np.stack([extract_segmentation(a, b, self.tau) for a, b in zip(X, restored)])

    def score(self, X, y=None):
        """Mean Dice of the extracted masks against reference masks ``y`` (N×H×W)."""
        masks = self.transform(X)
        y = np.asarray(y)
        if y.shape != masks.shape:
            raise ShapeError(f"reference masks {y.shape} do not match {masks.shape}")
        return float(np.mean([dice(p, t) for p, t in zip(masks, y)]))
