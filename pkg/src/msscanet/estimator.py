"""scikit-learn compatible regressor wrapping the network and its trainer."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .metrics import plcc, srocc
from .model import ModelConfig, build_model, validate_ablation
from .training import TrainSchedule, fit, predict_images


class MSSCANetRegressor(RegressorMixin, BaseEstimator):
    """Blind image-quality regressor: ``X`` is ``[n, 3, S, S]`` in [0, 1], ``y`` is MOS.

    Every constructor argument maps onto :class:`ModelConfig` or
    :class:`TrainSchedule`; ``random_state`` seeds both initialisation and
    shuffling.  ``mos_range`` fixes the score range used to normalise targets
    (defaults to the observed range of ``y``).
    """

    def __init__(self, image_size=64, patch_short=16, patch_long=8, embed_dim=32,
                 window_size=4, depth=1, heads=2, reduction=8, head_hidden=32,
                 use_short_branch=True, use_long_branch=True, use_spatial=True,
                 use_channel=True, use_cross=True, learning_rate=0.02, min_learning_rate=0.0,
                 epochs=60, batch_size=16, alpha=0.5, beta=0.5, enable_cb=True,
                 enable_ap=True, optimizer="gd", momentum=0.9, clip_norm=1.0,
                 mos_range=None, random_state=0):
        self.image_size = image_size
        self.patch_short = patch_short
        self.patch_long = patch_long
        self.embed_dim = embed_dim
        self.window_size = window_size
        self.depth = depth
        self.heads = heads
        self.reduction = reduction
        self.head_hidden = head_hidden
        self.use_short_branch = use_short_branch
        self.use_long_branch = use_long_branch
        self.use_spatial = use_spatial
        self.use_channel = use_channel
        self.use_cross = use_cross
        self.learning_rate = learning_rate
        self.min_learning_rate = min_learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.alpha = alpha
        self.beta = beta
        self.enable_cb = enable_cb
        self.enable_ap = enable_ap
        self.optimizer = optimizer
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.mos_range = mos_range
        self.random_state = random_state

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            image_size=self.image_size, patch_short=self.patch_short,
            patch_long=self.patch_long, embed_dim=self.embed_dim,
            window_size=self.window_size, depth=self.depth, heads=self.heads,
            reduction=self.reduction, head_hidden=self.head_hidden,
            use_short_branch=self.use_short_branch, use_long_branch=self.use_long_branch,
            use_spatial=self.use_spatial, use_channel=self.use_channel,
            use_cross=self.use_cross, seed=int(self.random_state or 0))

    def schedule(self) -> TrainSchedule:
        return TrainSchedule(lr=self.learning_rate, min_lr=self.min_learning_rate,
                             epochs=self.epochs, batch_size=self.batch_size,
                             seed=int(self.random_state or 0), alpha=self.alpha, beta=self.beta,
                             enable_cb=self.enable_cb, enable_ap=self.enable_ap,
                             optimizer=self.optimizer, momentum=self.momentum,
                             clip_norm=self.clip_norm)

    def _check_images(self, X):
        X = check_array(X, allow_nd=True, dtype=np.float64, ensure_2d=False)
        size = self.image_size
        if X.ndim != 4 or X.shape[1:] != (3, size, size):
            raise ValueError(f"expected images of shape [n, 3, {size}, {size}], got {X.shape}")
        return X

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64, y_numeric=True)
        X = self._check_images(X)
        lo, hi = self.mos_range if self.mos_range is not None else (y.min(), y.max())
        if hi <= lo:
            hi = lo + 1.0
        self.model_ = build_model(self.model_config())
        self.model_.mos_scale = (float(lo), float(hi))
        self.history_ = fit(self.model_, X, (y - lo) / (hi - lo), self.schedule())
        self.ablation_ = validate_ablation(self.model_.config, self.schedule().weights)
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return predict_images(self.model_, self._check_images(X))

    def correlations(self, X, y) -> dict[str, float]:
        """PLCC and SROCC of the predictions against ``y``."""
        pred = self.predict(X)
        return {"plcc": plcc(pred, y), "srocc": srocc(pred, y)}
