"""scikit-learn style wrapper around the model and training loop.

Samples are whole sequences: ``X`` is (N, 11, 4, H, W) and ``y`` is the
binary future mask (N, 1, 32, H/6, W/6). Predictions keep that volume shape
rather than sklearn's usual (n_samples, n_classes) layout.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .metrics import binarize_and_score, mean_iou
from .model import ModelConfig, ParamStore, predict_logits
from .tensor import ShapeError, sigmoid
from .training import TrainConfig, train_loop


def check_sequences(X, n_bands: int = 11, t_in: int = 4, dtype=np.float32) -> np.ndarray:
    """Validate a finite (N, bands, t_in, H, W) input stack."""
    X = check_array(X, allow_nd=True, dtype=dtype, ensure_all_finite=True, ensure_min_samples=1)
    if X.ndim != 5 or X.shape[1:3] != (n_bands, t_in):
        raise ShapeError(f"expected X of shape (N, {n_bands}, {t_in}, H, W), got {X.shape}")
    return X


def check_targets(y, expected_shape) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != tuple(expected_shape):
        raise ShapeError(f"expected y of shape {tuple(expected_shape)}, got {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("y must be binary (0 or 1)")
    return y


class SIANetClassifier(ClassifierMixin, BaseEstimator):
    """Per-pixel rain / no-rain forecaster.

    Without ``validation_data`` in :meth:`fit`, the last
    ``validation_fraction`` of the samples is held out for checkpoint
    selection and the learning-rate plateau rule.
    """

    def __init__(self, arch="sianet", init_filters=32, levels=3, group_count=2, dropout_rate=0.4,
                 str_norm="softmax", str_attention="decomposed", lr=1e-4, weight_decay=0.1, pos_weight=4.0,
                 alpha=0.2, batch_size=4, epochs=10, threshold=0.5, validation_fraction=0.2, seed=0):
        self.arch = arch
        self.init_filters = init_filters
        self.levels = levels
        self.group_count = group_count
        self.dropout_rate = dropout_rate
        self.str_norm = str_norm
        self.str_attention = str_attention
        self.lr = lr
        self.weight_decay = weight_decay
        self.pos_weight = pos_weight
        self.alpha = alpha
        self.batch_size = batch_size
        self.epochs = epochs
        self.threshold = threshold
        self.validation_fraction = validation_fraction
        self.seed = seed

    def _configs(self):
        model = ModelConfig(arch=self.arch, init_filters=self.init_filters, levels=self.levels,
                            group_count=self.group_count, dropout_rate=self.dropout_rate, str_norm=self.str_norm,
                            str_attention=self.str_attention)
        train = TrainConfig(lr=self.lr, weight_decay=self.weight_decay, pos_weight=self.pos_weight, alpha=self.alpha,
                            batch_size=self.batch_size, epochs=self.epochs, threshold=self.threshold, seed=self.seed)
        return model, train

    def fit(self, X, y, validation_data=None):
        model_cfg, train_cfg = self._configs()
        X = check_sequences(X, model_cfg.in_channels, model_cfg.t_in)
        model_cfg.check_input(X.shape)
        y = check_targets(y, model_cfg.output_shape(X.shape))
        if validation_data is None:
            if not 0 < self.validation_fraction < 1:
                raise ValueError("validation_fraction must lie in (0, 1) when no validation_data is given")
            n_val = max(1, int(round(len(X) * self.validation_fraction)))
            if n_val >= len(X):
                raise ValueError(f"{len(X)} samples are too few to hold out a validation split")
            X, Xv, y, yv = X[:-n_val], X[-n_val:], y[:-n_val], y[-n_val:]
        else:
            Xv = check_sequences(validation_data[0], model_cfg.in_channels, model_cfg.t_in)
            yv = check_targets(validation_data[1], model_cfg.output_shape(Xv.shape))
        result = train_loop(model_cfg, (X, y), (Xv, yv), train_cfg)
        self.model_config_ = model_cfg
        self.params_: ParamStore = result.best_params
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.classes_ = np.array([0, 1])
        return self

    def decision_function(self, X) -> np.ndarray:
        """Refined logits, shape (N, 1, t_out, H/6, W/6)."""
        check_is_fitted(self, "params_")
        X = check_sequences(X, self.model_config_.in_channels, self.model_config_.t_in)
        return predict_logits(X, self.params_, self.model_config_)

    def predict_proba(self, X) -> np.ndarray:
        """Rain probability per output cell."""
        return sigmoid(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= self.threshold).astype(np.uint8)

    def score(self, X, y, sample_weight=None) -> float:
        """Pooled IoU of the thresholded forecast (one region, so mIoU = IoU)."""
        if sample_weight is not None:
            raise ValueError("sample_weight is not supported")
        logits = self.decision_function(X)
        y = check_targets(y, logits.shape)
        return mean_iou([binarize_and_score(logits, y, self.threshold)])
