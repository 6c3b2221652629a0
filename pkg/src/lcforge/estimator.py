"""scikit-learn compatible classifier around the ResNet / ResNet-LC trainer."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted

from .data import Dataset
from .diagnostics import AttackConfig, layer_report, robust_accuracy
from .models import ModelSpec, build_resnet_lc, fold_model, param_census
from .trainer import TrainConfig, predict_logits, train


def _check_images(X) -> np.ndarray:
    X = check_array(X, allow_nd=True, dtype=None, ensure_min_samples=1)
    if X.ndim != 4:
        raise ValueError(f"expected images of shape (n_samples, channels, height, width), got {X.shape}")
    if X.dtype != np.uint8:
        if X.min() < 0 or X.max() > 255 or not np.all(np.equal(np.mod(X, 1), 0)):
            raise ValueError("images must hold integer pixel values in [0, 255]")
        X = X.astype(np.uint8)
    return X


class LCResNetClassifier(ClassifierMixin, BaseEstimator):
    """CIFAR-style ResNet classifier whose spatial convs may be LC-Blocks over frozen random filters.

    ``X`` is a ``uint8`` array of shape ``(n, channels, height, width)``.
    Channel statistics for normalization are estimated in :meth:`fit`.

    Parameters mirror :class:`~lcforge.models.ModelSpec` and
    :class:`~lcforge.trainer.TrainConfig`; ``random_state`` seeds both the
    initialization and the data order/augmentation.
    """

    def __init__(self, depth=20, width=16, expansion=1, kernel_size=3, frozen_spatial=False,
                 intermediate="none", use_lc=True, epochs=75, lr0=1e-2, momentum=0.9, weight_decay=1e-2,
                 batch_size=256, label_smoothing=0.1, augment=True, random_state=0):
        self.depth = depth
        self.width = width
        self.expansion = expansion
        self.kernel_size = kernel_size
        self.frozen_spatial = frozen_spatial
        self.intermediate = intermediate
        self.use_lc = use_lc
        self.epochs = epochs
        self.lr0 = lr0
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.label_smoothing = label_smoothing
        self.augment = augment
        self.random_state = random_state

    def _spec(self, n_classes: int, channels: int) -> ModelSpec:
        return ModelSpec(self.depth, self.width, self.expansion if self.use_lc else 1, self.kernel_size,
                         self.frozen_spatial, self.intermediate if self.use_lc else "none", self.use_lc,
                         n_classes, channels)

    def _config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.lr0, self.momentum, self.weight_decay, self.batch_size,
                           self.label_smoothing, int(self.random_state or 0), self.epochs, self.augment)

    def fit(self, X, y, X_val=None, y_val=None):
        X = _check_images(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} samples but y has {len(y)}")
        check_classification_targets(y)
        self.label_encoder_ = LabelEncoder().fit(y)
        self.classes_ = self.label_encoder_.classes_
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        spec = self._spec(len(self.classes_), X.shape[1])
        cfg = self._config()
        train_ds = Dataset(X, self.label_encoder_.transform(y), len(self.classes_))
        val_ds = None
        if X_val is not None:
            val_ds = Dataset(_check_images(X_val), self.label_encoder_.transform(np.asarray(y_val)),
                             len(self.classes_), train_ds.channel_mean, train_ds.channel_std)
        self.channel_mean_ = train_ds.channel_mean
        self.channel_std_ = train_ds.channel_std
        self.model_ = build_resnet_lc(spec, seed=cfg.seed)
        self.history_ = train(self.model_, train_ds, val_ds, cfg)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _dataset(self, X, y=None) -> Dataset:
        X = _check_images(X)
        labels = np.zeros(len(X), dtype=np.int64) if y is None else self.label_encoder_.transform(np.asarray(y))
        return Dataset(X, labels, len(self.classes_), self.channel_mean_, self.channel_std_)

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return predict_logits(self.model_, self._dataset(X), self.batch_size)

    def predict_proba(self, X) -> np.ndarray:
        logits = self.decision_function(X).astype(np.float64)
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]

    def robust_score(self, X, y, epsilon: float = 1 / 255) -> float:
        """Accuracy under an l_inf FGSM attack of ``epsilon`` (pixel units)."""
        check_is_fitted(self, "model_")
        cfg = AttackConfig(epsilon, self.label_smoothing)
        return robust_accuracy(self.model_, self._dataset(X, y), cfg, self.batch_size)[1]

    def fold(self) -> "LCResNetClassifier":
        """A fitted copy whose LC-Blocks are replaced by their combined filters."""
        check_is_fitted(self, "model_")
        folded = LCResNetClassifier(**{**self.get_params(), "use_lc": False, "expansion": 1,
                                       "intermediate": "none"})
        for attr in ("label_encoder_", "classes_", "channel_mean_", "channel_std_", "history_",
                     "n_features_in_"):
            setattr(folded, attr, getattr(self, attr))
        folded.model_ = fold_model(self.model_)
        return folded

    def census(self) -> dict:
        check_is_fitted(self, "model_")
        return param_census(self.model_)

    def filter_report(self, draws: int = 100) -> list:
        check_is_fitted(self, "model_")
        return layer_report(self.model_, draws, seed=int(self.random_state or 0))
