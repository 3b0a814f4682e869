"""scikit-learn compatible wrapper around the network and training loop."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted

from . import rng as rngs
from .datapipe import PatchSet
from .model import CLAReSNet, ModelConfig
from .training import TrainConfig, evaluate, predict_logits, train


def check_patches(X, min_size: int = 1) -> np.ndarray:
    """Validate an (n_samples, bands, P, P) patch array and return it as float32."""
    X = np.asarray(X)
    if X.ndim != 4:
        raise ValueError(f"expected patches of shape (n_samples, bands, P, P), got {X.shape}")
    if X.shape[2] != X.shape[3]:
        raise ValueError(f"patches must be square, got {X.shape[2]}x{X.shape[3]}")
    if X.shape[2] < min_size:
        raise ValueError(f"patch size {X.shape[2]} below the minimum {min_size}")
    if X.shape[0] == 0:
        raise ValueError("no samples")
    X = X.astype(np.float32, copy=False)
    if not np.isfinite(X).all():
        raise ValueError("patches contain NaN or infinity")
    return X


def _holdout(y_enc: np.ndarray, fraction: float, seed: int):
    """Per-class stratified validation indices, at least one per class."""
    gen = rngs.stream(seed, rngs.SPLIT)
    tr, va = [], []
    for c in np.unique(y_enc):
        idx = np.flatnonzero(y_enc == c)
        idx = idx[gen.permutation(len(idx))]
        if len(idx) < 2:
            raise ValueError(f"class {c} needs at least 2 samples for a validation holdout")
        n_val = max(1, int(np.floor(len(idx) * fraction + 0.5)))
        n_val = min(n_val, len(idx) - 1)
        va.append(idx[:n_val])
        tr.append(idx[n_val:])
    return np.sort(np.concatenate(tr)), np.sort(np.concatenate(va))


class CLAReSNetClassifier(TransformerMixin, ClassifierMixin, BaseEstimator):
    """Patch classifier: spatial CNN per band, latent-attention spectral encoder.

    ``X`` holds patches of shape (n_samples, bands, P, P) with odd P >= 7;
    ``y`` holds arbitrary class labels. ``transform`` returns the fused
    embedding that feeds the classifier head.

    Parameters
    ----------
    embed_dim, base_channels, n_layers, heads : int
        Network width/depth, see :class:`ModelConfig`.
    internal_dropout, attn_dropout : float
    lr, weight_decay : float
        AdamW settings.
    epochs, batch_size, eval_batch_size, early_stop_patience : int
    augment : bool
        Noise/rotation/flip augmentation of training patches.
    validation_fraction : float
        Share of each class held out for early stopping when ``fit`` is not
        given an explicit validation set.
    random_state : int
    """

    def __init__(self, embed_dim=256, base_channels=64, n_layers=3, heads=8, internal_dropout=0.1,
                 attn_dropout=0.1, lr=1e-4, weight_decay=1e-2, epochs=40, batch_size=16,
                 eval_batch_size=32, early_stop_patience=10, augment=True, validation_fraction=0.1,
                 random_state=0):
        self.embed_dim = embed_dim
        self.base_channels = base_channels
        self.n_layers = n_layers
        self.heads = heads
        self.internal_dropout = internal_dropout
        self.attn_dropout = attn_dropout
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.eval_batch_size = eval_batch_size
        self.early_stop_patience = early_stop_patience
        self.augment = augment
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _model_config(self, n_classes: int, n_bands: int) -> ModelConfig:
        return ModelConfig(n_classes=n_classes, embed_dim=self.embed_dim,
                           base_channels=self.base_channels, n_layers=self.n_layers, heads=self.heads,
                           internal_dropout=self.internal_dropout, attn_dropout=self.attn_dropout,
                           max_bands=max(512, n_bands))

    def _train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, weight_decay=self.weight_decay, epochs=self.epochs,
                           batch_train=self.batch_size, batch_eval=self.eval_batch_size,
                           early_stop_patience=self.early_stop_patience, seed=self.random_state,
                           augment=self.augment)

    def _encode(self, y) -> np.ndarray:
        idx = np.searchsorted(self.classes_, y)
        idx = np.clip(idx, 0, len(self.classes_) - 1)
        if not np.array_equal(self.classes_[idx], np.asarray(y)):
            raise ValueError("y contains labels unseen during fit")
        return idx + 1

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_patches(X, min_size=7)
        y = np.asarray(y)
        check_classification_targets(y)
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} samples, y has {len(y)}")
        self.classes_ = np.unique(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        y_enc = self._encode(y)
        if X_val is None:
            tr, va = _holdout(y_enc, self.validation_fraction, self.random_state)
            train_set, val_set = PatchSet(X[tr], y_enc[tr]), PatchSet(X[va], y_enc[va])
        else:
            X_val = check_patches(X_val, min_size=7)
            train_set, val_set = PatchSet(X, y_enc), PatchSet(X_val, self._encode(np.asarray(y_val)))

        self.n_bands_in_ = X.shape[1]
        self.patch_size_ = X.shape[2]
        torch.manual_seed(rngs.torch_seed(self.random_state))
        self.model_ = CLAReSNet(self._model_config(len(self.classes_), self.n_bands_in_))
        best, _, history = train(self.model_, train_set, val_set, self._train_config())
        self.model_.load_state_dict(best.model_state)
        self.model_.eval()
        self.history_ = history
        self.best_epoch_ = best.epoch
        self.best_val_acc_ = best.best_val_acc
        return self

    def _check_input(self, X):
        check_is_fitted(self, "model_")
        X = check_patches(X, min_size=7)
        if X.shape[1] != self.n_bands_in_:
            raise ValueError(f"X has {X.shape[1]} bands, model was fit on {self.n_bands_in_}")
        return X

    def decision_function(self, X):
        X = self._check_input(X)
        return predict_logits(self.model_, X, self.eval_batch_size).numpy()

    def predict_proba(self, X):
        X = self._check_input(X)
        probs, _ = evaluate(self.model_, PatchSet(X, np.zeros(len(X), np.int64)), self.eval_batch_size)
        return probs

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

    def transform(self, X):
        X = self._check_input(X)
        _, emb = predict_logits(self.model_, X, self.eval_batch_size, embed=True)
        return emb.numpy()

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X, y, **fit_params).transform(X)


