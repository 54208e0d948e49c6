"""Scikit-learn style adapters over the block and the scene trainer.

``NonLocalRoiTransformer`` wraps the forward pass as a stateless-after-fit
feature transformer; ``SceneRoiClassifier`` wraps the per-scene SGD loop as
a classifier over user-supplied scenes. Both subclass ``BaseEstimator`` so
``get_params`` / ``set_params`` / cloning compose with pipelines and
search utilities. Tensor layouts stay native: a sample is one scene of
shape (N, D, H, W), not a flat feature row.
"""

from __future__ import annotations

import math
import warnings

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import ConvergenceWarning
from sklearn.utils.validation import check_is_fitted

from .block import default_dims, init_params, nlroi_forward
from .toytask import (
    Scene,
    _loss_and_grads,
    _model_of,
    _theta_of,
    forward_model,
    init_head,
    sgd_step,
)
from .validation import SUPPORTED_DTYPES, as_tensor, check_feature_blob


def _resolve_dtype(dtype, fallback):
    if dtype is None:
        return np.dtype(fallback)
    resolved = np.dtype(dtype)
    if resolved.type not in SUPPORTED_DTYPES:
        raise ValueError(f"dtype must be float32 or float64, got {dtype!r}")
    return resolved


def _channel_widths(d, embed_channels, g_channels):
    _, default_f, default_g = default_dims(d)
    d_f = default_f if embed_channels is None else int(embed_channels)
    d_g = default_g if g_channels is None else int(g_channels)
    if d_f < 1 or d_g < 1:
        raise ValueError(
            f"channel widths must be >= 1, got embed={d_f} and g={d_g}"
        )
    return d_f, d_g


class NonLocalRoiTransformer(TransformerMixin, BaseEstimator):
    """Augments each RoI's features with attention-mixed context.

    ``fit`` reads the channel count off the scene and draws seeded block
    parameters; ``transform`` maps (N, D, H, W) to (N, D + g_channels,
    H, W). The parameters stay at their initialization: this transformer
    provides the mechanism's feature space, it does not train the block.

    Parameters
    ----------
    embed_channels, g_channels:
        Width of the similarity embedding and of the context summary;
        ``None`` means half the input width, rounded up.
    seed:
        Seed for parameter initialization.
    dtype:
        Compute precision; ``None`` adopts the dtype of the scene passed
        to ``fit``.
    """

    def __init__(self, embed_channels=None, g_channels=None, seed=0, dtype=None):
        self.embed_channels = embed_channels
        self.g_channels = g_channels
        self.seed = seed
        self.dtype = dtype

    def fit(self, X, y=None):
        x = check_feature_blob(as_tensor(X, name="X"), name="X")
        dtype = _resolve_dtype(self.dtype, x.dtype)
        d = x.shape[1]
        d_f, d_g = _channel_widths(d, self.embed_channels, self.g_channels)
        self.n_features_in_ = d
        self.dtype_ = dtype
        self.params_ = init_params((d, d_f, d_g), seed=int(self.seed), dtype=dtype.type)
        return self

    def _prepared(self, X):
        check_is_fitted(self, "params_")
        x = as_tensor(X, name="X", dtype=self.dtype_.type)
        return check_feature_blob(x, channels=self.n_features_in_, name="X")

    def transform(self, X):
        return np.asarray(nlroi_forward(self._prepared(X), self.params_).augmented)

    def attention(self, X):
        """The row-stochastic N x N mixing matrix for one scene."""
        return np.asarray(nlroi_forward(self._prepared(X), self.params_).attention)


class SceneRoiClassifier(ClassifierMixin, BaseEstimator):
    """Binary per-RoI classifier trained with per-scene SGD.

    A sample is a whole scene: ``X`` is an (M, N, D, H, W) array or a
    sequence of (N_i, D, H, W) arrays, ``y`` the matching 0/1 label
    arrays of shape (N_i,). With ``with_block=True`` scenes pass through
    the attention block before pooling and the block's parameters train
    jointly with the head; otherwise the head alone sees pooled inputs.

    Fitting is deterministic given the inputs: scenes are visited in
    order, the seed only controls initialization. A run whose loss or
    parameters leave the finite range stops early at the last finite
    state and warns instead of raising.
    """

    def __init__(self, with_block=True, embed_channels=None, g_channels=None,
                 hidden=None, epochs=5, learning_rate=0.01, momentum=0.9,
                 weight_decay=0.0001, seed=0):
        self.with_block = with_block
        self.embed_channels = embed_channels
        self.g_channels = g_channels
        self.hidden = hidden
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.seed = seed

    def _as_scenes(self, X, y=None, channels=None):
        raw = [X[i] for i in range(len(X))] if hasattr(X, "__len__") else list(X)
        if not raw:
            raise ValueError("X must contain at least one scene")
        scenes = []
        for i, item in enumerate(raw):
            feats = as_tensor(item, name=f"X[{i}]", dtype=np.float64)
            feats = check_feature_blob(feats, channels=channels, name=f"X[{i}]")
            channels = feats.shape[1]
            if scenes and feats.shape[2:] != scenes[0].shape[2:]:
                raise ValueError(
                    f"X[{i}] has spatial extent {feats.shape[2:]} but X[0] "
                    f"has {scenes[0].shape[2:]}"
                )
            scenes.append(feats)
        if y is None:
            return scenes, None
        if len(y) != len(scenes):
            raise ValueError(f"got {len(scenes)} scenes but {len(y)} label rows")
        labels = []
        for i, row in enumerate(y):
            lab = np.asarray(row, dtype=np.float64).reshape(-1)
            if lab.shape[0] != scenes[i].shape[0]:
                raise ValueError(
                    f"y[{i}] has {lab.shape[0]} labels for {scenes[i].shape[0]} RoIs"
                )
            if not np.isin(lab, (0.0, 1.0)).all():
                raise ValueError(f"y[{i}] must contain only 0 and 1")
            labels.append(lab)
        return scenes, labels

    def fit(self, X, y):
        scenes, labels = self._as_scenes(X, y)
        if labels is None:
            raise ValueError("y is required")
        epochs = int(self.epochs)
        if epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        d = scenes[0].shape[1]
        seed = int(self.seed)
        if self.with_block:
            d_f, d_g = _channel_widths(d, self.embed_channels, self.g_channels)
            params = init_params((d, d_f, d_g), seed=seed, dtype=np.float64)
            width = d + d_g
        else:
            params = None
            width = d
        hidden = None if self.hidden is None else int(self.hidden)
        head = init_head(width, seed=seed + 1, hidden=hidden)

        theta = _theta_of(params, head)
        state: dict = {}
        curve = []
        diverged = False
        empty = np.empty(0)
        for _ in range(epochs):
            epoch_losses = []
            for feats, lab in zip(scenes, labels):
                scene = Scene(feats, lab, latent_classes=empty, nonces=empty)
                params_t, head_t = _model_of(theta, self.with_block)
                try:
                    loss, grads, _ = _loss_and_grads(scene, params_t, head_t)
                except ValueError as exc:
                    if "non-finite" in str(exc):
                        diverged = True
                        break
                    raise
                if not math.isfinite(loss):
                    diverged = True
                    break
                epoch_losses.append(loss)
                next_theta, state = sgd_step(
                    theta, grads, state,
                    lr=float(self.learning_rate),
                    momentum=float(self.momentum),
                    weight_decay=float(self.weight_decay),
                )
                if not all(np.all(np.isfinite(v)) for v in next_theta.values()):
                    diverged = True
                    break
                theta = next_theta
            if diverged:
                warnings.warn(
                    "training diverged; stopping at the last finite parameters",
                    ConvergenceWarning,
                )
                break
            curve.append(float(np.mean(epoch_losses)))

        self.params_, self.head_ = _model_of(theta, self.with_block)
        self.n_features_in_ = d
        self.classes_ = np.unique(np.concatenate(labels))
        self.loss_curve_ = tuple(curve)
        self.diverged_ = diverged
        return self

    def decision_function(self, X):
        """Per-RoI logits, stacked to (M, N) when every scene has the
        same RoI count, otherwise a list of (N_i,) arrays."""
        check_is_fitted(self, "head_")
        scenes, _ = self._as_scenes(X, channels=self.n_features_in_)
        empty = np.empty(0)
        logits = [
            forward_model(Scene(f, empty, empty, empty), self.params_, self.head_)
            for f in scenes
        ]
        if len({z.shape[0] for z in logits}) == 1:
            return np.stack(logits)
        return logits

    def predict(self, X):
        z = self.decision_function(X)
        if isinstance(z, list):
            return [(row > 0).astype(np.float64) for row in z]
        return (z > 0).astype(np.float64)

    def score(self, X, y):
        """Mean per-RoI accuracy; every RoI counts once regardless of
        how RoIs are grouped into scenes."""
        pred = self.predict(X)
        _, labels = self._as_scenes(X, y, channels=self.n_features_in_)
        correct = sum(float(np.sum(p == lab)) for p, lab in zip(pred, labels))
        total = sum(lab.shape[0] for lab in labels)
        return correct / total
