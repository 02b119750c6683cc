"""scikit-learn style wrappers around the network and the saliency pipeline."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import StereoPair, ValidationError, validate_pair
from .metrics import asa
from .model import (DEFAULT_ETA, StereoSuperpixelNet, beta_scale, lab_tensor, load_checkpoint,
                    network_input, save_checkpoint, segment_pair)
from .cluster import ClusterConfig
from .sod import mae, saliency_from_superpixels
from .trainer import TrainConfig, train_model


def check_pairs(X, y=None, require_labels=False):
    """Coerce ``X`` to a list of validated :class:`StereoPair`.

    ``X`` is a sequence of StereoPair objects or an array of shape
    ``(n, 2, H, W, 3)`` holding Lab left/right views. ``y`` (label maps)
    overrides any labels carried by the pairs.
    """
    if isinstance(X, StereoPair):
        X = [X]
    if isinstance(X, np.ndarray):
        if X.ndim != 5 or X.shape[1] != 2 or X.shape[-1] != 3:
            raise ValidationError(f"expected an (n, 2, H, W, 3) array, got {X.shape}")
        pairs = [StereoPair(x[0], x[1], None, str(i)) for i, x in enumerate(X)]
    else:
        pairs = list(X)
        if not all(isinstance(p, StereoPair) for p in pairs):
            raise ValidationError("X must hold StereoPair objects or be an (n, 2, H, W, 3) array")
    if not pairs:
        raise ValidationError("no samples")
    if y is not None:
        if len(y) != len(pairs):
            raise ValidationError(f"{len(pairs)} pairs but {len(y)} label maps")
        pairs = [StereoPair(p.left, p.right, np.asarray(lab), p.id) for p, lab in zip(pairs, y)]
    for p in pairs:
        validate_pair(p)
        if require_labels and p.label is None:
            raise ValidationError(f"sample {p.id}: label map required")
    return pairs


class StereoSuperpixelSegmenter(BaseEstimator):
    """Learned stereo superpixels.

    ``fit`` trains the network on labelled pairs; ``predict`` returns the
    left-view superpixel map of each pair; ``transform`` returns the per-pixel
    embeddings that the clustering consumes.
    """

    def __init__(self, n_spixels=100, channels=64, ablation="B0", n_iters=10, train_iters=5,
                 eta=DEFAULT_ETA, batch_size=8, max_iter=20000, crop=200, lambda_stereo=1.0,
                 connectivity=False, random_state=0):
        self.n_spixels = n_spixels
        self.channels = channels
        self.ablation = ablation
        self.n_iters = n_iters
        self.train_iters = train_iters
        self.eta = eta
        self.batch_size = batch_size
        self.max_iter = max_iter
        self.crop = crop
        self.lambda_stereo = lambda_stereo
        self.connectivity = connectivity
        self.random_state = random_state

    def _train_config(self):
        crop = (self.crop, self.crop) if np.isscalar(self.crop) else tuple(self.crop)
        return TrainConfig(batch_size=self.batch_size, total_iters=self.max_iter, crop=crop,
                           eta=self.eta, n_spixels=self.n_spixels, n_iters=self.train_iters,
                           channels=self.channels, ablation=self.ablation,
                           lambda_stereo=self.lambda_stereo, seed=self.random_state)

    def fit(self, X, y=None, out_dir=None):
        pairs = check_pairs(X, y, require_labels=True)
        self.model_, self.history_ = train_model(pairs, self._train_config(), out_dir=out_dir)
        self.n_features_out_ = self.model_.channels
        return self

    @classmethod
    def from_checkpoint(cls, path, **params):
        model, _ = load_checkpoint(path)
        est = cls(channels=model.channels, **params)
        est.model_ = model
        est.n_features_out_ = model.channels
        return est

    def save(self, path):
        check_is_fitted(self, "model_")
        save_checkpoint(path, self.model_)

    def predict(self, X, views=("left",)):
        check_is_fitted(self, "model_")
        pairs = check_pairs(X)
        out = []
        for p in pairs:
            seg = segment_pair(self.model_, p.left, p.right, self.n_spixels,
                               n_iters=self.n_iters, eta=self.eta,
                               connectivity=self.connectivity, views=views)
            out.append(seg["left"] if views == ("left",) else seg)
        return _maybe_stack(out)

    @torch.no_grad()
    def transform(self, X):
        """Per-pixel embeddings of the left views, shape (n, H, W, C)."""
        check_is_fitted(self, "model_")
        self.model_.eval()
        feats = []
        for p in check_pairs(X):
            h, w = p.left.shape[:2]
            grid = ClusterConfig.from_count(self.n_spixels, h, w).grid
            beta = beta_scale(grid, h, w, self.eta)
            xy = self.model_.ablation.xy_input
            right = network_input(lab_tensor(p.right), beta, xy)
            out = self.model_(network_input(lab_tensor(p.left), beta, xy), right, views=("left",))
            feats.append(out.left[0].permute(1, 2, 0).numpy())
        return _maybe_stack(feats)

    def score(self, X, y=None):
        """Mean achievable segmentation accuracy."""
        pairs = check_pairs(X, y, require_labels=True)
        preds = self.predict(pairs)
        return float(np.mean([asa(s, p.label) for s, p in zip(preds, pairs)]))


class SaliencyDetector(BaseEstimator):
    """Boundary-connectivity saliency over superpixels from ``segmenter``.

    ``segmenter=None`` uses a single superpixel per image, the degenerate
    baseline.
    """

    def __init__(self, segmenter=None, sigma_clr=10.0, sigma_b=1.0):
        self.segmenter = segmenter
        self.sigma_clr = sigma_clr
        self.sigma_b = sigma_b

    def fit(self, X, y=None):
        if self.segmenter is not None and not hasattr(self.segmenter, "model_"):
            self.segmenter.fit(X, y)
        self.fitted_ = True
        return self

    def _superpixels(self, pairs):
        if self.segmenter is None:
            return [np.zeros(p.left.shape[:2], dtype=np.int64) for p in pairs]
        return list(self.segmenter.predict(pairs))

    def predict(self, X):
        pairs = check_pairs(X)
        maps = [saliency_from_superpixels(s, p.left, sigma_clr=self.sigma_clr,
                                          sigma_b=self.sigma_b).s
                for s, p in zip(self._superpixels(pairs), pairs)]
        return _maybe_stack(maps)

    def score(self, X, y):
        """Negative mean absolute error, so larger is better."""
        preds = self.predict(X)
        return -float(np.mean([mae(p, np.asarray(g, dtype=np.float64)) for p, g in zip(preds, y)]))


def _maybe_stack(arrays):
    shapes = {a.shape for a in arrays if isinstance(a, np.ndarray)}
    if len(shapes) == 1 and len(arrays) and all(isinstance(a, np.ndarray) for a in arrays):
        return np.stack(arrays)
    return arrays
