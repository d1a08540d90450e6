"""Thin scikit-learn-style facade over the extraction and matching engine."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .backbone import BackboneConfig, build_model
from .geometry import ransac_homography
from .matcher import mnn_match, refine_matches, semi_dense_extract, sparse_extract
from .training import TrainConfig, make_training_pairs, train
from . import io as xio


def check_images(X):
    """Validate a batch of grayscale images; returns float arrays in [0, 1]."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = [X]
    out = []
    for i, img in enumerate(X):
        arr = np.asarray(img, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"image {i}: expected 2-D grayscale, got shape {arr.shape}")
        if arr.size == 0:
            raise ValueError(f"image {i} is empty")
        if arr.max() > 1.0:
            arr = arr / 255.0
        out.append(np.clip(arr, 0.0, 1.0))
    return out


class XFeatExtractor(BaseEstimator, TransformerMixin):
    """fit() trains (or loads) the network; transform() returns FeatureSets.

    With `weights` set or `train_steps=0`, fit only builds the model, so the
    extractor slots into pipelines that expect a no-op fit.
    """

    def __init__(self, mode="sparse", top_k=None, train_steps=0, n_pairs=50,
                 seed=0, weights=None, config=None):
        self.mode = mode
        self.top_k = top_k
        self.train_steps = train_steps
        self.n_pairs = n_pairs
        self.seed = seed
        self.weights = weights
        self.config = config

    def fit(self, X=None, y=None):
        if self.weights is not None:
            self.model_ = xio.load_weights(self.weights).eval()
            return self
        cfg = self.config or BackboneConfig()
        self.model_ = build_model(cfg, rng_seed=self.seed)
        if self.train_steps > 0:
            images = check_images(X)
            rng = np.random.default_rng(self.seed)
            pairs = make_training_pairs(images, rng, self.n_pairs)
            tc = TrainConfig(steps=self.train_steps, batch_size=2, seed=self.seed)
            train(self.model_, pairs, tc)
        self.model_.eval()
        return self

    def transform(self, X):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit() before transform()")
        images = check_images(X)
        top_k = self.top_k or (4096 if self.mode == "sparse" else 10000)
        if self.mode == "sparse":
            return [sparse_extract(self.model_, img, top_k=top_k) for img in images]
        return [semi_dense_extract(self.model_, img, top_n=top_k) for img in images]


class HomographyMatcher(BaseEstimator):
    """predict() maps (FeatureSet, FeatureSet) pairs to 3x3 homographies."""

    def __init__(self, refine=False, conf_threshold=0.2, ransac_threshold=3.0,
                 seed=0, model=None):
        self.refine = refine
        self.conf_threshold = conf_threshold
        self.ransac_threshold = ransac_threshold
        self.seed = seed
        self.model = model

    def fit(self, X=None, y=None):
        return self

    def predict(self, X):
        rng = np.random.default_rng(self.seed)
        out = []
        for fa, fb in X:
            matches = mnn_match(fa, fb)
            if self.refine:
                if self.model is None:
                    raise ValueError("refinement requires a model")
                matches = refine_matches(matches, fa, fb, self.model,
                                         conf_threshold=self.conf_threshold)
            res = ransac_homography(matches.coords_a, matches.coords_b,
                                    threshold_px=self.ransac_threshold, rng=rng)
            out.append(res.homography if res.success else None)
        return out
