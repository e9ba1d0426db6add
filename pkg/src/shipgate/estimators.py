"""scikit-learn compatible wrappers around the gate, the image resizer and RLE box extraction."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .dataset import IMAGE_SIZE, downsample, rle_to_bbox
from .energy import EventCostModel
from .event_engine import average_stats, trace
from .exceptions import InvalidInputError, ShapeMismatchError
from .gate import sweep_thresholds
from .netdef import build_akidanet05, load_model, synth_weights
from .qtensor import QuantTensor


def check_image_batch(X, channels: int = 3) -> np.ndarray:
    """Validate a batch of ``(n, C, H, W)`` uint8-range images and return it as uint8."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1] != channels:
        raise ShapeMismatchError(f"expected images of shape (n, {channels}, H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise InvalidInputError("empty image batch")
    if X.size and (X.min() < 0 or X.max() > 255):
        raise InvalidInputError("pixel values must lie in [0, 255]")
    if not np.issubdtype(X.dtype, np.integer) and not np.all(X == np.round(X)):
        raise InvalidInputError("pixel values must be integers")
    return X.astype(np.uint8)


def fit_to_input(X: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Box-downsample images to ``size`` when they are an integer multiple of it."""
    h, w = X.shape[2:]
    if (h, w) == tuple(size):
        return X
    if h % size[0] or w % size[1] or h // size[0] != w // size[1]:
        raise ShapeMismatchError(f"cannot resize {h}x{w} images to {size[0]}x{size[1]}")
    return np.stack([downsample(x, h // size[0]) for x in X])


class GateClassifier(ClassifierMixin, BaseEstimator):
    """Binary ship/no-ship gate running the quantized network.

    Parameters
    ----------
    model_path : str or None
        ``.aknw`` file to load. When None, weights are synthesized from
        ``seed`` and ``sparsity_bias`` on an AkidaNet-0.5 layout.
    input_size : int
        Side of the square network input used for synthesized weights.
    threshold : float
        Images with ``score >= threshold`` are flagged.
    target_recall : float or None
        If set and ``fit`` receives labels, ``threshold_`` becomes the largest
        threshold whose recall on the fit data reaches this value.
    mode : {"events", "dense"}
        Inference path; both give identical scores.
    """

    def __init__(self, model_path=None, input_size=256, seed=0, sparsity_bias=0.25,
                 threshold=0.5, target_recall=None, mode="events", cost_model=None):
        self.model_path = model_path
        self.input_size = input_size
        self.seed = seed
        self.sparsity_bias = sparsity_bias
        self.threshold = threshold
        self.target_recall = target_recall
        self.mode = mode
        self.cost_model = cost_model

    def fit(self, X, y=None):
        X = check_image_batch(X)
        if self.model_path is not None:
            self.graph_ = load_model(self.model_path)
        else:
            self.graph_ = synth_weights(build_akidanet05(self.input_size), self.seed, self.sparsity_bias)
        fit_to_input(X[:1], self.graph_.input_shape[1:])
        self.classes_ = np.array([0, 1])
        self.threshold_ = float(self.threshold)
        if y is not None and self.target_recall is not None:
            scores = self._scores(X)
            curve = sweep_thresholds(scores, np.asarray(y))
            reaching = [t for t, r, _ in curve if r >= self.target_recall]
            self.threshold_ = max(reaching)
        return self

    def _traces(self, X):
        X = fit_to_input(check_image_batch(X), self.graph_.input_shape[1:])
        g = self.graph_
        return [
            trace(g, QuantTensor(x, g.input_bits, False, g.input_scale), self.mode, self.cost_model)
            for x in X
        ]

    def _scores(self, X) -> np.ndarray:
        return np.array([t.score for t in self._traces(X)])

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "graph_")
        return np.array([t.logit for t in self._traces(X)])

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "graph_")
        p = self._scores(X)
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= self.threshold_).astype(int)

    def layer_stats(self, X):
        """Per-layer statistics averaged over the batch."""
        check_is_fitted(self, "graph_")
        return average_stats([t.stats for t in self._traces(X)])


class ImageDownsampler(TransformerMixin, BaseEstimator):
    """Integer box-filter resize by a whole factor (768 -> 256 is ``factor=3``)."""

    def __init__(self, factor=3):
        self.factor = factor

    def fit(self, X, y=None):
        check_image_batch(X)
        return self

    def transform(self, X):
        X = check_image_batch(X)
        return np.stack([downsample(x, self.factor) for x in X])


class RLEBoxExtractor(TransformerMixin, BaseEstimator):
    """Map run-length strings to ``(x_min, y_min, x_max, y_max)`` rows; empty masks give NaN."""

    def __init__(self, width=IMAGE_SIZE, height=IMAGE_SIZE):
        self.width = width
        self.height = height

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        out = np.full((len(X), 4), np.nan)
        for i, rle in enumerate(X):
            if rle is None or (isinstance(rle, float) and np.isnan(rle)) or not str(rle).strip():
                continue
            out[i] = rle_to_bbox(str(rle), self.width, self.height).as_tuple()
        return out
