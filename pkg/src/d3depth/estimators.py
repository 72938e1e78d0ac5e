"""scikit-learn style wrappers around the densification pipeline.

Inputs are stacked arrays: ``X`` is ``(n, H, W, 4)`` holding RGB in [0, 1]
followed by a sparse depth channel (meters, 0 = no sample) and ``y`` is the
dense ground truth ``(n, H, W)`` in meters (0 = invalid).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .core import DepthMap, PatternMask, RgbImage
from .d3net import NetConfig, baseline_nn_fill, build_model, densify
from .exceptions import ShapeError, ValidationError
from .metrics import pooled_metrics
from .patterns import PatternKind, ScheduleKind, SparsitySchedule
from .sparsify import build_sparse_input


def check_rgbd(X) -> np.ndarray:
    """Validate an (n, H, W, 4) RGB + sparse-depth stack; returns float64."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4 or X.shape[3] != 4 or min(X.shape[:3]) < 1:
        raise ShapeError(f"expected X of shape (n, H, W, 4), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValidationError("X contains non-finite values")
    rgb = X[..., :3]
    if rgb.min() < 0 or rgb.max() > 1:
        raise ValidationError("RGB channels of X must lie in [0, 1]")
    if X[..., 3].min() < 0:
        raise ValidationError("sparse depth channel of X must be >= 0")
    empty = ~(X[..., 3] > 0).reshape(len(X), -1).any(axis=1)
    if empty.any():
        raise ValidationError(f"sample {int(np.argmax(empty))} of X has no sparse depth point")
    return X


def check_depth_stack(y, n=None, shape=None) -> np.ndarray:
    """Validate an (n, H, W) stack of nonnegative finite depths."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 3:
        raise ShapeError(f"expected y of shape (n, H, W), got {y.shape}")
    if n is not None and (len(y), *y.shape[1:]) != (n, *shape):
        raise ShapeError(f"y shape {y.shape} does not match X shape ({n}, {shape[0]}, {shape[1]}, 4)")
    if not np.all(np.isfinite(y)) or y.min() < 0:
        raise ValidationError("y must be finite and >= 0")
    return y


def _sparse(sample_channel, sqrt_distance=True):
    samples = DepthMap(sample_channel)
    return build_sparse_input(samples, PatternMask(samples.valid), sqrt_distance)


class SparseInputEncoder(TransformerMixin, BaseEstimator):
    """Turn RGB + sparse depth into the (S1, S2) network inputs.

    ``transform`` returns ``(n, H, W, 2)``: nearest-sample depth and the
    square root (or, with ``sqrt_distance=False``, the plain value) of the
    distance to the nearest sample.
    """

    def __init__(self, sqrt_distance=True):
        self.sqrt_distance = sqrt_distance

    def fit(self, X, y=None):
        X = check_rgbd(X)
        self.n_features_in_ = X.shape[3]
        self.image_shape_ = X.shape[1:3]
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = check_rgbd(X)
        return np.stack([_sparse(x[..., 3], self.sqrt_distance).stacked() for x in X])


class NNFillRegressor(BaseEstimator):
    """The nearest-neighbour fill baseline."""

    def fit(self, X, y=None):
        check_rgbd(X)
        self.fitted_ = True
        return self

    def predict(self, X):
        check_is_fitted(self)
        X = check_rgbd(X)
        return np.stack([baseline_nn_fill(_sparse(x[..., 3])).values for x in X])

    def score(self, X, y):
        """Negative RMSE in meters over valid ground truth (higher is better)."""
        y = check_depth_stack(y)
        return -pooled_metrics(zip(self.predict(X), y)).rmse


class D3Regressor(BaseEstimator):
    """Train and apply the densification network.

    ``fit`` draws fresh grid samples from ``y`` at every step, at the share
    of pixels given by ``sparsity`` (default: the mean share of samples in
    ``X``).
    """

    def __init__(self, L=2, k=6, scales=3, use_s2=True, inject_sparse_everywhere=True, steps=200,
                 batch_size=8, lr=1e-3, sparsity=None, pattern="grid", seed=0):
        self.L = L
        self.k = k
        self.scales = scales
        self.use_s2 = use_s2
        self.inject_sparse_everywhere = inject_sparse_everywhere
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.sparsity = sparsity
        self.pattern = pattern
        self.seed = seed

    def fit(self, X, y):
        from .harness.training import TrainConfig, train

        X = check_rgbd(X)
        y = check_depth_stack(y, len(X), X.shape[1:3])
        h, w = X.shape[1:3]
        fraction = self.sparsity if self.sparsity is not None else float((X[..., 3] > 0).mean())
        count = max(1, int(round(fraction * h * w)))
        config = NetConfig(self.L, self.k, self.scales, self.inject_sparse_everywhere, self.use_s2)
        cfg = TrainConfig(
            batch_size=self.batch_size, lr=self.lr, total_steps=self.steps,
            schedule=SparsitySchedule(ScheduleKind.STATIC, count, self.steps),
            pattern=PatternKind(self.pattern), seed=self.seed,
        )
        data = [(RgbImage(x[..., :3]), DepthMap(d)) for x, d in zip(X, y)]
        self.model_ = build_model(config, seed=self.seed)
        self.train_log_ = train(self.model_, data, cfg)
        self.n_features_in_ = 4
        return self

    def predict(self, X):
        check_is_fitted(self)
        X = check_rgbd(X)
        return np.stack([
            densify(self.model_, RgbImage(x[..., :3]), _sparse(x[..., 3])).values for x in X
        ])

    def score(self, X, y):
        """Negative RMSE in meters over valid ground truth (higher is better)."""
        y = check_depth_stack(y)
        return -pooled_metrics(zip(self.predict(X), y)).rmse
