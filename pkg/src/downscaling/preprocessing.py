"""Per-channel normalization of gridded stacks."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .grid import DimensionError, check_grid_array


class ChannelNormalizer(TransformerMixin, BaseEstimator):
    """Z-score each channel of ``(n, C, H, W)`` stacks.

    Channels listed in ``sqrt_channels`` are square-rooted first. Their
    inverse clips at zero before squaring, so a de-normalized value is never
    negative.

    Parameters
    ----------
    sqrt_channels : tuple of int
        Channel indices to square-root before standardizing.
    min_std : float
        Floor on the fitted standard deviation.
    """

    def __init__(self, sqrt_channels=(), min_std=1e-6):
        self.sqrt_channels = sqrt_channels
        self.min_std = min_std

    def _forward_raw(self, X):
        X = np.array(X, dtype=np.float64, copy=True)
        for c in self.sqrt_channels:
            if np.any(X[:, c] < 0):
                raise ValueError(f"channel {c} is square-root transformed but has negative values")
            X[:, c] = np.sqrt(X[:, c])
        return X

    def fit(self, X, y=None):
        X = check_grid_array(X, ndim=4)
        for c in self.sqrt_channels:
            if not 0 <= c < X.shape[1]:
                raise DimensionError(f"sqrt channel {c} out of range for {X.shape[1]} channels")
        Xt = self._forward_raw(X)
        self.mean_ = Xt.mean(axis=(0, 2, 3))
        self.scale_ = np.maximum(Xt.std(axis=(0, 2, 3)), self.min_std)
        self.n_channels_ = X.shape[1]
        return self

    def _check(self, X):
        check_is_fitted(self, "mean_")
        X = check_grid_array(X, ndim=4)
        if X.shape[1] != self.n_channels_:
            raise DimensionError(f"expected {self.n_channels_} channels, got {X.shape[1]}")
        return X

    def transform(self, X):
        X = self._check(X)
        return (self._forward_raw(X) - self.mean_[:, None, None]) / self.scale_[:, None, None]

    def inverse_transform(self, X):
        X = self._check(X)
        out = X * self.scale_[:, None, None] + self.mean_[:, None, None]
        for c in self.sqrt_channels:
            out[:, c] = np.maximum(out[:, c], 0.0) ** 2
        return out

    def to_dict(self) -> dict:
        check_is_fitted(self, "mean_")
        return {"sqrt_channels": [int(c) for c in self.sqrt_channels], "min_std": self.min_std,
                "mean": self.mean_.tolist(), "scale": self.scale_.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelNormalizer":
        obj = cls(tuple(d["sqrt_channels"]), d["min_std"])
        obj.mean_ = np.asarray(d["mean"], dtype=np.float64)
        obj.scale_ = np.asarray(d["scale"], dtype=np.float64)
        obj.n_channels_ = obj.mean_.size
        return obj
