"""Stage one: the conditional-mean regressor.

``MeanRegressor`` maps a coarse stack ``(n, C_in, h, w)`` to the fine stack
``(n, C_out, H, W)`` minimizing plain MSE in normalized space. Coarse inputs
are z-scored and bilinearly upsampled to the fine grid before entering the
network, and the square-root transform on Z is undone on the way out.
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .grid import ChannelSpec, DimensionError, Field, bilinear_array, check_grid_array
from .network import Denoiser, NetSpec, build_network, with_channels
from .optim import TrainConfig, run_training
from .preprocessing import ChannelNormalizer
from .synth import COARSE_CHANNELS, FINE_CHANNELS


class DataError(ValueError):
    pass


def upsample_condition(Xn: np.ndarray, size: tuple[int, int], dtype=np.float32) -> np.ndarray:
    """Normalized coarse stack to the fine grid (identity when sizes already match)."""
    if Xn.shape[-2:] == tuple(size):
        return np.ascontiguousarray(Xn, dtype=dtype)
    return bilinear_array(Xn, size).astype(dtype)


def check_pair(X, y) -> tuple[np.ndarray, np.ndarray]:
    X = check_grid_array(X, ndim=4, name="X")
    y = check_grid_array(y, ndim=4, name="y")
    if len(X) == 0:
        raise DataError("empty training set")
    if len(X) != len(y):
        raise DataError(f"{len(X)} inputs but {len(y)} targets")
    return X, y


def _batched(fn, X: np.ndarray, batch: int) -> np.ndarray:
    return np.concatenate([fn(X[i:i + batch]) for i in range(0, len(X), batch)])


class MeanRegressor(RegressorMixin, BaseEstimator):
    """UNet estimate of ``E[x | y]``.

    Parameters
    ----------
    spec : NetSpec, optional
        Architecture; channel counts are overwritten from the data at fit.
    config : TrainConfig, optional
        Optimizer and sample budget.
    seed : int
        Seeds initialization and mini-batch sampling.
    sqrt_channels : tuple of int
        Target channels square-rooted before normalization (Z by default).
    cond_names, target_names : tuple of str, optional
        Channel names checked by :func:`predict_mean`.
    """

    def __init__(self, spec=None, config=None, seed=0, sqrt_channels=(3,), cond_names=None,
                 target_names=None):
        self.spec = spec
        self.config = config
        self.seed = seed
        self.sqrt_channels = sqrt_channels
        self.cond_names = cond_names
        self.target_names = target_names

    def fit(self, X, y, seeds=None):
        X, y = check_pair(X, y)
        config = self.config or TrainConfig()
        spec = with_channels(self.spec or NetSpec(), c_out=y.shape[1], c_cond=X.shape[1])
        spec.check_size(*y.shape[-2:])
        self.x_norm_ = ChannelNormalizer().fit(X)
        self.y_norm_ = ChannelNormalizer(tuple(self.sqrt_channels)).fit(y)
        self.fine_shape_ = tuple(y.shape[-2:])
        self.train_seeds_ = None if seeds is None else [int(s) for s in seeds]
        self.cond_names_ = tuple(self.cond_names or [c.name for c in COARSE_CHANNELS][:X.shape[1]])
        self.target_names_ = tuple(self.target_names or [c.name for c in FINE_CHANNELS][:y.shape[1]])

        cond = upsample_condition(self.x_norm_.transform(X), self.fine_shape_)
        target = self.y_norm_.transform(y).astype(np.float32)
        net = build_network(spec, self.seed, mode="regression")
        n, b = len(X), config.batch_size

        def loss_fn(leaves, rng):
            idx = rng.integers(0, n, size=b)
            pred = net.forward_tensor(None, None, cond[idx], leaves=leaves,
                                      dropout=config.dropout, rng=rng)
            return ad.mse_loss(pred, target[idx])

        ema, losses = run_training(net.params, loss_fn, config, self.seed)
        self.net_ = Denoiser(spec, OrderedDict(ema), "regression")
        self.loss_curve_ = losses
        self.n_samples_seen_ = config.n_steps * b
        return self

    def condition(self, X) -> np.ndarray:
        """Normalized, upsampled network conditioning for coarse stack ``X``."""
        check_is_fitted(self, "net_")
        X = check_grid_array(X, ndim=4, name="X")
        if X.shape[1] != self.net_.spec.c_cond:
            raise DimensionError(f"expected {self.net_.spec.c_cond} coarse channels, got {X.shape[1]}")
        return upsample_condition(self.x_norm_.transform(X), self.fine_shape_)

    def predict_normalized(self, X, batch: int = 32) -> np.ndarray:
        """Mean estimate in the normalized target space, float64."""
        cond = self.condition(X)
        return _batched(lambda c: self.net_.predict(c).astype(np.float64), cond, batch)

    def predict(self, X, batch: int = 32) -> np.ndarray:
        mu = self.predict_normalized(X, batch)
        return self.y_norm_.inverse_transform(mu)

    def score(self, X, y, sample_weight=None):
        """Negative mean squared error in physical units (higher is better)."""
        X, y = check_pair(X, y)
        return -float(np.mean((self.predict(X) - y) ** 2))


def train_regression(dataset, config: TrainConfig | None = None, seed: int = 0,
                     spec: NetSpec | None = None) -> MeanRegressor:
    """Fit a :class:`MeanRegressor` on a :class:`~downscaling.synth.SceneDataset`."""
    if len(dataset) == 0:
        raise DataError("empty dataset")
    model = MeanRegressor(spec=spec, config=config, seed=seed,
                          cond_names=tuple(c.name for c in dataset.coarse_channels),
                          target_names=tuple(c.name for c in dataset.fine_channels))
    return model.fit(dataset.coarse, dataset.fine, seeds=dataset.seeds)


def predict_mean(model: MeanRegressor, y: Field) -> Field:
    """Conditional mean for one coarse Field, as a fine Field with all target channels."""
    check_is_fitted(model, "net_")
    if tuple(y.names) != model.cond_names_:
        raise ad.ContractError(f"conditioning channels {y.names} do not match {list(model.cond_names_)}")
    mu = model.predict(y.data[None])[0]
    known = {c.name: c for c in FINE_CHANNELS}
    chans = tuple(known.get(n, ChannelSpec(n)) for n in model.target_names_)
    return Field(chans, mu, spacing=y.spacing * y.shape[1] / model.fine_shape_[0])
