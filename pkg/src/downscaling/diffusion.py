"""Stage two: residual diffusion with the EDM noise parameterization.

The noise level doubles as the time variable, ``sigma(t) = t``, so the
forward process is ``dx = sqrt(2 sigma_dot sigma) dW`` and the probability
flow is driven by the score ``(D(x; sigma) - x) / sigma**2``. ``beta(t) =
sigma_dot / sigma`` sets how fast noise is refreshed when the sampler
churns.

Everything here accepts any denoiser callable ``D(z, sigma, cond)``, so the
closed-form :class:`GaussianOracleDenoiser` exercises the schedule, loss and
sampler with no training at all.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .grid import ChannelSpec, Field
from .network import Denoiser, NetSpec, build_network, edm_coefficients, with_channels
from .optim import TrainConfig, run_training
from .regression import DataError, MeanRegressor, check_pair


@dataclass(frozen=True)
class NoiseSchedule:
    n_steps: int = 18
    sigma_max: float = 800.0
    sigma_min: float = 0.002
    rho: float = 7.0
    s_churn: float = 0.0
    s_noise: float = 1.0

    def __post_init__(self):
        if not self.sigma_max > self.sigma_min > 0:
            raise ValueError("need sigma_max > sigma_min > 0")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.rho <= 0 or self.s_churn < 0 or self.s_noise < 0:
            raise ValueError("rho must be positive; churn and s_noise non-negative")

    @property
    def gamma(self) -> float:
        return min(self.s_churn / self.n_steps, np.sqrt(2.0) - 1.0)

    def to_dict(self) -> dict:
        return asdict(self)


# sigma(t) = t
def sigma_of_t(t):
    return np.asarray(t, dtype=np.float64)


def sigma_dot(t):
    return np.ones_like(np.asarray(t, dtype=np.float64))


def beta(t):
    """Noise refresh rate ``sigma_dot / sigma``."""
    return sigma_dot(t) / sigma_of_t(t)


def sigma_steps(schedule: NoiseSchedule) -> np.ndarray:
    """``sigma_0 .. sigma_N``: rho-spaced from sigma_max to sigma_min, then 0."""
    n = schedule.n_steps
    if n == 1:
        return np.array([schedule.sigma_max, 0.0])
    inv = 1.0 / schedule.rho
    i = np.arange(n)
    s = (schedule.sigma_max ** inv + i / (n - 1) * (schedule.sigma_min ** inv - schedule.sigma_max ** inv)) ** schedule.rho
    s[0], s[-1] = schedule.sigma_max, schedule.sigma_min  # exact endpoints
    return np.append(s, 0.0)


def sample_training_sigma(rng: np.random.Generator, size=None, p_mean: float = 0.0,
                          p_std: float = 1.2) -> np.ndarray:
    return np.exp(p_mean + p_std * rng.standard_normal(size))


def loss_weight(sigma, sigma_data=1.0):
    sigma = np.asarray(sigma, dtype=np.float64)
    return (sigma ** 2 + sigma_data ** 2) / (sigma * sigma_data) ** 2


class GaussianOracleDenoiser:
    """Exact posterior mean for the prior ``N(mu0, sigma0**2 I)``."""

    def __init__(self, mu0=0.0, sigma0=1.0):
        if not np.all(np.asarray(sigma0) > 0):
            raise ValueError("sigma0 must be positive")
        self.mu0 = mu0
        self.sigma0 = sigma0
        self.sigma_data = sigma0

    def _s2(self, sigma, z):
        s = np.asarray(sigma, dtype=np.float64)
        if s.ndim == 1 and z.ndim > 1:
            s = s.reshape((-1,) + (1,) * (z.ndim - 1))
        return s * s

    def __call__(self, z, sigma, cond=None):
        z = np.asarray(z, dtype=np.float64)
        s2, v0 = self._s2(sigma, z), np.asarray(self.sigma0, dtype=np.float64) ** 2
        return (v0 * z + s2 * self.mu0) / (v0 + s2)

    def delta(self, z, sigma, cond=None):
        """``D(z) - z`` without the cancellation of forming D first."""
        z = np.asarray(z, dtype=np.float64)
        s2, v0 = self._s2(sigma, z), np.asarray(self.sigma0, dtype=np.float64) ** 2
        return s2 * (self.mu0 - z) / (v0 + s2)


def score_from_denoiser(denoiser, z, sigma, cond=None) -> np.ndarray:
    """``(D(z; sigma, y) - z) / sigma**2``."""
    z = np.asarray(z, dtype=np.float64)
    s = np.asarray(sigma, dtype=np.float64)
    if np.any(s <= 0):
        raise ValueError("sigma must be positive")
    if s.ndim == 1 and z.ndim > 1:
        s = s.reshape((-1,) + (1,) * (z.ndim - 1))
    if hasattr(denoiser, "delta"):
        d = denoiser.delta(z, sigma, cond)
    else:
        d = np.asarray(denoiser(z, sigma, cond), dtype=np.float64) - z
    return d / (s * s)


def dsm_loss(denoiser, r, cond, sigma, rng: np.random.Generator, weighted: bool = True) -> float:
    """Weighted denoising error ``lambda(sigma) * mean |D(r + n) - r|^2`` for one draw of n."""
    r = np.asarray(r, dtype=np.float64)
    s = np.asarray(sigma, dtype=np.float64)
    if np.any(s <= 0):
        raise ValueError("sigma must be positive")
    sb = s.reshape((-1,) + (1,) * (r.ndim - 1)) if s.ndim == 1 else s
    z = r + sb * rng.standard_normal(r.shape)
    err = (np.asarray(denoiser(z, sigma, cond), dtype=np.float64) - r) ** 2
    if weighted:
        sd = np.asarray(getattr(denoiser, "sigma_data", 1.0), dtype=np.float64)
        if sd.ndim == 1 and r.ndim == 4:
            sd = sd[None, :, None, None]
        err = err * loss_weight(sb, sd)
    return float(err.mean())


def _normal(rngs, shape):
    if isinstance(rngs, np.random.Generator):
        return rngs.standard_normal(shape)
    return np.stack([g.standard_normal(shape[1:]) for g in rngs])


def heun_sample(denoiser, cond, shape: tuple[int, ...], schedule: NoiseSchedule, rng,
                trajectory: bool = False):
    """Second-order sampler of the probability flow with optional churn.

    ``rng`` is a Generator or one Generator per leading-axis row; in the
    latter case every row uses only its own stream, so a member's sample
    does not depend on which other members share the batch.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    sig = sigma_steps(schedule)
    gamma = schedule.gamma
    x = _normal(rng, shape) * sig[0]
    path = [x.copy()] if trajectory else None
    for i in range(schedule.n_steps):
        s, s_next = sig[i], sig[i + 1]
        s_hat = s * (1.0 + gamma)
        if gamma > 0:
            x = x + np.sqrt(s_hat ** 2 - s ** 2) * schedule.s_noise * _normal(rng, shape)
        d = (x - np.asarray(denoiser(x, s_hat, cond), dtype=np.float64)) / s_hat
        x_next = x + (s_next - s_hat) * d
        if s_next > 0:
            d2 = (x_next - np.asarray(denoiser(x_next, s_next, cond), dtype=np.float64)) / s_next
            x_next = x + (s_next - s_hat) * 0.5 * (d + d2)
        x = x_next
        if trajectory:
            path.append(x.copy())
    return (x, path) if trajectory else x


@dataclass
class EnsembleForecast:
    """``K`` members ``(K, C, H, W)`` for one conditioning input."""

    members: np.ndarray
    channels: Sequence[ChannelSpec]
    seeds: list = field(default_factory=list)
    cond: np.ndarray | None = None

    def __post_init__(self):
        m = np.asarray(self.members)
        if m.ndim == 3:
            m = m[:, None]
        if m.ndim != 4 or len(m) < 1:
            raise ValueError(f"members must be (K>=1, C, H, W), got {m.shape}")
        if len(self.channels) != m.shape[1]:
            raise ValueError(f"{len(self.channels)} channel specs for {m.shape[1]} channels")
        if not np.all(np.isfinite(m)):
            raise ValueError("ensemble members contain NaN or Inf")
        self.members = m
        self.channels = tuple(c if isinstance(c, ChannelSpec) else ChannelSpec(str(c))
                              for c in self.channels)

    @property
    def k(self) -> int:
        return len(self.members)

    @property
    def mean(self) -> np.ndarray:
        return self.members.mean(axis=0)

    @property
    def spread(self) -> np.ndarray:
        """Per-pixel standard deviation across members (``ddof=1``; 0 for K=1)."""
        if self.k < 2:
            return np.zeros(self.members.shape[1:])
        return self.members.std(axis=0, ddof=1)

    def cdf(self, values) -> np.ndarray:
        """Empirical ``F(values)``: fraction of members <= value, per pixel."""
        return (self.members <= np.asarray(values)[None]).mean(axis=0)

    def member(self, i: int) -> Field:
        return Field(self.channels, self.members[i])


def member_rngs(seed: int, scene: int, k: int) -> list[np.random.Generator]:
    return [np.random.default_rng(np.random.SeedSequence([int(seed), int(scene), i]))
            for i in range(k)]


class ResidualDiffusion(BaseEstimator):
    """Conditional diffusion model of ``x - mu(y)`` on top of a fitted regressor.

    Residuals live in the regressor's normalized target space and are
    standardized once more per channel, so ``sigma_data = 1``.

    Parameters
    ----------
    regressor : MeanRegressor
        Fitted stage-one model; its training seeds must match ``fit``'s.
    spec : NetSpec, optional
    config : TrainConfig, optional
    seed : int
    schedule : NoiseSchedule, optional
        Default sampling schedule.
    """

    def __init__(self, regressor=None, spec=None, config=None, seed=0, schedule=None):
        self.regressor = regressor
        self.spec = spec
        self.config = config
        self.seed = seed
        self.schedule = schedule

    def _check_split(self, seeds):
        reg_seeds = getattr(self.regressor, "train_seeds_", None)
        if seeds is None or reg_seeds is None:
            return
        if sorted(int(s) for s in seeds) != sorted(reg_seeds):
            raise DataError("diffusion training split differs from the regressor's training split")

    def fit(self, X, y, seeds=None):
        X, y = check_pair(X, y)
        if self.regressor is None:
            raise DataError("a fitted regressor is required")
        check_is_fitted(self.regressor, "net_")
        self._check_split(seeds)
        reg = self.regressor
        config = self.config or TrainConfig()
        spec = with_channels(self.spec or NetSpec(), c_out=y.shape[1], c_cond=X.shape[1])
        cond = reg.condition(X)
        r = reg.y_norm_.transform(y) - reg.predict_normalized(X)
        self.res_mean_ = r.mean(axis=(0, 2, 3))
        self.res_scale_ = np.maximum(r.std(axis=(0, 2, 3)), 1e-6)
        rz = ((r - self.res_mean_[:, None, None]) / self.res_scale_[:, None, None]).astype(np.float32)
        net = build_network(spec, self.seed, mode="diffusion", sigma_data=1.0)
        n, b = len(X), config.batch_size

        def loss_fn(leaves, rng):
            idx = rng.integers(0, n, size=b)
            sigma = sample_training_sigma(rng, b, config.p_mean, config.p_std)
            target = rz[idx]
            z = target + (sigma[:, None, None, None] * rng.standard_normal(target.shape)).astype(np.float32)
            pred = net.forward_tensor(z, sigma, cond[idx], leaves=leaves, dropout=config.dropout, rng=rng)
            w = loss_weight(sigma, 1.0).astype(np.float32)[:, None, None, None]
            return ad.mse_loss(pred, target, weight=w)

        ema, losses = run_training(net.params, loss_fn, config, self.seed)
        self.net_ = Denoiser(spec, OrderedDict(ema), "diffusion", sigma_data=1.0)
        self.loss_curve_ = losses
        self.train_seeds_ = None if seeds is None else [int(s) for s in seeds]
        return self

    def _schedule(self, schedule):
        return schedule or self.schedule or NoiseSchedule(sigma_max=80.0, s_churn=2.5)

    def sample_residuals(self, cond: np.ndarray, k: int, seed: int, scene: int = 0,
                         schedule: NoiseSchedule | None = None) -> np.ndarray:
        """``k`` standardized residual draws for one conditioning ``(C, H, W)``."""
        check_is_fitted(self, "net_")
        cond = np.asarray(cond, dtype=np.float32)
        batch = np.broadcast_to(cond, (k,) + cond.shape)
        shape = (k, self.net_.spec.c_out) + cond.shape[-2:]
        return heun_sample(self.net_, batch, shape, self._schedule(schedule),
                           member_rngs(seed, scene, k))

    def _to_physical(self, mu_n: np.ndarray, rz: np.ndarray) -> np.ndarray:
        r = rz * self.res_scale_[:, None, None] + self.res_mean_[:, None, None]
        return self.regressor.y_norm_.inverse_transform(mu_n[None] + r)

    def sample(self, X, k: int = 32, seed: int = 0, schedule: NoiseSchedule | None = None,
               scene_ids: Sequence[int] | None = None) -> np.ndarray:
        """Physical ensemble ``(n, k, C, H, W)``; member streams derive from (seed, scene, k)."""
        check_is_fitted(self, "net_")
        cond = self.regressor.condition(X)
        mu = self.regressor.predict_normalized(X)
        ids = range(len(cond)) if scene_ids is None else scene_ids
        out = []
        for i, sid in enumerate(ids):
            rz = self.sample_residuals(cond[i], k, seed, sid, schedule)
            out.append(self._to_physical(mu[i], rz))
        return np.stack(out)

    def predict(self, X, k: int = 32, seed: int = 0) -> np.ndarray:
        """Ensemble mean."""
        return self.sample(X, k, seed).mean(axis=1)


def train_diffusion(dataset, reg_model: MeanRegressor, config: TrainConfig | None = None,
                    seed: int = 0, spec: NetSpec | None = None) -> ResidualDiffusion:
    if len(dataset) == 0:
        raise DataError("empty dataset")
    model = ResidualDiffusion(reg_model, spec=spec, config=config, seed=seed)
    return model.fit(dataset.coarse, dataset.fine, seeds=dataset.seeds)


def resdiff_sample(reg_model: MeanRegressor, diff_model: ResidualDiffusion, y, k: int = 192,
                   seed: int = 0, schedule: NoiseSchedule | None = None,
                   scene: int = 0) -> EnsembleForecast:
    """Members ``mu(y) + r_k`` for one coarse input (Field or ``(C, h, w)`` array)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if diff_model.regressor is not reg_model:
        raise DataError("diffusion model was trained on a different regressor")
    data = y.data if isinstance(y, Field) else np.asarray(y)
    members = diff_model.sample(data[None], k, seed, schedule, scene_ids=[scene])[0]
    from .synth import FINE_CHANNELS

    known = {c.name: c for c in FINE_CHANNELS}
    chans = tuple(known.get(n, ChannelSpec(n)) for n in reg_model.target_names_)
    return EnsembleForecast(members, chans, seeds=[[int(seed), int(scene), i] for i in range(k)],
                            cond=data)
