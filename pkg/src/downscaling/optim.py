"""Adam, exponential moving averages and the training configuration."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    batch_size: int = 16
    n_samples: int = 200_000
    ema_halflife: float = 500_000.0  # in training samples
    ema_rampup: float | None = 0.05
    dropout: float = 0.0
    p_mean: float = 0.0
    p_std: float = 1.2
    lr_warmup: int = 0  # samples

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        for name in ("lr", "eps", "ema_halflife", "dropout", "p_std", "lr_warmup"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.batch_size < 1 or self.n_samples < 1:
            raise ValueError("batch_size and n_samples must be positive")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def n_steps(self) -> int:
        return max(1, -(-self.n_samples // self.batch_size))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, config: TrainConfig,
              lr: float | None = None) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.step += 1
    t = state.step
    lr = config.lr if lr is None else lr
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + config.eps)).astype(p.dtype)


def ema_update(ema: dict, params: dict, decay: float) -> None:
    if not 0.0 <= decay <= 1.0:
        raise ValueError("EMA decay must lie in [0, 1]")
    for k, p in params.items():
        e = ema[k]
        e *= decay
        e += (1.0 - decay) * p


def ema_decay(batch_size: int, halflife: float, seen: int | None = None,
              rampup: float | None = None) -> float:
    """Per-step decay for a half-life measured in training samples.

    With ``rampup`` set, the half-life is capped at ``rampup * seen`` so the
    average tracks the weights early in training.
    """
    if rampup is not None and seen is not None:
        halflife = min(halflife, rampup * seen)
    if halflife <= 0:
        return 0.0
    return 0.5 ** (batch_size / halflife)


def run_training(params: dict, loss_fn, config: TrainConfig, seed: int,
                 callback=None) -> tuple[dict, np.ndarray]:
    """Generic Adam loop with an EMA copy of the weights.

    ``loss_fn(leaves, rng)`` builds the loss graph for one mini-batch from
    the leaf tensors. ``params`` is updated in place; the EMA weights and
    the per-step loss curve are returned.
    """
    from . import autodiff as ad

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 23]))
    state = AdamState.zeros_like(params)
    ema = {k: p.copy() for k, p in params.items()}
    losses = np.empty(config.n_steps)
    seen = 0
    for step in range(config.n_steps):
        leaves = {k: ad.Tensor(p, requires_grad=True) for k, p in params.items()}
        loss = loss_fn(leaves, rng)
        ad.backward(loss)
        lr = config.lr
        if config.lr_warmup > 0:
            lr *= min(1.0, (seen + config.batch_size) / config.lr_warmup)
        adam_step(params, {k: t.grad for k, t in leaves.items()}, state, config, lr=lr)
        seen += config.batch_size
        ema_update(ema, params, ema_decay(config.batch_size, config.ema_halflife, seen,
                                          config.ema_rampup))
        losses[step] = float(loss.data)
        if callback is not None:
            callback(step, losses[step])
    return ema, losses
