import numpy as np
import pytest

from downscaling import autodiff as ad
from downscaling.optim import AdamState, TrainConfig, adam_step, ema_decay, ema_update, run_training


def _adam(grads, lr=2e-4):
    p = {"w": np.zeros(1)}
    st = AdamState.zeros_like(p)
    cfg = TrainConfig(lr=lr)
    out = []
    for g in grads:
        before = p["w"].copy()
        adam_step(p, {"w": np.array([g])}, st, cfg)
        out.append(float(p["w"][0] - before[0]))
    return out


def test_adam_first_step_is_lr_times_sign():
    assert _adam([1.0])[0] == pytest.approx(-2e-4 / (1 + 1e-8), rel=1e-12)
    assert _adam([-3.0])[0] == pytest.approx(2e-4 * 3 / (3 + 1e-8), rel=1e-12)


def test_adam_second_step_hand_computed():
    # m2 = 0.9*0.1 - 0.1 = -0.01, m_hat = -0.01/0.19; v_hat = 0.0199/0.0199 = 1
    assert _adam([1.0, -1.0])[1] == pytest.approx(2e-4 / 19 / (1 + 1e-8), rel=1e-9)


def test_adam_missing_grad_treated_as_zero():
    p = {"a": np.ones(2), "b": np.ones(2)}
    st = AdamState.zeros_like(p)
    adam_step(p, {"a": np.ones(2)}, st, TrainConfig())
    assert np.all(p["b"] == 1) and np.all(p["a"] < 1)


def test_ema_decay_halflife():
    assert ema_decay(16, 16.0) == 0.5
    assert ema_decay(16, 500_000, seen=100, rampup=0.05) == pytest.approx(0.5 ** (16 / 5))
    assert ema_decay(16, 500_000, seen=10 ** 9, rampup=0.05) == pytest.approx(0.5 ** (16 / 500_000))
    assert ema_decay(16, 0.0) == 0.0


def test_ema_update():
    ema = {"w": np.array([0.0])}
    ema_update(ema, {"w": np.array([1.0])}, 0.75)
    assert ema["w"][0] == 0.25
    with pytest.raises(ValueError):
        ema_update(ema, ema, 1.5)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(beta1=1.0)
    with pytest.raises(ValueError):
        TrainConfig(dropout=1.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    assert TrainConfig(batch_size=16, n_samples=33).n_steps == 3


def _quadratic(target):
    def loss_fn(leaves, rng):
        return ad.mse_loss(leaves["w"], target)
    return loss_fn


def test_run_training_converges_and_is_deterministic():
    target = np.array([1.0, -2.0, 0.5])
    cfg = TrainConfig(lr=0.05, batch_size=1, n_samples=600, ema_halflife=5.0, ema_rampup=None)
    p1 = {"w": np.zeros(3)}
    ema1, l1 = run_training(p1, _quadratic(target), cfg, seed=0)
    np.testing.assert_allclose(p1["w"], target, atol=1e-2)
    np.testing.assert_allclose(ema1["w"], target, atol=5e-2)
    assert len(l1) == 600 and l1[-1] < l1[0]
    p2 = {"w": np.zeros(3)}
    _, l2 = run_training(p2, _quadratic(target), cfg, seed=0)
    assert np.array_equal(l1, l2)


def test_warmup_scales_first_step():
    cfg = TrainConfig(lr=1.0, batch_size=1, n_samples=1, lr_warmup=4)
    p = {"w": np.zeros(1)}
    run_training(p, _quadratic(np.ones(1)), cfg, seed=0)
    assert p["w"][0] == pytest.approx(0.25, rel=1e-6)


def test_callback_sees_every_step():
    seen = []
    cfg = TrainConfig(batch_size=2, n_samples=10)
    run_training({"w": np.zeros(1)}, _quadratic(np.ones(1)), cfg, 0, callback=lambda s, l: seen.append(s))
    assert seen == list(range(5))
