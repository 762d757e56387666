import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from downscaling.autodiff import ContractError
from downscaling.grid import DimensionError, Field, channels
from downscaling.preprocessing import ChannelNormalizer
from downscaling.regression import DataError, MeanRegressor, check_pair, predict_mean, upsample_condition


def test_normalizer_standardizes(rng):
    X = rng.standard_normal((5, 2, 4, 4)) * [[[[3.0]], [[0.5]]]] + [[[[1.0]], [[-2.0]]]]
    t = ChannelNormalizer().fit_transform(X)
    np.testing.assert_allclose(t.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(t.std(axis=(0, 2, 3)), 1, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 2, 4, 4), elements=st.floats(0, 100)))
def test_normalizer_roundtrip(X):
    n = ChannelNormalizer(sqrt_channels=(1,)).fit(X)
    np.testing.assert_allclose(n.inverse_transform(n.transform(X)), X, atol=1e-9 * (1 + X.max()))
    assert ChannelNormalizer.from_dict(n.to_dict()).transform(X).tolist() == n.transform(X).tolist()


def test_normalizer_sqrt_inverse_is_nonnegative():
    n = ChannelNormalizer(sqrt_channels=(0,)).fit(np.arange(16.0).reshape(1, 1, 4, 4))
    assert np.all(n.inverse_transform(np.full((1, 1, 2, 2), -50.0)) == 0)


def test_normalizer_errors():
    with pytest.raises(ValueError):
        ChannelNormalizer(sqrt_channels=(0,)).fit(-np.ones((1, 1, 2, 2)))
    with pytest.raises(DimensionError):
        ChannelNormalizer(sqrt_channels=(3,)).fit(np.ones((1, 1, 2, 2)))
    with pytest.raises(NotFittedError):
        ChannelNormalizer().transform(np.ones((1, 1, 2, 2)))
    with pytest.raises(DimensionError):
        ChannelNormalizer().fit(np.ones((1, 2, 2, 2))).transform(np.ones((1, 3, 2, 2)))


def test_check_pair():
    with pytest.raises(DataError):
        check_pair(np.zeros((2, 1, 2, 2)), np.zeros((3, 1, 4, 4)))
    with pytest.raises(DataError):
        check_pair(np.zeros((0, 1, 2, 2)), np.zeros((0, 1, 4, 4)))
    with pytest.raises(ValueError):
        check_pair(np.full((1, 1, 2, 2), np.nan), np.zeros((1, 1, 4, 4)))


def test_upsample_condition_identity_when_same_size(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    assert np.array_equal(upsample_condition(x, (4, 4), np.float64), x)
    assert upsample_condition(x, (8, 8)).shape == (1, 2, 8, 8)


def test_estimator_params_and_clone(tiny_spec):
    m = MeanRegressor(spec=tiny_spec, seed=3)
    assert m.get_params()["seed"] == 3
    c = clone(m)
    assert c.spec == tiny_spec and not hasattr(c, "net_")
    with pytest.raises(NotFittedError):
        m.predict(np.zeros((1, 7, 4, 4)))


def test_fitted_regressor(tiny_models):
    train, test, reg, _ = tiny_models
    mu = reg.predict(test.coarse)
    assert mu.shape == test.fine.shape
    assert np.all(mu[:, 3] >= 0)  # Z is square-rooted, so its inverse cannot go negative
    assert reg.train_seeds_ == train.seeds
    assert reg.n_samples_seen_ == 80 and len(reg.loss_curve_) == 20
    assert reg.loss_curve_[-5:].mean() < reg.loss_curve_[:5].mean()
    assert reg.score(test.coarse, test.fine) <= 0
    assert np.array_equal(reg.predict(test.coarse, batch=1), reg.predict(test.coarse))


def test_fit_is_deterministic(tiny_models, tiny_spec):
    from downscaling.optim import TrainConfig

    train = tiny_models[0].subset(range(4))
    cfg = TrainConfig(batch_size=2, n_samples=8)
    a = MeanRegressor(tiny_spec, cfg, seed=1).fit(train.coarse, train.fine)
    b = MeanRegressor(tiny_spec, cfg, seed=1).fit(train.coarse, train.fine)
    assert np.array_equal(a.predict(train.coarse), b.predict(train.coarse))


def test_wrong_channel_count(tiny_models):
    _, test, reg, _ = tiny_models
    with pytest.raises(DimensionError):
        reg.predict(test.coarse[:, :5])


def test_predict_mean_field(tiny_models):
    _, test, reg, _ = tiny_models
    sc = test.scene(0)
    out = predict_mean(reg, sc.coarse)
    assert out.names == ["u", "v", "T", "Z"] and out.shape == (4, 16, 16)
    assert out.spacing == pytest.approx(1.0)
    bad = Field(channels([f"c{i}" for i in range(7)]), sc.coarse.data)
    with pytest.raises(ContractError):
        predict_mean(reg, bad)
