import numpy as np
import pytest
from scipy.signal import correlate

from downscaling import autodiff as ad
from downscaling.selfcheck import _operator_cases, operator_grad_errors


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_every_operator_passes_grad_check(seed):
    errs = operator_grad_errors(seed)
    assert {k.split("_stride")[0] for k in errs} >= set(ad.OPERATORS)
    assert max(errs.values()) < 1e-4, errs


def test_operator_cases_cover_registry():
    names = set(_operator_cases(np.random.default_rng(0)))
    assert set(ad.OPERATORS) <= names


def test_grad_check_catches_a_wrong_backward():
    class BadSquare(ad.Function):
        @staticmethod
        def forward(ctx, x):
            ctx["x"] = x
            return x * x

        @staticmethod
        def backward(ctx, grad):
            return (grad * ctx["x"],)  # missing factor 2

    x = np.random.default_rng(0).standard_normal(5)
    err = ad.grad_check(lambda P: ad.mse_loss(BadSquare.apply(P["x"]), np.zeros(5)), {"x": x})
    assert err > 0.1


def test_conv2d_matches_scipy_correlate(rng):
    x = rng.standard_normal((1, 6, 7, 2))
    w = rng.standard_normal((3, 3, 2, 4))
    b = rng.standard_normal(4)
    got = ad.conv2d(x, w, b, padding=1).data
    xp = np.pad(x[0], ((1, 1), (1, 1), (0, 0)))
    for o in range(4):
        want = sum(correlate(xp[..., c], w[..., c, o], mode="valid") for c in range(2)) + b[o]
        np.testing.assert_allclose(got[0, ..., o], want, atol=1e-12)


def test_conv2d_stride_subsamples(rng):
    x = rng.standard_normal((2, 8, 8, 3))
    w = rng.standard_normal((3, 3, 3, 2))
    b = np.zeros(2)
    full = ad.conv2d(x, w, b, padding=1).data
    np.testing.assert_allclose(ad.conv2d(x, w, b, stride=2, padding=1).data, full[:, ::2, ::2], atol=1e-12)


def test_conv2d_contract():
    with pytest.raises(ad.ContractError):
        ad.conv2d(np.zeros((1, 4, 4, 3)), np.zeros((3, 3, 2, 1)), np.zeros(1))
    with pytest.raises(ad.ContractError):
        ad.conv2d(np.zeros((1, 2, 2, 1)), np.zeros((3, 3, 1, 1)), np.zeros(1))


def test_pool_and_upsample_are_adjoint(rng):
    x = rng.standard_normal((2, 4, 6, 3))
    y = rng.standard_normal((2, 2, 3, 3))
    lhs = np.sum(ad.avg_pool2(x).data * y)
    rhs = np.sum(x * ad.upsample2(y).data) / 4
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_pool_rejects_odd_size():
    with pytest.raises(ad.ContractError):
        ad.avg_pool2(np.zeros((1, 3, 4, 1)))


def test_linear_matches_numpy(rng):
    x, w, b = rng.standard_normal((3, 5)), rng.standard_normal((4, 5)), rng.standard_normal(4)
    np.testing.assert_allclose(ad.linear(x, w, b).data, x @ w.T + b)


def test_silu_is_stable_for_large_inputs():
    with np.errstate(over="raise"):
        out = ad.silu(np.array([-1000.0, 0.0, 1000.0])).data
    assert out.tolist() == [0.0, 0.0, 1000.0]


def test_gradients_accumulate_over_reuse():
    x = ad.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    loss = ad.mse_loss(x * x + x, np.zeros(2))
    loss.backward()
    # d/dx mean((x^2 + x)^2) = (x^2 + x)(2x + 1)
    np.testing.assert_allclose(x.grad, (x.data ** 2 + x.data) * (2 * x.data + 1))


def test_backward_needs_scalar():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ad.ContractError):
        ad.backward(x * 2.0)


def test_no_graph_without_requires_grad():
    out = ad.mul(np.ones(3), 2.0)
    assert out.is_leaf and not out.requires_grad


def test_mse_weighted_value():
    got = ad.mse_loss(np.array([1.0, 3.0]), np.array([0.0, 1.0]), weight=np.array([2.0, 0.5])).data
    assert float(got) == pytest.approx((2 * 1 + 0.5 * 4) / 2)
    with pytest.raises(ad.ContractError):
        ad.mse_loss(np.zeros(2), np.zeros(3))


def test_dropout_rate_zero_is_identity(rng):
    x = ad.Tensor(np.ones(4))
    assert ad.dropout(x, 0.0, rng) is x
    kept = ad.dropout(np.ones(10000), 0.25, rng).data
    assert set(np.unique(kept)) <= {0.0, 1 / 0.75}
    assert kept.mean() == pytest.approx(1.0, abs=0.05)


def test_concat_and_transpose_shapes(rng):
    a, b = rng.standard_normal((1, 2, 2, 3)), rng.standard_normal((1, 2, 2, 1))
    assert ad.concat([a, b]).shape == (1, 2, 2, 4)
    assert ad.transpose(a, (0, 3, 1, 2)).shape == (1, 3, 2, 2)
