"""Analytic oracle checks shared by the ``selfcheck`` command and the test suite."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


def _operator_cases(rng: np.random.Generator) -> dict:
    """One scalar-loss function and parameter dict per registered operator."""
    r = lambda *s: rng.standard_normal(s)
    img = r(2, 4, 4, 3)
    tgt4 = r(2, 4, 4, 3)
    t_cat, t_pool, t_up, t_lin = r(2, 4, 4, 5), r(2, 2, 2, 3), r(2, 8, 8, 3), r(3, 4)
    t_conv, t_conv2 = r(2, 4, 4, 2), r(2, 2, 2, 2)
    w_mse = np.abs(r(2, 1, 1, 1))
    cases = {
        "add": (lambda P: ad.mse_loss(ad.add(P["a"], P["b"]), tgt4), {"a": img, "b": r(1, 1, 1, 3)}),
        "mul": (lambda P: ad.mse_loss(ad.mul(P["a"], P["b"]), tgt4), {"a": img, "b": r(2, 4, 4, 3)}),
        "silu": (lambda P: ad.mse_loss(ad.silu(P["a"]), tgt4), {"a": img}),
        "reshape": (lambda P: ad.mse_loss(ad.reshape(P["a"], (2, 48)), tgt4.reshape(2, 48)), {"a": img}),
        "transpose": (lambda P: ad.mse_loss(ad.transpose(P["a"], (0, 3, 1, 2)),
                                            tgt4.transpose(0, 3, 1, 2)), {"a": img}),
        "concat": (lambda P: ad.mse_loss(ad.concat([P["a"], P["b"]]), t_cat),
                   {"a": img, "b": r(2, 4, 4, 2)}),
        "avg_pool2": (lambda P: ad.mse_loss(ad.avg_pool2(P["a"]), t_pool), {"a": img}),
        "upsample2": (lambda P: ad.mse_loss(ad.upsample2(P["a"]), t_up), {"a": img}),
        "linear": (lambda P: ad.mse_loss(ad.linear(P["x"], P["w"], P["b"]), t_lin),
                   {"x": r(3, 5), "w": r(4, 5), "b": r(4)}),
        "conv2d": (lambda P: ad.mse_loss(ad.conv2d(P["x"], P["w"], P["b"], padding=1), t_conv),
                   {"x": img, "w": r(3, 3, 3, 2), "b": r(2)}),
        "conv2d_stride2": (lambda P: ad.mse_loss(ad.conv2d(P["x"], P["w"], P["b"], stride=2, padding=1),
                                                 t_conv2),
                           {"x": img, "w": r(3, 3, 3, 2), "b": r(2)}),
        "mse": (lambda P: ad.mse_loss(P["a"], P["b"], weight=w_mse), {"a": img, "b": tgt4}),
    }
    mask = (rng.random(img.shape) > 0.3) / 0.7
    cases["dropout"] = (lambda P: ad.mse_loss(ad.Dropout.apply(P["a"], mask=mask), tgt4), {"a": img})
    return cases


def operator_grad_errors(seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    return {name: ad.grad_check(fn, params, n_samples=30, seed=seed)
            for name, (fn, params) in _operator_cases(rng).items()}


def denoiser_grad_error(mode: str, seed: int = 0) -> float:
    from .network import NetSpec, build_network

    spec = NetSpec(depth=3, base_width=4, channel_mult=(1, 2, 2), c_out=2, c_cond=3, noise_width=8)
    d = build_network(spec, seed, mode, dtype=np.float64)
    rng = np.random.default_rng(seed + 100)
    z = rng.standard_normal((2, 2, 8, 8))
    cond = rng.standard_normal((2, 3, 8, 8))
    tgt = rng.standard_normal((2, 2, 8, 8))
    sigma = np.array([0.5, 2.0])

    def fn(leaves):
        return ad.mse_loss(d.forward_tensor(z, sigma, cond, leaves=leaves), tgt)

    return ad.grad_check(fn, d.params, n_samples=6, seed=seed)


def score_identity_error(sigmas=(0.01, 1.0, 80.0), mu0: float = 0.3, sigma0: float = 1.0,
                         seed: int = 0) -> float:
    from .diffusion import GaussianOracleDenoiser, score_from_denoiser

    oracle = GaussianOracleDenoiser(mu0, sigma0)
    z = np.random.default_rng(seed).standard_normal(4096) * 3.0 + 1.0
    worst = 0.0
    for s in sigmas:
        got = score_from_denoiser(oracle, z, s)
        want = -(z - mu0) / (sigma0 ** 2 + s ** 2)
        worst = max(worst, float(np.max(np.abs(got - want) / np.abs(want))))
    return worst


def oracle_sample_stats(mu0: float = 0.0, sigma0: float = 1.0, n_steps: int = 18,
                        sigma_max: float = 80.0, n_fields: int = 40, size: int = 16,
                        s_churn: float = 0.0, seed: int = 0) -> tuple[float, float, float]:
    """(mean, standard error, variance) of Heun samples under the Gaussian oracle."""
    from .diffusion import GaussianOracleDenoiser, NoiseSchedule, heun_sample

    x = heun_sample(GaussianOracleDenoiser(mu0, sigma0), None, (n_fields, 1, size, size),
                    NoiseSchedule(n_steps=n_steps, sigma_max=sigma_max, s_churn=s_churn),
                    np.random.default_rng(seed))
    return float(x.mean()), float(x.std() / np.sqrt(x.size)), float(x.var())


def crps_oracle_error(n_cases: int = 100, seed: int = 0) -> tuple[float, bool]:
    """Max |energy form - CDF integral| over random ensembles, and K=1 exactness."""
    from .metrics import crps_ensemble, crps_integral

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        k = int(rng.integers(1, 40))
        m = rng.standard_normal(k) * rng.uniform(0.1, 3)
        o = rng.standard_normal() * 2
        worst = max(worst, abs(float(crps_ensemble(m, o)) - crps_integral(m, o)))
    m = rng.standard_normal((1, 500))
    o = rng.standard_normal(500)
    exact = bool(np.array_equal(crps_ensemble(m, o), np.abs(m[0] - o)))
    return worst, exact


def run_selfcheck(seed: int = 0):
    """Yield ``(name, passed, detail)`` for each oracle."""
    for s in range(3):
        errs = operator_grad_errors(seed + s)
        worst = max(errs, key=errs.get)
        yield f"grad_operators_seed{seed + s}", errs[worst] < 1e-4, f"max_rel={errs[worst]:.2e} ({worst})"
        for mode in ("regression", "diffusion"):
            e = denoiser_grad_error(mode, seed + s)
            yield f"grad_denoiser_{mode}_seed{seed + s}", e < 1e-4, f"max_rel={e:.2e}"
    e = score_identity_error(seed=seed)
    yield "score_identity", e < 1e-12, f"max_rel={e:.2e}"
    # N=18 carries an O(h^2) amplitude error; 72 steps isolate implementation faults
    for mu0, smax in ((0.0, 80.0), (5.0, 800.0)):
        m, se, v = oracle_sample_stats(mu0=mu0, sigma_max=smax, n_steps=72, seed=seed)
        ok = abs(m - mu0) < 3 * se and 0.97 < v < 1.03
        yield f"heun_oracle_mu{mu0:g}_smax{smax:g}_n72", ok, f"mean={m:.4f} se={se:.4f} var={v:.4f}"
    v18 = oracle_sample_stats(n_steps=18, seed=seed)[2]
    v36 = oracle_sample_stats(n_steps=36, seed=seed)[2]
    ratio = abs(v18 - 1) / max(abs(v36 - 1), 1e-12)
    yield "heun_second_order", ratio > 2.5, f"var_err18/var_err36={ratio:.2f}"
    e, exact = crps_oracle_error(seed=seed)
    yield "crps_energy_vs_integral", e < 1e-6, f"max_abs={e:.2e}"
    yield "crps_k1_equals_mae", exact, "bit-exact" if exact else "mismatch"
