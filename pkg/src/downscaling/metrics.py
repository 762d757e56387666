"""Verification scores for deterministic and ensemble forecasts.

Ensembles are arrays with the member axis first, ``(K, ...)``; the trailing
axes are pixels or cases and all reductions over them are plain numpy sums,
so results are deterministic for a given input.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .grid import DimensionError, Field, radial_wavenumber


class ContractError(ValueError):
    pass


def crps_ensemble(members, obs, axis: int = 0) -> np.ndarray:
    """Energy-form CRPS of the empirical member distribution.

    ``mean|x_i - obs| - 1/(2K^2) sum_ij |x_i - x_j|``, evaluated on sorted
    members so the result does not depend on member order. With one member
    it is exactly ``|x - obs|``.
    """
    x = np.asarray(members, dtype=np.float64)
    if x.shape[axis] == 0:
        raise ContractError("empty ensemble")
    x = np.sort(np.moveaxis(x, axis, 0), axis=0)
    obs = np.asarray(obs, dtype=np.float64)
    k = x.shape[0]
    skill = np.abs(x - obs[None]).mean(axis=0)
    # sum_ij |x_i - x_j| = 2 sum_i (2i - K - 1) x_(i) for 1-based sorted ranks
    w = (2.0 * np.arange(1, k + 1) - k - 1).reshape((k,) + (1,) * (x.ndim - 1))
    spread = (w * x).sum(axis=0) / (k * k)
    return skill - spread


def crps_integral(members, obs, n_grid: int | None = None) -> float:
    """``integral (F(t) - 1{t >= obs})^2 dt`` for one scalar case.

    Integrates the step function exactly between breakpoints; with
    ``n_grid`` it uses a midpoint rule on a uniform grid instead.
    """
    x = np.sort(np.asarray(members, dtype=np.float64).ravel())
    o = float(obs)
    k = x.size
    if n_grid:
        lo, hi = min(x[0], o) - 1.0, max(x[-1], o) + 1.0
        t = lo + (np.arange(n_grid) + 0.5) * (hi - lo) / n_grid
        F = np.searchsorted(x, t, side="right") / k
        return float(np.sum((F - (t >= o)) ** 2) * (hi - lo) / n_grid)
    pts = np.sort(np.append(x, o))
    mids = 0.5 * (pts[:-1] + pts[1:])
    F = np.searchsorted(x, mids, side="right") / k
    return float(np.sum((F - (mids >= o)) ** 2 * np.diff(pts)))


def _channel_axes(a: np.ndarray) -> tuple[int, ...]:
    return tuple(i for i in range(a.ndim) if i != a.ndim - 3)


def deterministic_scores(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel (MAE, RMSE) for ``(C, H, W)`` or ``(n, C, H, W)`` stacks."""
    p = pred.data if isinstance(pred, Field) else np.asarray(pred, dtype=np.float64)
    t = truth.data if isinstance(truth, Field) else np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ContractError(f"prediction {p.shape} and truth {t.shape} differ")
    if p.ndim < 3:
        raise ContractError("expected channel-first gridded arrays")
    err = p - t
    ax = _channel_axes(err)
    return np.abs(err).mean(axis=ax), np.sqrt((err ** 2).mean(axis=ax))


def rank_histogram(ensembles, observations, seed: int = 0) -> np.ndarray:
    """Counts of the observation's rank among K members; ``K + 1`` bins.

    Ties are split uniformly at random from a seeded stream.
    """
    ens = np.asarray(ensembles, dtype=np.float64)
    obs = np.asarray(observations, dtype=np.float64)
    if ens.shape[1:] != obs.shape:
        raise ContractError(f"ensemble {ens.shape} and observations {obs.shape} misaligned")
    k = ens.shape[0]
    below = (ens < obs[None]).sum(axis=0).ravel()
    ties = (ens == obs[None]).sum(axis=0).ravel()
    rng = np.random.default_rng(seed)
    rank = below + np.floor(rng.random(below.size) * (ties + 1)).astype(np.int64)
    return np.bincount(rank, minlength=k + 1)


def rank_chi2(counts) -> tuple[float, float]:
    """Chi-square statistic and p-value against a flat histogram."""
    res = stats.chisquare(np.asarray(counts, dtype=np.float64))
    return float(res.statistic), float(res.pvalue)


@dataclass(frozen=True)
class SpreadErrorResult:
    spread: np.ndarray
    rmse: np.ndarray
    counts: np.ndarray
    slope: float


def spread_error(ensembles, observations, n_bins: int = 10) -> SpreadErrorResult:
    """RMSE of the ensemble mean against inflated spread, binned by spread quantile.

    Spread is the ``ddof=1`` member standard deviation times
    ``sqrt((K + 1) / K)``; per bin both coordinates are root-mean-squares.
    The slope is a least-squares fit through the origin over the bins.
    """
    ens = np.asarray(ensembles, dtype=np.float64)
    obs = np.asarray(observations, dtype=np.float64)
    k = ens.shape[0]
    if k < 2:
        raise ContractError("spread needs at least two members")
    if ens.shape[1:] != obs.shape:
        raise ContractError("ensemble and observations misaligned")
    s = (ens.std(axis=0, ddof=1) * np.sqrt((k + 1) / k)).ravel()
    e = (ens.mean(axis=0) - obs).ravel()
    order = np.argsort(s, kind="stable")
    groups = np.array_split(order, n_bins)
    groups = [g for g in groups if g.size]
    sp = np.array([np.sqrt(np.mean(s[g] ** 2)) for g in groups])
    rm = np.array([np.sqrt(np.mean(e[g] ** 2)) for g in groups])
    counts = np.array([g.size for g in groups])
    denom = float(np.sum(counts * sp ** 2))
    slope = float(np.sum(counts * sp * rm) / denom) if denom > 0 else float("nan")
    return SpreadErrorResult(sp, rm, counts, slope)


@dataclass(frozen=True)
class SpectrumResult:
    """Shell-summed power for wavenumbers ``1 .. k_max``; ``dc`` holds the squared mean."""

    wavenumber: np.ndarray
    power: np.ndarray
    dc: float = 0.0
    slope: float = float("nan")
    band: tuple[float, float] = (float("nan"), float("nan"))

    def fit(self, kmin: float, kmax: float) -> "SpectrumResult":
        return SpectrumResult(self.wavenumber, self.power, self.dc,
                              fit_slope(self.wavenumber, self.power, kmin, kmax), (kmin, kmax))

    def rows(self) -> list[dict]:
        return [{"wavenumber": int(k), "power": float(p)} for k, p in zip(self.wavenumber, self.power)]


def fit_slope(k, power, kmin: float, kmax: float) -> float:
    k = np.asarray(k, dtype=np.float64)
    p = np.asarray(power, dtype=np.float64)
    sel = (k >= kmin) & (k <= kmax) & (p > 0)
    if sel.sum() < 2:
        raise ValueError("fewer than two positive bins in the fit band")
    return float(np.polyfit(np.log(k[sel]), np.log(p[sel]), 1)[0])


def _radial_power(a: np.ndarray) -> tuple[np.ndarray, float]:
    h, w = a.shape[-2:]
    if h != w:
        raise DimensionError(f"radial spectrum needs a square field, got {h}x{w}")
    f = np.fft.fft2(a)
    p = (np.abs(f) ** 2) / float(h * w) ** 2
    kb = radial_wavenumber(h, w)
    lead = p.reshape(-1, h * w)
    binned = np.stack([np.bincount(kb.ravel(), weights=row) for row in lead]).mean(axis=0)
    return binned[1:], float(binned[0])


def radial_psd(f, channel: int | str = 0, band: tuple[float, float] | None = None) -> SpectrumResult:
    """Isotropic power spectrum of one channel.

    ``f`` is a Field, a ``(H, W)`` array, or a ``(..., H, W)`` stack whose
    leading axes are averaged. Shell sums over ``k >= 1`` add up to the
    spatial variance.
    """
    if isinstance(f, Field):
        a = f.data[f.index(channel) if isinstance(channel, str) else channel]
    else:
        a = np.asarray(f, dtype=np.float64)
    power, dc = _radial_power(a)
    k = np.arange(1, power.size + 1)
    res = SpectrumResult(k, power, dc)
    return res.fit(*band) if band else res


def ke_spectrum(u, v, band: tuple[float, float] | None = None) -> SpectrumResult:
    ua = u.data[0] if isinstance(u, Field) else np.asarray(u, dtype=np.float64)
    va = v.data[0] if isinstance(v, Field) else np.asarray(v, dtype=np.float64)
    if ua.shape != va.shape:
        raise ContractError("u and v geometry differ")
    pu, du = _radial_power(ua)
    pv, dv = _radial_power(va)
    res = SpectrumResult(np.arange(1, pu.size + 1), 0.5 * (pu + pv), 0.5 * (du + dv))
    return res.fit(*band) if band else res


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    density: np.ndarray
    log_density: np.ndarray

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])


def pdf_histogram(values, bins=50, log_scale: bool = False, range_=None) -> Histogram:
    """Normalized histogram; ``log_density`` is NaN where the density is 0.

    With ``log_scale`` the bins are log-spaced between the positive extremes.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size == 0:
        raise ContractError("no values")
    if isinstance(bins, int):
        if bins < 2:
            raise ValueError("need at least two bins")
        lo, hi = range_ if range_ is not None else (x.min(), x.max())
        if log_scale:
            pos = x[x > 0]
            lo = max(lo, pos.min()) if pos.size else 1e-12
            bins = np.geomspace(lo, max(hi, lo * 10), bins + 1)
        else:
            if hi <= lo:
                hi = lo + 1.0
            bins = np.linspace(lo, hi, bins + 1)
    dens, edges = np.histogram(x, bins=bins, density=True)
    with np.errstate(divide="ignore"):
        logd = np.where(dens > 0, np.log(np.where(dens > 0, dens, 1.0)), np.nan)
    return Histogram(edges, dens, logd)


def windspeed(u, v) -> np.ndarray:
    return np.hypot(np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64))


def bootstrap_fraction(a, b, n_boot: int = 2000, seed: int = 0) -> float:
    """Fraction of case-resampled replicates in which ``mean(a) <= mean(b)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractError("paired per-case scores expected")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, a.size, size=(n_boot, a.size))
    d = (a - b)[idx].mean(axis=1)
    return float(np.mean(d <= 0))


def bootstrap_halfwidth(a, n_boot: int = 2000, seed: int = 0, level: float = 0.95) -> float:
    a = np.asarray(a, dtype=np.float64)
    rng = np.random.default_rng(seed)
    m = a[rng.integers(0, a.size, size=(n_boot, a.size))].mean(axis=1)
    lo, hi = np.quantile(m, [(1 - level) / 2, (1 + level) / 2])
    return float(0.5 * (hi - lo))


@dataclass
class SkillReport:
    """Per-channel scores; ``per_case`` keeps the case-level values for bootstrapping."""

    channels: tuple[str, ...]
    crps: np.ndarray
    mae_mean: np.ndarray
    rmse_mean: np.ndarray
    mae_baseline: np.ndarray
    mae_regression: np.ndarray | None
    n_cases: int
    n_members: int
    halfwidth: dict = field(default_factory=dict)
    per_case: dict = field(default_factory=dict, repr=False)

    def rows(self) -> list[dict]:
        cols = [("crps", "crps"), ("mae_ensemble_mean", "mae_mean"),
                ("rmse_ensemble_mean", "rmse_mean"), ("mae_interpolation", "mae_baseline")]
        if self.mae_regression is not None:
            cols.append(("mae_regression", "mae_regression"))
        out = []
        for i, ch in enumerate(self.channels):
            for label, key in cols:
                hw = self.halfwidth.get(key)
                out.append({"channel": ch, "metric": label, "value": float(getattr(self, key)[i]),
                            "halfwidth": float(hw[i]) if hw is not None else float("nan"),
                            "n_cases": self.n_cases, "n_members": self.n_members})
        return out

    def to_dict(self) -> dict:
        d = {"channels": list(self.channels), "n_cases": self.n_cases, "n_members": self.n_members}
        for name in ("crps", "mae_mean", "rmse_mean", "mae_baseline", "mae_regression"):
            v = getattr(self, name)
            d[name] = None if v is None else [float(x) for x in v]
        d["halfwidth"] = {k: [float(x) for x in v] for k, v in self.halfwidth.items()}
        return d

    def ordering_confidence(self, channel: int, n_boot: int = 2000, seed: int = 0) -> dict:
        """Bootstrap support for CRPS <= MAE(mean) <= MAE(regression) <= MAE(interp)."""
        pc = self.per_case
        chain = [("crps", "mae_mean"), ("mae_mean", "mae_regression"),
                 ("mae_regression", "mae_baseline")]
        return {f"{a}<={b}": bootstrap_fraction(pc[a][:, channel], pc[b][:, channel], n_boot, seed)
                for a, b in chain if a in pc and b in pc}


def skill_report(ensembles, truths, baseline_preds, regression_preds=None,
                 channels: Sequence[str] | None = None, n_boot: int = 1000,
                 seed: int = 0) -> SkillReport:
    """Table-style comparison over ``n`` cases.

    ``ensembles`` is ``(n, K, C, H, W)``; ``truths``, ``baseline_preds`` and
    ``regression_preds`` are ``(n, C, H, W)``.
    """
    ens = np.asarray(ensembles, dtype=np.float64)
    tru = np.asarray(truths, dtype=np.float64)
    base = np.asarray(baseline_preds, dtype=np.float64)
    if ens.ndim != 5 or ens.shape[:1] + ens.shape[2:] != tru.shape or base.shape != tru.shape:
        raise ContractError(f"misaligned cases: ensembles {ens.shape}, truths {tru.shape}, "
                            f"baseline {base.shape}")
    n, k, c = ens.shape[:3]
    names = tuple(channels) if channels is not None else tuple(f"c{i}" for i in range(c))
    mean = ens.mean(axis=1)
    per_case = {
        "crps": np.stack([crps_ensemble(ens[i], tru[i]).mean(axis=(-2, -1)) for i in range(n)]),
        "mae_mean": np.abs(mean - tru).mean(axis=(-2, -1)),
        "mse_mean": ((mean - tru) ** 2).mean(axis=(-2, -1)),
        "mae_baseline": np.abs(base - tru).mean(axis=(-2, -1)),
    }
    mae_reg = None
    if regression_preds is not None:
        reg = np.asarray(regression_preds, dtype=np.float64)
        if reg.shape != tru.shape:
            raise ContractError("regression predictions misaligned")
        per_case["mae_regression"] = np.abs(reg - tru).mean(axis=(-2, -1))
        mae_reg = per_case["mae_regression"].mean(axis=0)
    hw = {key: np.array([bootstrap_halfwidth(v[:, j], n_boot, seed) for j in range(c)])
          for key, v in per_case.items() if key != "mse_mean"}
    return SkillReport(
        channels=names, crps=per_case["crps"].mean(axis=0), mae_mean=per_case["mae_mean"].mean(axis=0),
        rmse_mean=np.sqrt(per_case["mse_mean"].mean(axis=0)),
        mae_baseline=per_case["mae_baseline"].mean(axis=0), mae_regression=mae_reg,
        n_cases=n, n_members=k, halfwidth=hw, per_case=per_case,
    )
