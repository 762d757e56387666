"""Synthetic coarse/fine scene generator with known conditional statistics.

A fine scene is a deterministic large-scale part plus a stochastic
small-scale part::

    u, v, T = L + a * S          (T also carries a fixed topography imprint)
    Z       = max(0, -g div(u, v))**1.5 * exp((T - mean(T)) / T0) + a * S_Z,  clipped at 0

The coarse input pools the shared channels (u, v, T), optionally degrades
them with a blur plus damping bias, and appends four smooth functionals of
``L``. Because ``L`` is kept with the scene, the stochastic part can be
redrawn at will, which gives a brute-force sample of the conditional
distribution for testing.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import ndimage

from .grid import ChannelSpec, Field, pool_array, radial_wavenumber

SCENARIOS = ("grf", "vortex", "front", "mixed")
FINE_CHANNELS = (
    ChannelSpec("u", "m/s"),
    ChannelSpec("v", "m/s"),
    ChannelSpec("T", "K"),
    ChannelSpec("Z", "dBZ-like", role="synthesized"),
)
AUX_NAMES = ("ke_ls", "vort_ls", "div_ls", "T_smooth")
COARSE_CHANNELS = tuple(ChannelSpec(n, c.units, role="conditioning") for n, c in
                        zip(("u", "v", "T"), FINE_CHANNELS)) + tuple(
    ChannelSpec(n, "1", role="conditioning") for n in AUX_NAMES)
SHARED = ("u", "v", "T")

Z_EXPONENT = 1.5
Z_TEMP_SCALE = 2.0
TOPO_SLOPE = 3.0


class StateError(RuntimeError):
    pass


@dataclass(frozen=True)
class ScenarioParams:
    scenario: str = "grf"
    size: int = 128
    factor: int = 8
    slope_large: float = 4.0
    slope_small: float = 5.0 / 3.0
    amplitude: float = 0.3
    topo_seed: int = 0
    topo_variance: float = 0.25
    convergence_gain: float = 4.0
    background: float = 0.3
    bias_blur: float = 0.0
    bias_damping: float = 0.0
    vortex_center: tuple[float, float] | None = None
    vortex_rmax: float = 12.0
    vortex_vmax: float = 3.0
    vortex_decay: float = 0.6
    front_angle: float | None = None
    front_width: float = 3.0
    front_jump: float = 3.0
    front_convergence: float = 1.5

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.slope_large <= 0 or self.slope_small <= 0:
            raise ValueError("spectral slopes must be positive")
        if self.amplitude < 0:
            raise ValueError("stochastic amplitude must be >= 0")
        if not 0.0 <= self.bias_damping <= 1.0:
            raise ValueError("bias_damping must lie in [0, 1]")
        if self.bias_blur < 0:
            raise ValueError("bias_blur must be >= 0")
        if self.vortex_rmax < 1:
            raise ValueError("vortex_rmax must be at least one pixel")
        if self.size % self.factor:
            raise ValueError(f"size {self.size} not divisible by factor {self.factor}")
        if self.vortex_center is not None:
            object.__setattr__(self, "vortex_center", tuple(float(c) for c in self.vortex_center))

    @property
    def coarse_size(self) -> int:
        return self.size // self.factor

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["vortex_center"] is not None:
            d["vortex_center"] = list(d["vortex_center"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioParams":
        return cls(**d)


@dataclass(frozen=True)
class GridScene:
    fine: Field
    coarse: Field
    latent: dict = field(repr=False)
    params: ScenarioParams = field(repr=False)
    seed: int = 0
    noise_seed: int = 0
    kind: str = "grf"


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream)]))


def grf_array(shape: tuple[int, int], slope: float, variance: float,
              rng: np.random.Generator) -> np.ndarray:
    """Zero-mean field whose integer-binned radial power spectrum follows ``k**-slope``.

    Each mode's variance is divided by the number of modes sharing its radial
    bin, so the expected binned spectrum is an exact power law. The sample is
    then rescaled to spatial variance ``variance``.
    """
    if slope <= 0:
        raise ValueError("slope must be positive")
    if variance < 0:
        raise ValueError("variance must be >= 0")
    h, w = shape
    noise = rng.standard_normal((h, w))
    if variance == 0:
        return np.zeros((h, w))
    kbin = radial_wavenumber(h, w)
    counts = np.bincount(kbin.ravel())
    amp = np.zeros((h, w))
    nz = kbin > 0
    amp[nz] = np.sqrt(kbin[nz].astype(float) ** (-slope) / counts[kbin[nz]])
    f = np.fft.ifft2(np.fft.fft2(noise) * amp).real
    f -= f.mean()
    return f * np.sqrt(variance / f.var())


def grf_sample(geometry: tuple[int, int], slope: float, variance: float, seed: int,
               name: str = "grf") -> Field:
    h, w = geometry[:2]
    return Field((ChannelSpec(name),), grf_array((h, w), slope, variance, _rng(seed, 0))[None])


def rankine_speed(r: np.ndarray, r_max: float, v_max: float, decay: float) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    inner = v_max * r / r_max
    with np.errstate(divide="ignore"):
        outer = v_max * (r_max / np.maximum(r, 1e-300)) ** decay
    return np.where(r <= r_max, inner, outer)


def vortex_uv(shape: tuple[int, int], center: tuple[float, float], r_max: float,
              v_max: float, decay: float) -> tuple[np.ndarray, np.ndarray]:
    h, w = shape
    cy, cx = center
    if not (0 <= cy <= h - 1 and 0 <= cx <= w - 1):
        raise ValueError(f"vortex center {center} outside {h}x{w} grid")
    if r_max < 1 or v_max <= 0 or decay <= 0:
        raise ValueError("vortex needs r_max >= 1, v_max > 0, decay > 0")
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    dy, dx = yy - cy, xx - cx
    r = np.hypot(dx, dy)
    speed = rankine_speed(r, r_max, v_max, decay)
    with np.errstate(invalid="ignore", divide="ignore"):
        sin_t = np.where(r > 0, dy / r, 0.0)
        cos_t = np.where(r > 0, dx / r, 0.0)
    # counter-clockwise rotation in (x=col, y=row) coordinates
    return -speed * sin_t, speed * cos_t


def vortex_field(geometry: tuple[int, int], center: tuple[float, float], r_max: float,
                 v_max: float, decay: float) -> Field:
    u, v = vortex_uv(geometry[:2], center, r_max, v_max, decay)
    return Field(FINE_CHANNELS[:2], np.stack([u, v]))


def front_uvt(shape: tuple[int, int], angle: float, width: float, jump: float,
              amplitude: float, origin: tuple[float, float] | None = None):
    """Tanh front; ``angle`` is the direction of the front normal (radians)."""
    if width <= 0:
        raise ValueError("front width must be positive")
    h, w = shape
    oy, ox = origin if origin is not None else ((h - 1) / 2, (w - 1) / 2)
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    nx, ny = np.cos(angle), np.sin(angle)
    s = (xx - ox) * nx + (yy - oy) * ny
    prof = np.tanh(s / width)
    temp = 0.5 * jump * prof
    across = -amplitude * prof
    along = amplitude * prof
    u = across * nx - along * ny
    v = across * ny + along * nx
    return u, v, temp, s


def front_field(geometry: tuple[int, int], angle: float, width: float, jump: float,
                amplitude: float, origin: tuple[float, float] | None = None) -> Field:
    u, v, t, _ = front_uvt(geometry[:2], angle, width, jump, amplitude, origin)
    return Field(FINE_CHANNELS[:3], np.stack([u, v, t]))


def divergence(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """du/dx + dv/dy with x along columns; centered inside, one-sided at the border."""
    return np.gradient(u, axis=-1) + np.gradient(v, axis=-2)


def vorticity(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.gradient(v, axis=-1) - np.gradient(u, axis=-2)


def topography(params: ScenarioParams) -> np.ndarray:
    n = params.size
    return grf_array((n, n), TOPO_SLOPE, params.topo_variance, _rng(params.topo_seed, 7))


def _latent(params: ScenarioParams, seed: int) -> tuple[dict, str]:
    rng = _rng(seed, 0)
    n = params.size
    kind = params.scenario
    if kind == "mixed":
        kind = ("grf", "vortex", "front")[int(rng.integers(3))]
    grf = [grf_array((n, n), params.slope_large, 1.0, rng) for _ in range(3)]
    meta = {}
    if kind == "grf":
        u, v, t = grf
    elif kind == "vortex":
        if params.vortex_center is not None:
            center = params.vortex_center
        else:
            margin = min(params.vortex_rmax * 1.5, (n - 1) / 2)
            center = tuple(float(c) for c in rng.uniform(margin, n - 1 - margin, size=2))
        vu, vv = vortex_uv((n, n), center, params.vortex_rmax, params.vortex_vmax,
                           params.vortex_decay)
        u = vu + params.background * grf[0]
        v = vv + params.background * grf[1]
        t = grf[2]
        meta = {"center": np.asarray(center, dtype=float)}
    else:
        angle = params.front_angle if params.front_angle is not None else rng.uniform(0, 2 * np.pi)
        origin = tuple(rng.uniform(0.3 * (n - 1), 0.7 * (n - 1), size=2))
        fu, fv, ft, _ = front_uvt((n, n), angle, params.front_width, params.front_jump,
                                  params.front_convergence, origin)
        u = fu + params.background * grf[0]
        v = fv + params.background * grf[1]
        t = ft + params.background * grf[2]
        meta = {"angle": np.asarray([angle], dtype=float), "origin": np.asarray(origin, dtype=float)}
    return {"u": u, "v": v, "T": t, "topo": topography(params), **meta}, kind


def _stochastic(params: ScenarioParams, noise_seed: int) -> np.ndarray:
    rng = _rng(noise_seed, 1)
    n = params.size
    return np.stack([grf_array((n, n), params.slope_small, 1.0, rng) for _ in range(4)])


def compose_fine(latent: dict, noise: np.ndarray, params: ScenarioParams) -> np.ndarray:
    a = params.amplitude
    u = latent["u"] + a * noise[0]
    v = latent["v"] + a * noise[1]
    t = latent["T"] + latent["topo"] + a * noise[2]
    conv = np.maximum(0.0, -params.convergence_gain * divergence(u, v))
    z = conv ** Z_EXPONENT * np.exp((t - t.mean()) / Z_TEMP_SCALE) + a * noise[3]
    return np.stack([u, v, t, np.maximum(z, 0.0)])


def _aux_channels(latent: dict, params: ScenarioParams) -> np.ndarray:
    f = params.factor
    sm = max(f / 2.0, 0.5)
    u = ndimage.gaussian_filter(latent["u"], sm)
    v = ndimage.gaussian_filter(latent["v"], sm)
    aux = [
        0.5 * (u ** 2 + v ** 2),
        f * vorticity(u, v),
        f * divergence(u, v),
        ndimage.gaussian_filter(latent["T"] + latent["topo"], 2 * sm),
    ]
    return pool_array(np.stack(aux), f)


def apply_bias(coarse: np.ndarray, blur: float, damping: float) -> np.ndarray:
    """Blur each channel, then shrink deviations from its spatial mean by ``1 - damping``."""
    out = np.array(coarse, dtype=float, copy=True)
    if blur > 0:
        out = np.stack([ndimage.gaussian_filter(c, blur, mode="nearest") for c in out])
    if damping > 0:
        m = out.mean(axis=(-2, -1), keepdims=True)
        out = m + (1.0 - damping) * (out - m)
    return out


def _coarse(fine: np.ndarray, latent: dict, params: ScenarioParams) -> np.ndarray:
    shared = pool_array(fine[:3], params.factor)
    c = np.concatenate([shared, _aux_channels(latent, params)])
    if params.bias_blur > 0 or params.bias_damping > 0:
        c = apply_bias(c, params.bias_blur, params.bias_damping)
    return c


def synth_scene(params: ScenarioParams, seed: int, noise_seed: int | None = None) -> GridScene:
    """Generate one scene. ``seed`` fixes the large-scale part, ``noise_seed`` the rest."""
    noise_seed = seed if noise_seed is None else noise_seed
    latent, kind = _latent(params, seed)
    fine = compose_fine(latent, _stochastic(params, noise_seed), params)
    coarse = _coarse(fine, latent, params)
    return GridScene(
        fine=Field(FINE_CHANNELS, fine),
        coarse=Field(COARSE_CHANNELS, coarse, spacing=float(params.factor)),
        latent=latent, params=params, seed=int(seed), noise_seed=int(noise_seed), kind=kind,
    )


def conditional_resample(scene: GridScene, k: int, seed: int):
    """Draw ``k`` fine fields sharing the scene's large-scale part."""
    from .diffusion import EnsembleForecast

    if not scene.latent:
        raise StateError("scene carries no latent component; cannot resample")
    members = np.stack([
        compose_fine(scene.latent, _stochastic(scene.params, _member_seed(seed, i)), scene.params)
        for i in range(k)
    ])
    return EnsembleForecast(members=members, channels=FINE_CHANNELS,
                            seeds=[_member_seed(seed, i) for i in range(k)])


def _member_seed(seed: int, i: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(i)]).generate_state(1)[0])


def scene_seeds(seed: int, n: int) -> list[int]:
    """``n`` distinct generator seeds derived from one dataset seed."""
    out: list[int] = []
    seen: set[int] = set()
    ss = np.random.SeedSequence(int(seed))
    while len(out) < n:
        for s in ss.generate_state(2 * n, np.uint32):
            s = int(s)
            if s not in seen:
                seen.add(s)
                out.append(s)
            if len(out) == n:
                break
        ss = ss.spawn(1)[0]
    return out


@dataclass
class SceneDataset:
    """Stacked scenes: ``coarse`` is ``(n, 7, h, w)``, ``fine`` is ``(n, 4, H, W)``."""

    coarse: np.ndarray
    fine: np.ndarray
    seeds: list[int]
    params: ScenarioParams
    kinds: list[str] = field(default_factory=list)
    latents: list[dict] = field(default_factory=list, repr=False)

    fine_channels: Sequence[ChannelSpec] = FINE_CHANNELS
    coarse_channels: Sequence[ChannelSpec] = COARSE_CHANNELS

    def __len__(self) -> int:
        return len(self.seeds)

    def scene(self, i: int) -> GridScene:
        return GridScene(
            fine=Field(self.fine_channels, self.fine[i]),
            coarse=Field(self.coarse_channels, self.coarse[i], spacing=float(self.params.factor)),
            latent=self.latents[i] if self.latents else {},
            params=self.params, seed=self.seeds[i], noise_seed=self.seeds[i],
            kind=self.kinds[i] if self.kinds else self.params.scenario,
        )

    def subset(self, idx) -> "SceneDataset":
        idx = list(np.atleast_1d(idx))
        return SceneDataset(
            coarse=self.coarse[idx], fine=self.fine[idx], seeds=[self.seeds[i] for i in idx],
            params=self.params, kinds=[self.kinds[i] for i in idx] if self.kinds else [],
            latents=[self.latents[i] for i in idx] if self.latents else [],
        )


def make_dataset(params: ScenarioParams, n: int, seed: int, keep_latent: bool = True) -> SceneDataset:
    seeds = scene_seeds(seed, n)
    scenes = [synth_scene(params, s) for s in seeds]
    return SceneDataset(
        coarse=np.stack([s.coarse.data for s in scenes]),
        fine=np.stack([s.fine.data for s in scenes]),
        seeds=seeds, params=params, kinds=[s.kind for s in scenes],
        latents=[s.latent for s in scenes] if keep_latent else [],
    )


def with_params(params: ScenarioParams, **changes) -> ScenarioParams:
    return replace(params, **changes)
