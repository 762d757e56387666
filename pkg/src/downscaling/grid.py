"""Gridded field containers and resolution-change operators.

Arrays follow the ``(..., C, H, W)`` layout throughout: channels first,
rows, then columns. Every operator here works on the two trailing axes, so
the same function serves a single field and a batch of scenes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

ROLES = ("state", "conditioning", "synthesized")


class DimensionError(ValueError):
    """Raised when array shapes are incompatible with an operator."""


@dataclass(frozen=True)
class ChannelSpec:
    name: str
    units: str = "1"
    role: str = "state"
    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown channel role {self.role!r}; expected one of {ROLES}")
        if not self.std > 0:
            raise ValueError(f"channel {self.name!r}: std must be positive, got {self.std}")

    def to_dict(self) -> dict:
        return {"name": self.name, "units": self.units, "role": self.role,
                "mean": float(self.mean), "std": float(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelSpec":
        return cls(**d)


def channels(names: Sequence[str], role: str = "state") -> tuple[ChannelSpec, ...]:
    return tuple(ChannelSpec(n, role=role) for n in names)


@dataclass(frozen=True)
class Field:
    """A ``C x H x W`` array of finite values with per-channel metadata.

    The array is copied and frozen at construction, so a Field can be shared
    freely.
    """

    channels: tuple[ChannelSpec, ...]
    data: np.ndarray
    spacing: float = 1.0

    def __post_init__(self):
        data = np.array(self.data, copy=True)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3:
            raise DimensionError(f"Field data must be 3-D (C, H, W), got shape {data.shape}")
        chans = tuple(c if isinstance(c, ChannelSpec) else ChannelSpec(str(c)) for c in self.channels)
        if len(chans) != data.shape[0]:
            raise DimensionError(f"{len(chans)} channel specs for {data.shape[0]} data channels")
        if not np.all(np.isfinite(data)):
            raise ValueError("Field data contains NaN or Inf")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "channels", chans)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def geometry(self) -> tuple[int, int, float]:
        return self.data.shape[1], self.data.shape[2], self.spacing

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.channels]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"no channel {name!r} in {self.names}") from None

    def __getitem__(self, name: str) -> np.ndarray:
        return self.data[self.index(name)]

    def select(self, names: Sequence[str]) -> "Field":
        idx = [self.index(n) for n in names]
        return Field(tuple(self.channels[i] for i in idx), self.data[idx], self.spacing)

    def with_data(self, data: np.ndarray, spacing: float | None = None) -> "Field":
        return Field(self.channels, data, self.spacing if spacing is None else spacing)


@dataclass(frozen=True)
class ChannelStats:
    names: tuple[str, ...]
    mean: np.ndarray
    var: np.ndarray
    min: np.ndarray
    max: np.ndarray
    count: int

    def as_rows(self) -> list[dict]:
        return [
            {"channel": n, "mean": float(m), "var": float(v), "min": float(lo), "max": float(hi),
             "count": self.count}
            for n, m, v, lo, hi in zip(self.names, self.mean, self.var, self.min, self.max)
        ]


def check_grid_array(x, ndim: int | tuple[int, ...] = (3, 4), name: str = "X") -> np.ndarray:
    """Validate a gridded array: right rank, finite, float dtype."""
    x = np.asarray(x)
    allowed = (ndim,) if isinstance(ndim, int) else ndim
    if x.ndim not in allowed:
        raise DimensionError(f"{name} must have ndim in {allowed}, got shape {x.shape}")
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains NaN or Inf")
    return x


def pool_array(x: np.ndarray, factor: int) -> np.ndarray:
    """Block-mean over the two trailing axes."""
    factor = int(factor)
    if factor < 1:
        raise ValueError("factor must be a positive integer")
    h, w = x.shape[-2:]
    if h % factor or w % factor:
        raise DimensionError(f"grid {h}x{w} not divisible by factor {factor}")
    if factor == 1:
        return np.array(x, copy=True)
    blocks = x.reshape(*x.shape[:-2], h // factor, factor, w // factor, factor)
    return blocks.mean(axis=(-3, -1))


def _linear_weights(n_src: int, n_dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # corner-aligned: destination node j sits at source coordinate j * (n_src - 1) / (n_dst - 1)
    if n_src == 1:
        zeros = np.zeros(n_dst, dtype=np.intp)
        return zeros, zeros, np.zeros(n_dst)
    pos = np.arange(n_dst) * (n_src - 1) / (n_dst - 1)
    lo = np.minimum(np.floor(pos).astype(np.intp), n_src - 2)
    t = pos - lo
    return lo, lo + 1, t


def bilinear_array(x: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Corner-aligned bilinear resampling of the two trailing axes."""
    h2, w2 = (int(s) for s in size)
    if h2 < 2 or w2 < 2:
        raise DimensionError(f"target {h2}x{w2} smaller than 2x2")
    lo, hi, t = _linear_weights(x.shape[-2], h2)
    t = t[:, None]
    rows = x[..., lo, :] * (1.0 - t) + x[..., hi, :] * t
    lo, hi, t = _linear_weights(x.shape[-1], w2)
    return rows[..., lo] * (1.0 - t) + rows[..., hi] * t


def radial_wavenumber(h: int, w: int) -> np.ndarray:
    """Integer radial wavenumber ``round(|k|)`` of each FFT mode on an ``h x w`` grid."""
    ky = np.fft.fftfreq(h) * h
    kx = np.fft.fftfreq(w) * w
    return np.rint(np.hypot(ky[:, None], kx[None, :])).astype(np.intp)


def pool_average(f: Field, factor: int) -> Field:
    return Field(f.channels, pool_array(f.data, factor), f.spacing * factor)


def interp_bilinear(f: Field, target: tuple[int, int]) -> Field:
    h, _, dx = f.geometry
    out = bilinear_array(f.data, target)
    return Field(f.channels, out, dx * (h - 1) / (target[0] - 1) if h > 1 else dx)


def field_stats(f: Field | np.ndarray, names: Sequence[str] | None = None) -> ChannelStats:
    """Per-channel moments; variance uses the population convention."""
    if isinstance(f, Field):
        data, names = f.data, tuple(f.names)
    else:
        data = np.asarray(f)
        if data.ndim == 2:
            data = data[None]
        # (C, H, W) or (N, C, H, W): reduce everything except the channel axis
        names = tuple(names) if names is not None else tuple(f"c{i}" for i in range(data.shape[-3]))
    axes = tuple(i for i in range(data.ndim) if i != data.ndim - 3)
    if data.size == 0:
        raise DimensionError("field_stats of an empty field")
    d = data.astype(np.float64)
    return ChannelStats(
        names=tuple(names),
        mean=d.mean(axis=axes),
        var=d.var(axis=axes),
        min=d.min(axis=axes),
        max=d.max(axis=axes),
        count=int(np.prod([data.shape[a] for a in axes])),
    )


__all__ = [
    "ChannelSpec", "ChannelStats", "DimensionError", "Field", "bilinear_array", "channels",
    "check_grid_array", "field_stats", "interp_bilinear", "pool_array", "pool_average",
    "radial_wavenumber",
]
