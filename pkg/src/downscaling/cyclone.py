"""Vortex and front diagnostics: storm center, axisymmetric profile, cross sections."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .synth import vorticity


@dataclass(frozen=True)
class CenterEstimate:
    row: int
    col: int
    peak: float
    confident: bool

    def __iter__(self):
        return iter((self.row, self.col))

    def __getitem__(self, i):
        return (self.row, self.col)[i]


def _arr(f) -> np.ndarray:
    a = getattr(f, "data", f)
    a = np.asarray(a, dtype=np.float64)
    return a[0] if a.ndim == 3 else a


def find_center(u, v, smooth: float = 2.0, threshold: float = 3.0) -> CenterEstimate:
    """Argmax of Gaussian-smoothed vertical vorticity.

    The estimate is flagged as not confident when the smoothed peak does not
    exceed ``threshold`` times the standard deviation of the raw vorticity.
    """
    u, v = _arr(u), _arr(v)
    if u.shape != v.shape:
        raise ValueError("u and v geometry differ")
    vort = vorticity(u, v)
    sm = ndimage.gaussian_filter(vort, smooth, mode="nearest")
    r, c = np.unravel_index(int(np.argmax(sm)), sm.shape)
    peak = float(sm[r, c])
    sd = float(vort.std())
    confident = peak > 0 and sd > 0 and peak > threshold * sd
    return CenterEstimate(int(r), int(c), peak, bool(confident))


@dataclass(frozen=True)
class VortexProfile:
    radius: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    count: np.ndarray

    @property
    def v_max(self) -> float:
        return float(self.mean.max())

    @property
    def r_max(self) -> float:
        return float(self.radius[int(np.argmax(self.mean))])

    def rows(self) -> list[dict]:
        return [{"radius": float(r), "mean": float(m), "std": float(s)}
                for r, m, s in zip(self.radius, self.mean, self.std)]


def profile_edges(r_outer: float, bin_width: float = 1.0, min_count: int = 8) -> np.ndarray:
    """Annulus edges centered on multiples of ``bin_width``.

    Bins whose ideal area ``pi (r1^2 - r0^2)`` holds fewer than ``min_count``
    pixels are merged outward. Using the ideal area rather than realized
    counts keeps the edges independent of the center position.
    """
    raw = np.concatenate([[0.0], np.arange(0.5, r_outer / bin_width + 0.5) * bin_width])
    edges = [raw[0]]
    for e in raw[1:]:
        if np.pi * (e ** 2 - edges[-1] ** 2) >= min_count:
            edges.append(e)
    if len(edges) == 1:
        edges.append(raw[-1])
    return np.asarray(edges)


def _radii(shape, center) -> np.ndarray:
    yy, xx = np.indices(shape, dtype=np.float64)
    return np.hypot(yy - center[0], xx - center[1])


def azimuthal_profile(speed, center, bin_width: float = 1.0, r_outer: float | None = None,
                      min_count: int = 8) -> VortexProfile:
    """Annulus means of a scalar field around ``center``."""
    s = _arr(speed)
    h, w = s.shape
    cr, cc = float(center[0]), float(center[1])
    if not (0 <= cr <= h - 1 and 0 <= cc <= w - 1):
        raise ValueError(f"center {center} outside the {h}x{w} grid")
    if r_outer is None:
        r_outer = min(cr, cc, h - 1 - cr, w - 1 - cc) + 0.5
        r_outer = max(r_outer, 2 * bin_width)
    edges = profile_edges(r_outer, bin_width, min_count)
    r = _radii(s.shape, (cr, cc)).ravel()
    idx = np.digitize(r, edges) - 1
    keep = (idx >= 0) & (idx < len(edges) - 1)
    n = np.bincount(idx[keep], minlength=len(edges) - 1).astype(np.float64)
    tot = np.bincount(idx[keep], weights=s.ravel()[keep], minlength=len(edges) - 1)
    ok = n > 0
    mean = np.where(ok, tot / np.where(ok, n, 1.0), np.nan)
    centers = 0.5 * (edges[:-1] + edges[1:])
    centers[0] = 0.0
    return VortexProfile(centers[ok], mean[ok], np.zeros(int(ok.sum())), n[ok])


def ensemble_profile(u_members, v_members, bin_width: float = 1.0, r_outer: float | None = None,
                     center=None) -> VortexProfile:
    """Member-mean windspeed profile with the across-member standard deviation.

    Each member is profiled about its own vorticity center unless ``center``
    is given; bins are shared because edges depend only on the radius.
    """
    us = np.asarray(u_members, dtype=np.float64)
    vs = np.asarray(v_members, dtype=np.float64)
    if r_outer is None:
        r_outer = us.shape[-1] / 4.0
    profs = []
    for u, v in zip(us, vs):
        c = center if center is not None else tuple(find_center(u, v))
        profs.append(azimuthal_profile(np.hypot(u, v), c, bin_width, r_outer))
    nb = min(len(p.radius) for p in profs)
    m = np.stack([p.mean[:nb] for p in profs])
    return VortexProfile(profs[0].radius[:nb], m.mean(axis=0),
                         m.std(axis=0, ddof=1) if len(m) > 1 else np.zeros(nb),
                         profs[0].count[:nb])


@dataclass(frozen=True)
class CrossSection:
    distance: np.ndarray
    mean: np.ndarray
    lines: np.ndarray


def front_cross_section(f, angle: float, origin, n_lines: int = 20, half_length: float = 8.0,
                        spacing: float = 0.5, line_spread: float | None = None) -> CrossSection:
    """Average of ``n_lines`` parallel transects along the front normal.

    ``angle`` is the direction of the front normal (radians, x along
    columns); transect ``j`` is offset along the front by evenly spaced
    amounts spanning ``line_spread`` pixels. Values are sampled bilinearly.
    """
    a = _arr(f)
    h, w = a.shape
    oy, ox = float(origin[0]), float(origin[1])
    nx, ny = np.cos(angle), np.sin(angle)
    tx, ty = -ny, nx
    if line_spread is None:
        line_spread = 0.5 * min(h, w)
    offsets = np.linspace(-line_spread / 2, line_spread / 2, n_lines)
    s = np.arange(-half_length, half_length + spacing / 2, spacing)
    rows = oy + s[None, :] * ny + offsets[:, None] * ty
    cols = ox + s[None, :] * nx + offsets[:, None] * tx
    lines = ndimage.map_coordinates(a, [rows.ravel(), cols.ravel()], order=1, mode="nearest")
    lines = lines.reshape(n_lines, s.size)
    return CrossSection(s, lines.mean(axis=0), lines)
