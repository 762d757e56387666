"""Conditioned encoder-decoder network and noise-level preconditioning.

The network ``F`` is a small residual UNet: an input convolution, one
residual block per resolution level on the way down, a middle block, and one
residual block per level on the way up with skip concatenation. In diffusion
mode a noise-level embedding (two dense layers on the scalar ``c_noise``)
adds a per-channel bias inside every residual block; in regression mode
that path does not exist, so the output cannot depend on a noise level.

``Denoiser.__call__`` implements the preconditioned map::

    D(z; sigma, y) = c_skip * z + c_out * F(c_in * z, c_noise, y)
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autodiff as ad

N_EMBED = 4


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class NetSpec:
    depth: int = 4
    base_width: int = 32
    channel_mult: tuple[int, ...] = (1, 2, 2, 2)
    c_out: int = 4
    c_cond: int = 7
    n_embed: int = N_EMBED
    noise_width: int = 64

    def __post_init__(self):
        object.__setattr__(self, "channel_mult", tuple(int(m) for m in self.channel_mult))
        if self.depth < 1 or len(self.channel_mult) != self.depth:
            raise SpecError(f"channel_mult {self.channel_mult} must have depth={self.depth} entries")
        if self.base_width < 1 or self.c_out < 1 or self.c_cond < 0:
            raise SpecError("widths and channel counts must be positive")

    @property
    def widths(self) -> list[int]:
        return [self.base_width * m for m in self.channel_mult]

    def check_size(self, h: int, w: int) -> None:
        k = 2 ** (self.depth - 1)
        if h % k or w % k:
            raise SpecError(f"spatial size {h}x{w} not divisible by 2**(depth-1)={k}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mult"] = list(self.channel_mult)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetSpec":
        return cls(**d)


def positional_embedding(h: int, w: int) -> np.ndarray:
    """``(4, h, w)``: sin/cos of column then sin/cos of row, one period across the domain."""
    col = 2 * np.pi * np.arange(w) / w
    row = 2 * np.pi * np.arange(h) / h
    ones = np.ones((h, w))
    return np.stack([
        np.sin(col)[None, :] * ones,
        np.cos(col)[None, :] * ones,
        np.sin(row)[:, None] * ones,
        np.cos(row)[:, None] * ones,
    ])


def _block_shapes(prefix: str, cin: int, cout: int, emb: int | None) -> list[tuple[str, tuple]]:
    shapes = [
        (f"{prefix}.conv1.w", (3, 3, cin, cout)), (f"{prefix}.conv1.b", (cout,)),
        (f"{prefix}.conv2.w", (3, 3, cout, cout)), (f"{prefix}.conv2.b", (cout,)),
    ]
    if emb:
        shapes += [(f"{prefix}.emb.w", (cout, emb)), (f"{prefix}.emb.b", (cout,))]
    if cin != cout:
        shapes += [(f"{prefix}.skip.w", (1, 1, cin, cout)), (f"{prefix}.skip.b", (cout,))]
    return shapes


def layer_shapes(spec: NetSpec, diffusion: bool) -> "OrderedDict[str, tuple]":
    widths = spec.widths
    cin = spec.c_cond + spec.n_embed + (spec.c_out if diffusion else 0)
    emb = spec.noise_width if diffusion else None
    shapes: list[tuple[str, tuple]] = [("in.w", (3, 3, cin, widths[0])), ("in.b", (widths[0],))]
    if emb:
        shapes += [("noise0.w", (emb, 1)), ("noise0.b", (emb,)),
                   ("noise1.w", (emb, emb)), ("noise1.b", (emb,))]
    cur = widths[0]
    for lvl, wl in enumerate(widths):
        shapes += _block_shapes(f"enc{lvl}", cur, wl, emb)
        cur = wl
    shapes += _block_shapes("mid", cur, cur, emb)
    for lvl in reversed(range(spec.depth)):
        shapes += _block_shapes(f"dec{lvl}", cur + widths[lvl], widths[lvl], emb)
        cur = widths[lvl]
    shapes += [("out.w", (3, 3, cur, spec.c_out)), ("out.b", (spec.c_out,))]
    return OrderedDict(shapes)


def init_params(spec: NetSpec, diffusion: bool, seed: int,
                dtype=np.float32) -> "OrderedDict[str, np.ndarray]":
    """He (fan-in) initialisation for weights, zeros for biases."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 11]))
    params = OrderedDict()
    for name, shape in layer_shapes(spec, diffusion).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        fan_in = int(np.prod(shape[:-1])) if len(shape) == 4 else shape[1]
        std = np.sqrt(2.0 / fan_in)
        if name.endswith("conv2.w") or name == "out.w":
            std *= 0.5  # keep residual branches and the output small at init
        params[name] = (rng.standard_normal(shape) * std).astype(dtype)
    return params


class UNet:
    """The raw network ``F``; holds parameters, builds a graph per call."""

    def __init__(self, spec: NetSpec, params: dict, diffusion: bool):
        self.spec = spec
        self.diffusion = diffusion
        self.params = params

    def __call__(self, x, c_noise=None, leaves: dict | None = None, dropout: float = 0.0,
                 rng: np.random.Generator | None = None) -> ad.Tensor:
        P = leaves if leaves is not None else {k: ad.Tensor(v) for k, v in self.params.items()}
        x = np.asarray(x.data if isinstance(x, ad.Tensor) else x)
        self.spec.check_size(*x.shape[-2:])
        x = np.ascontiguousarray(x.transpose(0, 2, 3, 1))  # channels-last inside
        emb = None
        if self.diffusion:
            if c_noise is None:
                raise ValueError("diffusion network needs a noise label")
            lab = np.broadcast_to(np.asarray(c_noise, dtype=x.dtype).reshape(-1, 1),
                                  (x.shape[0], 1))
            emb = ad.silu(ad.linear(lab, P["noise0.w"], P["noise0.b"]))
            emb = ad.silu(ad.linear(emb, P["noise1.w"], P["noise1.b"]))

        def block(prefix, h):
            r = ad.conv2d(ad.silu(h), P[f"{prefix}.conv1.w"], P[f"{prefix}.conv1.b"], padding=1)
            if emb is not None:
                e = ad.linear(emb, P[f"{prefix}.emb.w"], P[f"{prefix}.emb.b"])
                r = r + ad.reshape(e, (e.shape[0], 1, 1, e.shape[1]))
            r = ad.silu(r)
            if dropout > 0 and rng is not None:
                r = ad.dropout(r, dropout, rng)
            r = ad.conv2d(r, P[f"{prefix}.conv2.w"], P[f"{prefix}.conv2.b"], padding=1)
            skip = h
            if f"{prefix}.skip.w" in P:
                skip = ad.conv2d(h, P[f"{prefix}.skip.w"], P[f"{prefix}.skip.b"])
            return skip + r

        h = ad.conv2d(x, P["in.w"], P["in.b"], padding=1)
        skips = []
        for lvl in range(self.spec.depth):
            if lvl > 0:
                h = ad.avg_pool2(h)
            h = block(f"enc{lvl}", h)
            skips.append(h)
        h = block("mid", h)
        for lvl in reversed(range(self.spec.depth)):
            if lvl < self.spec.depth - 1:
                h = ad.upsample2(h)
            h = block(f"dec{lvl}", ad.concat([h, skips[lvl]]))
        out = ad.conv2d(ad.silu(h), P["out.w"], P["out.b"], padding=1)
        return ad.transpose(out, (0, 3, 1, 2))


def edm_coefficients(sigma, sigma_data):
    """Return ``c_skip, c_out, c_in, c_noise`` for noise level(s) ``sigma``."""
    sigma = np.asarray(sigma, dtype=np.float64)
    sd = np.asarray(sigma_data, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    denom = sigma ** 2 + sd ** 2
    c_skip = sd ** 2 / denom
    c_out = sigma * sd / np.sqrt(denom)
    c_in = 1.0 / np.sqrt(denom)
    c_noise = np.log(sigma) / 4.0
    return c_skip, c_out, c_in, c_noise


def _bcast(sigma, batch: int) -> np.ndarray:
    s = np.asarray(sigma, dtype=np.float64).reshape(-1)
    if s.size == 1:
        s = np.full(batch, s[0])
    return s.reshape(batch, 1, 1, 1)


class Denoiser:
    """A conditioned network in ``regression`` or ``diffusion`` mode.

    ``cond`` arrays are already at fine resolution, ``(B, c_cond, H, W)``; the
    positional embedding is appended here.
    """

    def __init__(self, spec: NetSpec, params: dict, mode: str = "diffusion", sigma_data=1.0):
        if mode not in ("regression", "diffusion"):
            raise ValueError(f"mode must be 'regression' or 'diffusion', got {mode!r}")
        self.spec = spec
        self.mode = mode
        self.params = params
        self.sigma_data = np.broadcast_to(np.asarray(sigma_data, dtype=np.float64),
                                          (spec.c_out,)).copy()
        self.net = UNet(spec, params, diffusion=(mode == "diffusion"))
        self._embed_cache: dict = {}

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def embedding(self, batch: int, h: int, w: int, dtype) -> np.ndarray:
        key = (h, w, np.dtype(dtype).str)
        if key not in self._embed_cache:
            self._embed_cache[key] = positional_embedding(h, w).astype(dtype)
        return np.broadcast_to(self._embed_cache[key], (batch, self.spec.n_embed, h, w))

    def net_input(self, cond: np.ndarray, z_scaled: np.ndarray | None = None) -> np.ndarray:
        cond = np.asarray(cond)
        b, _, h, w = cond.shape
        parts = [] if z_scaled is None else [np.asarray(z_scaled, dtype=cond.dtype)]
        parts += [cond, self.embedding(b, h, w, cond.dtype)]
        return np.concatenate(parts, axis=1)

    def forward_tensor(self, z, sigma, cond, leaves=None, dropout=0.0, rng=None) -> ad.Tensor:
        """Graph-building version of ``__call__`` used for training."""
        cond = np.asarray(cond)
        if self.mode == "regression":
            return self.net(self.net_input(cond), leaves=leaves, dropout=dropout, rng=rng)
        b = cond.shape[0]
        c_skip, c_out, c_in, c_noise = edm_coefficients(_bcast(sigma, b), self.sigma_data[None, :, None, None])
        dt = cond.dtype
        x = self.net_input(cond, (c_in * z).astype(dt))
        f = self.net(x, c_noise.reshape(-1).astype(dt), leaves=leaves, dropout=dropout, rng=rng)
        return ad.add((c_skip * z).astype(dt), ad.mul(f, c_out.astype(dt)))

    def __call__(self, z, sigma, cond) -> np.ndarray:
        return self.forward_tensor(z, sigma, cond).data

    def predict(self, cond) -> np.ndarray:
        if self.mode != "regression":
            raise ValueError("predict() is for regression-mode denoisers")
        return self.forward_tensor(None, None, cond).data

    def astype(self, dtype) -> "Denoiser":
        return Denoiser(self.spec, OrderedDict((k, v.astype(dtype)) for k, v in self.params.items()),
                        self.mode, self.sigma_data)


def build_network(spec: NetSpec, seed: int, mode: str = "diffusion", sigma_data=1.0,
                  dtype=np.float32) -> Denoiser:
    params = init_params(spec, mode == "diffusion", seed, dtype)
    return Denoiser(spec, params, mode, sigma_data)


def precondition(raw_net, z, sigma, cond, sigma_data=1.0) -> np.ndarray:
    """Apply the skip/output/input scalings around an arbitrary raw network.

    ``raw_net(x_scaled, c_noise, cond)`` returns an array shaped like ``z``.
    """
    z = np.asarray(z, dtype=np.float64)
    s = _bcast(sigma, z.shape[0])
    c_skip, c_out, c_in, c_noise = edm_coefficients(s, np.asarray(sigma_data)[..., None, None])
    return c_skip * z + c_out * np.asarray(raw_net(c_in * z, c_noise.reshape(-1), cond))


def with_channels(spec: NetSpec, c_out: int, c_cond: int) -> NetSpec:
    return replace(spec, c_out=c_out, c_cond=c_cond)
