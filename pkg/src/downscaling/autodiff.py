"""Small reverse-mode differentiation engine over numpy arrays.

Only the operators needed by the encoder-decoder network are provided. Each
operator is a :class:`Function` subclass with a ``forward`` that returns a
numpy array and a ``backward`` that maps the output gradient to one gradient
per input (``None`` for inputs that need none).

Image tensors are channels-last, ``(N, H, W, C)``, and convolution kernels
are ``(kh, kw, C_in, C_out)``; with that layout each kernel tap is one
matrix product over all pixels.

Graph nodes carry a creation counter. Because a node is always created after
its inputs, visiting nodes by decreasing counter is a reverse topological
order, which makes the backward pass deterministic.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

_counter = itertools.count()


class ContractError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_ctx", "_parents", "_fn", "id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._ctx = None
        self._parents: tuple[Tensor | None, ...] = ()
        self._fn: type[Function] | None = None
        self.id = next(_counter)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._fn is None

    def __repr__(self) -> str:
        op = self._fn.__name__ if self._fn else "leaf"
        return f"Tensor(shape={self.shape}, op={op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Function:
    """Base class for a differentiable operator."""

    @staticmethod
    def forward(ctx: dict, *args, **kwargs) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(ctx: dict, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        tensors = tuple(as_tensor(x) for x in inputs)
        ctx: dict = {}
        out = Tensor(cls.forward(ctx, *(t.data for t in tensors), **kwargs))
        if any(t.requires_grad for t in tensors):
            out.requires_grad = True
            out._ctx = ctx
            out._parents = tensors
            out._fn = cls
        return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Add(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx["shapes"] = (a.shape, b.shape)
        return a + b

    @staticmethod
    def backward(ctx, grad):
        sa, sb = ctx["shapes"]
        return _unbroadcast(grad, sa), _unbroadcast(grad, sb)


class Mul(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx["a"], ctx["b"] = a, b
        return a * b

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx["a"], ctx["b"]
        return _unbroadcast(grad * b, a.shape), _unbroadcast(grad * a, b.shape)


class SiLU(Function):
    @staticmethod
    def forward(ctx, x):
        s = expit(x)
        ctx["x"], ctx["s"] = x, s
        return x * s

    @staticmethod
    def backward(ctx, grad):
        x, s = ctx["x"], ctx["s"]
        return (grad * s * (1.0 + x * (1.0 - s)),)


class Reshape(Function):
    @staticmethod
    def forward(ctx, x, shape):
        ctx["shape"] = x.shape
        return x.reshape(shape)

    @staticmethod
    def backward(ctx, grad):
        return (grad.reshape(ctx["shape"]),)


class Transpose(Function):
    @staticmethod
    def forward(ctx, x, axes):
        ctx["axes"] = axes
        return np.ascontiguousarray(x.transpose(axes))

    @staticmethod
    def backward(ctx, grad):
        return (grad.transpose(np.argsort(ctx["axes"])),)


class Concat(Function):
    """Concatenate along the channel axis (last axis)."""

    @staticmethod
    def forward(ctx, *xs):
        ctx["splits"] = np.cumsum([x.shape[-1] for x in xs])[:-1]
        return np.concatenate(xs, axis=-1)

    @staticmethod
    def backward(ctx, grad):
        return tuple(np.split(grad, ctx["splits"], axis=-1))


class AvgPool2(Function):
    @staticmethod
    def forward(ctx, x):
        b, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ContractError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
        return x.reshape(b, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    @staticmethod
    def backward(ctx, grad):
        g = 0.25 * grad
        return (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2),)


class Upsample2(Function):
    """Nearest-neighbour 2x upsampling."""

    @staticmethod
    def forward(ctx, x):
        return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)

    @staticmethod
    def backward(ctx, grad):
        b, h, w, c = grad.shape
        return (grad.reshape(b, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4)),)


class Linear(Function):
    """``x @ W.T + b`` with ``x`` of shape (B, in) and ``W`` of shape (out, in)."""

    @staticmethod
    def forward(ctx, x, w, b):
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
            raise ContractError(f"linear shape mismatch: x{x.shape} W{w.shape} b{b.shape}")
        ctx["x"], ctx["w"] = x, w
        return x @ w.T + b

    @staticmethod
    def backward(ctx, grad):
        x, w = ctx["x"], ctx["w"]
        return grad @ w, grad.T @ x, grad.sum(axis=0)


class Conv2d(Function):
    """2-D cross-correlation, one matrix product per kernel tap."""

    @staticmethod
    def forward(ctx, x, w, b, stride=1, padding=0):
        if x.ndim != 4 or w.ndim != 4 or x.shape[-1] != w.shape[2] or b.shape != (w.shape[3],):
            raise ContractError(f"conv2d shape mismatch: x{x.shape} W{w.shape} b{b.shape}")
        n, h, wd, c = x.shape
        kh, kw, _, o = w.shape
        s, p = int(stride), int(padding)
        ho = (h + 2 * p - kh) // s + 1
        wo = (wd + 2 * p - kw) // s + 1
        if ho < 1 or wo < 1:
            raise ContractError("conv2d kernel larger than padded input")
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        out = np.empty((n, ho, wo, o), dtype=np.result_type(x, w))
        out[...] = b
        for i in range(kh):
            for j in range(kw):
                out += xp[:, i:i + s * ho:s, j:j + s * wo:s, :] @ w[i, j]
        ctx.update(xp=xp, w=w, s=s, p=p, ho=ho, wo=wo)
        return out

    @staticmethod
    def backward(ctx, grad):
        xp, w, s, p, ho, wo = (ctx[k] for k in ("xp", "w", "s", "p", "ho", "wo"))
        n, hp, wp, c = xp.shape
        kh, kw, _, o = w.shape
        g2 = grad.reshape(-1, o)
        gw = np.empty_like(w)
        gx = np.zeros(xp.shape, dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                win = (slice(None), slice(i, i + s * ho, s), slice(j, j + s * wo, s))
                gx[win] += grad @ w[i, j].T
                gw[i, j] = np.ascontiguousarray(xp[win]).reshape(-1, c).T @ g2
        gb = g2.sum(axis=0)
        if p:
            gx = gx[:, p:hp - p, p:wp - p]
        return gx, gw, gb


class Dropout(Function):
    @staticmethod
    def forward(ctx, x, mask):
        ctx["mask"] = mask
        return x * mask

    @staticmethod
    def backward(ctx, grad):
        return (grad * ctx["mask"],)


class MSE(Function):
    """Mean of ``weight * (pred - target)**2``; ``weight`` broadcasts against pred."""

    @staticmethod
    def forward(ctx, pred, target, weight=None):
        if pred.shape != target.shape:
            raise ContractError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
        diff = pred - target
        wsq = diff * diff if weight is None else weight * diff * diff
        ctx.update(diff=diff, weight=weight, n=diff.size)
        return np.asarray(wsq.mean())

    @staticmethod
    def backward(ctx, grad):
        diff, weight, n = ctx["diff"], ctx["weight"], ctx["n"]
        g = (2.0 / n) * grad * diff
        if weight is not None:
            g = g * weight
        return g, -g


def add(a, b) -> Tensor:
    return Add.apply(a, b)


def mul(a, b) -> Tensor:
    return Mul.apply(a, b)


def silu(x) -> Tensor:
    return SiLU.apply(x)


def reshape(x, shape) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


def transpose(x, axes) -> Tensor:
    return Transpose.apply(x, axes=tuple(axes))


def concat(xs: Sequence) -> Tensor:
    return Concat.apply(*xs)


def avg_pool2(x) -> Tensor:
    return AvgPool2.apply(x)


def upsample2(x) -> Tensor:
    return Upsample2.apply(x)


def linear(x, w, b) -> Tensor:
    return Linear.apply(x, w, b)


def conv2d(x, w, b, stride: int = 1, padding: int = 0) -> Tensor:
    return Conv2d.apply(x, w, b, stride=stride, padding=padding)


def dropout(x, rate: float, rng: np.random.Generator) -> Tensor:
    x = as_tensor(x)
    if rate <= 0:
        return x
    keep = rng.random(x.shape) >= rate
    return Dropout.apply(x, mask=(keep / (1.0 - rate)).astype(x.data.dtype))


def mse_loss(pred, target, weight=None) -> Tensor:
    return MSE.apply(pred, target, weight=weight)


def _graph(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t.id in seen or not t.requires_grad:
            continue
        seen[t.id] = t
        stack.extend(p for p in t._parents if p is not None)
    return [seen[k] for k in sorted(seen, reverse=True)]


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires-grad leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for node in _graph(loss):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._fn.backward(node._ctx, g)):
            if parent is None or pg is None or not parent.requires_grad:
                continue
            grads[parent.id] = pg if parent.id not in grads else grads[parent.id] + pg
        node._ctx = None


def grad_check(fn: Callable[[dict[str, Tensor]], Tensor], params: dict[str, np.ndarray],
               n_samples: int = 20, eps: float = 1e-5, seed: int = 0,
               names: Iterable[str] | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps a dict of leaf tensors to a scalar loss. ``n_samples`` entries
    are checked per parameter array. Errors are
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)``; entries where
    both gradients are below ``1e-9`` in absolute value count as exact.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
    loss = fn(leaves)
    backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in (names if names is not None else params):
        arr = params[k]
        analytic = leaves[k].grad if leaves[k].grad is not None else np.zeros_like(arr)
        flat = arr.reshape(-1)
        idx = rng.choice(flat.size, size=min(n_samples, flat.size), replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            up = float(fn({n: Tensor(v) for n, v in params.items()}).data)
            flat[i] = old - eps
            down = float(fn({n: Tensor(v) for n, v in params.items()}).data)
            flat[i] = old
            numeric = (up - down) / (2 * eps)
            a = float(analytic.reshape(-1)[i])
            if abs(a) < 1e-9 and abs(numeric) < 1e-9:
                continue
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-12))
    return worst


OPERATORS = {
    "add": Add, "mul": Mul, "silu": SiLU, "reshape": Reshape, "transpose": Transpose, "concat": Concat,
    "avg_pool2": AvgPool2, "upsample2": Upsample2, "linear": Linear, "conv2d": Conv2d,
    "dropout": Dropout, "mse": MSE,
}
