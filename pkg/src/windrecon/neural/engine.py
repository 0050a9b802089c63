"""Reverse-mode autodiff over numpy arrays, sized for 15x15 fields.

A ``Tensor`` wraps an ndarray, records its parents, and carries a backward
closure; ``Tensor.backward()`` topologically sorts the graph and accumulates
gradients. Convolutions use im2col + matmul so the heavy lifting stays in
BLAS. The default dtype is switchable: float64 for gradient checking,
float32 for benchmark runs.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigError

__all__ = [
    "Tensor",
    "set_precision",
    "get_precision",
    "tensor",
    "relu",
    "leaky_relu",
    "softmax",
    "dense",
    "conv2d",
    "maxpool2x2",
    "upsample2x",
    "concat",
    "pad2d",
    "crop2d",
    "batchnorm2d",
    "layernorm",
    "multi_head_attention",
    "mean_squared_error",
    "mean_absolute_error",
    "Adam",
]

_DTYPE = np.float64
_PRECISIONS = {"f32": np.float32, "f64": np.float64}


def set_precision(name: str) -> None:
    """Select the default compute dtype: 'f32' or 'f64'."""
    global _DTYPE
    if name not in _PRECISIONS:
        raise ConfigError(f"unknown precision {name!r}, want one of {sorted(_PRECISIONS)}")
    _DTYPE = _PRECISIONS[name]


def get_precision() -> str:
    return "f32" if _DTYPE == np.float32 else "f64"


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False, _prev: tuple = ()):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _prev)
        self._backward = None
        self._prev = _prev

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(np.broadcast_to(g, self.data.shape))
        else:
            self.grad += g

    def backward(self) -> None:
        if self.data.size != 1:
            raise ConfigError("backward() requires a scalar loss")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in visited and p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self) -> None:
        self.grad = None

    # --- elementwise arithmetic -------------------------------------------

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = Tensor(self.data + other.data, _prev=(self, other))

        def _bwd(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g, other.data.shape))

        out._backward = _bwd
        return out

    __radd__ = __add__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        return self + (-other)

    def __rsub__(self, other):
        return Tensor(other) + (-self)

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = Tensor(self.data * other.data, _prev=(self, other))

        def _bwd(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g * self.data, other.data.shape))

        out._backward = _bwd
        return out

    __rmul__ = __mul__

    def __matmul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = Tensor(np.matmul(self.data, other.data), _prev=(self, other))

        def _bwd(g):
            if self.requires_grad:
                ga = np.matmul(g, np.swapaxes(other.data, -1, -2))
                self._accum(_unbroadcast(ga, self.data.shape))
            if other.requires_grad:
                gb = np.matmul(np.swapaxes(self.data, -1, -2), g)
                other._accum(_unbroadcast(gb, other.data.shape))

        out._backward = _bwd
        return out

    def __pow__(self, p: float):
        out = Tensor(self.data**p, _prev=(self,))

        def _bwd(g):
            if self.requires_grad:
                self._accum(g * p * self.data ** (p - 1))

        out._backward = _bwd
        return out

    def abs(self):
        out = Tensor(np.abs(self.data), _prev=(self,))

        def _bwd(g):
            if self.requires_grad:
                self._accum(g * np.sign(self.data))

        out._backward = _bwd
        return out

    # --- shape ops --------------------------------------------------------

    def reshape(self, *shape):
        out = Tensor(self.data.reshape(*shape), _prev=(self,))

        def _bwd(g):
            if self.requires_grad:
                self._accum(g.reshape(self.data.shape))

        out._backward = _bwd
        return out

    def transpose(self, *axes):
        out = Tensor(self.data.transpose(*axes), _prev=(self,))
        inv = np.argsort(axes)

        def _bwd(g):
            if self.requires_grad:
                self._accum(g.transpose(*inv))

        out._backward = _bwd
        return out

    def sum(self, axis=None, keepdims: bool = False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), _prev=(self,))

        def _bwd(g):
            if not self.requires_grad:
                return
            if axis is None:
                self._accum(np.broadcast_to(g, self.data.shape).copy())
                return
            gg = g
            if not keepdims:
                gg = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(gg, self.data.shape).copy())

        out._backward = _bwd
        return out

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the broadcast-source shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


# --- activations -----------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0), _prev=(x,))

    def _bwd(g):
        if x.requires_grad:
            x._accum(g * (x.data > 0))

    out._backward = _bwd
    return out


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    out = Tensor(np.where(x.data > 0, x.data, alpha * x.data), _prev=(x,))

    def _bwd(g):
        if x.requires_grad:
            x._accum(g * np.where(x.data > 0, 1.0, alpha))

    out._backward = _bwd
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, _prev=(x,))

    def _bwd(g):
        if x.requires_grad:
            dot = (g * y).sum(axis=axis, keepdims=True)
            x._accum(y * (g - dot))

    out._backward = _bwd
    return out


# --- dense -----------------------------------------------------------------


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x (..., d_in) @ w (d_in, d_out) + b."""
    out = x @ w
    if b is not None:
        out = out + b
    return out


# --- convolution and friends ------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d convolution, NCHW layout; w is (c_out, c_in, kh, kw)."""
    n, c_in, h, wid = x.data.shape
    c_out, c_in_w, kh, kw = w.data.shape
    if c_in != c_in_w:
        raise ConfigError(f"conv2d channel mismatch: input {c_in}, kernel {c_in_w}")
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ConfigError(f"conv2d output would be empty for input {h}x{wid}")
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c_in * kh * kw)
    wmat = w.data.reshape(c_out, -1)
    y = (cols @ wmat.T).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    if b is not None:
        y = y + b.data.reshape(1, c_out, 1, 1)
    prev = (x, w) if b is None else (x, w, b)
    out = Tensor(y, _prev=prev)

    def _bwd(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, c_out)
        if b is not None and b.requires_grad:
            b._accum(gmat.sum(axis=0))
        if w.requires_grad:
            w._accum((gmat.T @ cols).reshape(w.data.shape))
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, ho, wo, c_in, kh, kw)
            gxp = np.zeros((n, c_in, hp, wp), dtype=g.dtype)
            for di in range(kh):
                for dj in range(kw):
                    gxp[:, :, di : di + ho * stride : stride, dj : dj + wo * stride : stride] += (
                        gcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
                    )
            if padding:
                gxp = gxp[:, :, padding:-padding, padding:-padding]
            x._accum(gxp)

    out._backward = _bwd
    return out


def maxpool2x2(x: Tensor) -> Tensor:
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ConfigError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    ho, wo = h // 2, w // 2
    win = x.data.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    idx = win.argmax(axis=-1)
    out = Tensor(np.take_along_axis(win, idx[..., None], axis=-1)[..., 0], _prev=(x,))

    def _bwd(g):
        if not x.requires_grad:
            return
        gw = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        x._accum(gx)

    out._backward = _bwd
    return out


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour x2 upsampling."""
    n, c, h, w = x.data.shape
    out = Tensor(x.data.repeat(2, axis=2).repeat(2, axis=3), _prev=(x,))

    def _bwd(g):
        if x.requires_grad:
            x._accum(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    out._backward = _bwd
    return out


def concat(tensors: list[Tensor], axis: int = 1) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), _prev=tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def _bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    out._backward = _bwd
    return out


def pad2d(x: Tensor, bottom: int = 1, right: int = 1) -> Tensor:
    """Zero-pad the bottom/right spatial borders (15 -> 16 convention)."""
    out = Tensor(np.pad(x.data, ((0, 0), (0, 0), (0, bottom), (0, right))), _prev=(x,))
    h, w = x.data.shape[2], x.data.shape[3]

    def _bwd(g):
        if x.requires_grad:
            x._accum(g[:, :, :h, :w])

    out._backward = _bwd
    return out


def crop2d(x: Tensor, height: int, width: int) -> Tensor:
    """Keep the top-left height x width spatial block (16 -> 15 convention)."""
    out = Tensor(x.data[:, :, :height, :width].copy(), _prev=(x,))

    def _bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[:, :, :height, :width] = g
            x._accum(gx)

    out._backward = _bwd
    return out


# --- normalization -----------------------------------------------------------


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running: dict | None = None,
    training: bool = True,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode the batch statistics are used (and folded into
    ``running`` when given); in eval mode the running statistics are used.
    """
    n, c, h, w = x.data.shape
    axes = (0, 2, 3)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if running is not None:
            running["mean"] = (1 - momentum) * running["mean"] + momentum * mu
            running["var"] = (1 - momentum) * running["var"] + momentum * var
    else:
        if running is None:
            raise ConfigError("eval-mode batchnorm needs running statistics")
        mu, var = running["mean"], running["var"]
    mu_b = mu.reshape(1, c, 1, 1)
    inv = 1.0 / np.sqrt(var.reshape(1, c, 1, 1) + eps)
    xhat = (x.data - mu_b) * inv
    y = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)
    out = Tensor(y, _prev=(x, gamma, beta))
    m = n * h * w

    def _bwd(g):
        if beta.requires_grad:
            beta._accum(g.sum(axis=axes))
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=axes))
        if not x.requires_grad:
            return
        gxhat = g * gamma.data.reshape(1, c, 1, 1)
        if not training:
            x._accum(gxhat * inv)
            return
        sum_g = gxhat.sum(axis=axes, keepdims=True)
        sum_gx = (gxhat * xhat).sum(axis=axes, keepdims=True)
        x._accum(inv / m * (m * gxhat - sum_g - xhat * sum_gx))

    out._backward = _bwd
    return out


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with learnable scale/shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(gamma.data * xhat + beta.data, _prev=(x, gamma, beta))
    d = x.data.shape[-1]

    def _bwd(g):
        if beta.requires_grad:
            beta._accum(_unbroadcast(g, beta.data.shape))
        if gamma.requires_grad:
            gamma._accum(_unbroadcast(g * xhat, gamma.data.shape))
        if not x.requires_grad:
            return
        gxhat = g * gamma.data
        sum_g = gxhat.sum(axis=-1, keepdims=True)
        sum_gx = (gxhat * xhat).sum(axis=-1, keepdims=True)
        x._accum(inv / d * (d * gxhat - sum_g - xhat * sum_gx))

    out._backward = _bwd
    return out


# --- attention ----------------------------------------------------------------


def multi_head_attention(
    x: Tensor,
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
    n_heads: int,
) -> Tensor:
    """Standard multi-head self-attention on (batch, tokens, dim)."""
    b, t, d = x.data.shape
    if d % n_heads:
        raise ConfigError(f"embed dim {d} not divisible by {n_heads} heads")
    dh = d // n_heads

    def split(z: Tensor) -> Tensor:
        return z.reshape(b, t, n_heads, dh).transpose(0, 2, 1, 3)

    q = split(dense(x, wq, bq))
    k = split(dense(x, wk, bk))
    v = split(dense(x, wv, bv))
    att = softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh)), axis=-1)
    ctx = (att @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
    return dense(ctx, wo, bo)


# --- losses --------------------------------------------------------------------


def mean_squared_error(pred: Tensor, target: Tensor) -> Tensor:
    return ((pred - target) ** 2.0).mean()


def mean_absolute_error(pred: Tensor, target: Tensor) -> Tensor:
    return (pred - target).abs().mean()


# --- optimizer ------------------------------------------------------------------


class Adam:
    """Adam over a fixed parameter list; state keyed by parameter identity."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]
        self._scratch = [np.empty_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for p, m, v, scratch in zip(self.params, self._m, self._v, self._scratch):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            np.multiply(g, g, out=scratch)
            scratch *= 1 - self.beta2
            v += scratch
            np.divide(v, b2c, out=scratch)
            np.sqrt(scratch, out=scratch)
            scratch += self.eps
            np.divide(m, scratch, out=scratch)
            scratch *= self.lr / b1c
            p.data -= scratch

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
