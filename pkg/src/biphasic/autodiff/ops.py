"""Differentiable operators over :class:`Tensor`.

Every op computes its forward value with numpy and registers a closure that
maps the output gradient to one gradient per parent (``None`` for parents
that do not need one).  Images are NCHW throughout.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor

_make = Tensor._from_op


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# -- elementwise arithmetic -------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def back(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _make(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def back(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _make(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def back(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _make(a.data * b.data, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def back(g):
        return (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), back, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)

    def back(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _make(a.data**exponent, (a,), back, "pow")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if (a.data <= 0).any():
        raise ValueError(f"log of non-positive value at {a.node_name!r}")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clamp_min(a, lo: float) -> Tensor:
    """max(a, lo); the gradient is zero where the floor is active."""
    a = as_tensor(a)
    mask = a.data >= lo
    return _make(np.where(mask, a.data, lo), (a,), lambda g: (g * mask,), "clamp_min")


# -- activations ------------------------------------------------------------


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope)
    return _make(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.logaddexp(0.0, a.data), (a,), lambda g: (g * _sigmoid(a.data),), "softplus")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), back, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True))
    out = a.data - lse

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), back, "log_softmax")


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True))
    weights = np.exp(a.data - lse)
    out = lse if keepdims else np.squeeze(lse, axis=axis)

    def back(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * weights,)

    return _make(out, (a,), back, "logsumexp")


def norm(a, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at 0 is taken as 0."""
    a = as_tensor(a)
    out = np.sqrt(np.square(a.data).sum(axis=axis))

    def back(g):
        safe = np.where(out > 0, out, 1.0)
        scale = np.where(out > 0, g / safe, 0.0)
        return (np.expand_dims(scale, axis) * a.data,)

    return _make(out, (a,), back, "norm")


# -- reductions and shape ---------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        gk = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(gk, a.shape).copy(),)

    return _make(np.asarray(out), (a,), back, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def back(g):
        gk = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(gk / count, a.shape).copy(),)

    return _make(np.asarray(out), (a,), back, "mean")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {exc}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, tuple(shape)).copy()
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: {exc}") from None
    return _make(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, dtype=np.float64), (a,), back, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of zero tensors")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def back(g):
        pieces = np.split(g, bounds, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(pieces, ts))

    return _make(out, ts, back, "concat")


# -- linear algebra ---------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def back(g):
        return (
            g @ b.data.T if a.requires_grad else None,
            a.data.T @ g if b.requires_grad else None,
        )

    return _make(a.data @ b.data, (a, b), back, "matmul")


# Convolutions run channels-last on a flattened padded grid: every kernel tap
# is then a contiguous row slice, so a stride-1 conv is a sum of plain
# matmuls.  Stride s is reduced to stride 1 by space-to-depth, with kernels
# zero-padded to a multiple of s.


def _space_to_depth(x: np.ndarray, s: int) -> np.ndarray:
    if s == 1:
        return x
    n, h, w, c = x.shape
    return x.reshape(n, h // s, s, w // s, s, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, h // s, w // s, s * s * c)


def _depth_to_space(x: np.ndarray, s: int) -> np.ndarray:
    if s == 1:
        return x
    n, h, w, c = x.shape
    c0 = c // (s * s)
    return x.reshape(n, h, w, s, s, c0).transpose(0, 1, 3, 2, 4, 5).reshape(n, h * s, w * s, c0)


def _shift_weight(w: np.ndarray, s: int) -> np.ndarray:
    """(O, I, kh, kw) -> (kh', kw', s*s*I, O) taps over the space-to-depth grid."""
    o, i, kh, kw = w.shape
    kh2, kw2 = -(-kh // s) * s, -(-kw // s) * s
    hwio = np.zeros((kh2, kw2, i, o))
    hwio[:kh, :kw] = w.transpose(2, 3, 1, 0)
    return hwio.reshape(kh2 // s, s, kw2 // s, s, i, o).transpose(0, 2, 1, 3, 4, 5).reshape(kh2 // s, kw2 // s, s * s * i, o)


def _unshift_weight(wk: np.ndarray, s: int, shape: tuple[int, ...]) -> np.ndarray:
    o, i, kh, kw = shape
    a, b = wk.shape[:2]
    hwio = wk.reshape(a, b, s, s, i, o).transpose(0, 2, 1, 3, 4, 5).reshape(a * s, b * s, i, o)
    return np.ascontiguousarray(hwio[:kh, :kw].transpose(3, 2, 0, 1))


class _ConvGeometry:
    def __init__(self, h: int, w: int, kh: int, kw: int, stride: int, padding: int) -> None:
        s, p = stride, padding
        self.h, self.w, self.s, self.p = h, w, s, p
        self.ho = (h + 2 * p - kh) // s + 1
        self.wo = (w + 2 * p - kw) // s + 1
        if self.ho <= 0 or self.wo <= 0:
            raise ShapeError(f"conv: kernel {kh}x{kw} larger than padded input {h}x{w}")
        ka, kb = -(-kh // s), -(-kw // s)
        self.hs = max(-(-(h + 2 * p) // s), self.ho - 1 + ka)
        self.ws = max(-(-(w + 2 * p) // s), self.wo - 1 + kb)

    def pad_input(self, x: np.ndarray) -> np.ndarray:
        """NCHW -> zero-padded, space-to-depth NHWC grid."""
        n, c = x.shape[:2]
        out = np.zeros((n, self.hs * self.s, self.ws * self.s, c))
        out[:, self.p : self.p + self.h, self.p : self.p + self.w] = x.transpose(0, 2, 3, 1)
        return _space_to_depth(out, self.s)

    def unpad_input(self, grid: np.ndarray) -> np.ndarray:
        full = _depth_to_space(grid, self.s)
        return np.ascontiguousarray(full[:, self.p : self.p + self.h, self.p : self.p + self.w].transpose(0, 3, 1, 2))

    def full_grad(self, g: np.ndarray) -> np.ndarray:
        """NCHW output gradient -> flat (N*hs*ws, O), zero outside valid outputs."""
        n, o = g.shape[:2]
        out = np.zeros((n, self.hs, self.ws, o))
        out[:, : self.ho, : self.wo] = g.transpose(0, 2, 3, 1)
        return out.reshape(-1, o)


def _taps(wk: np.ndarray, row: int):
    for i in range(wk.shape[0]):
        for j in range(wk.shape[1]):
            yield i, j, i * row + j


def _shift_conv(grid: np.ndarray, wk: np.ndarray) -> np.ndarray:
    n, hs, ws, c = grid.shape
    flat = grid.reshape(-1, c)
    span = (wk.shape[0] - 1) * ws + wk.shape[1] - 1
    rows = flat.shape[0] - span
    out = np.zeros((flat.shape[0], wk.shape[3]))
    acc = out[:rows]
    for i, j, off in _taps(wk, ws):
        acc += flat[off : off + rows] @ wk[i, j]
    return out.reshape(n, hs, ws, -1)


def _shift_conv_dx(gflat: np.ndarray, wk: np.ndarray, grid_shape: tuple[int, ...]) -> np.ndarray:
    n, hs, ws, c = grid_shape
    span = (wk.shape[0] - 1) * ws + wk.shape[1] - 1
    rows = gflat.shape[0] - span
    g = gflat[:rows]
    out = np.zeros((gflat.shape[0], c))
    for i, j, off in _taps(wk, ws):
        out[off : off + rows] += g @ wk[i, j].T
    return out.reshape(grid_shape)


def _shift_conv_dw(grid: np.ndarray, gflat: np.ndarray, ka: int, kb: int) -> np.ndarray:
    n, hs, ws, c = grid.shape
    flat = grid.reshape(-1, c)
    span = (ka - 1) * ws + kb - 1
    rows = flat.shape[0] - span
    g = gflat[:rows]
    out = np.empty((ka, kb, c, gflat.shape[1]))
    for i in range(ka):
        for j in range(kb):
            off = i * ws + j
            out[i, j] = flat[off : off + rows].T @ g
    return out


def _conv_forward(x: np.ndarray, w: np.ndarray, geo: _ConvGeometry):
    grid = geo.pad_input(x)
    wk = _shift_weight(w, geo.s)
    out = _shift_conv(grid, wk)[:, : geo.ho, : geo.wo]
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), grid, wk


def _conv_input_grad(g: np.ndarray, wk: np.ndarray, geo: _ConvGeometry, in_channels: int) -> np.ndarray:
    grid_shape = (g.shape[0], geo.hs, geo.ws, geo.s * geo.s * in_channels)
    return geo.unpad_input(_shift_conv_dx(geo.full_grad(g), wk, grid_shape))


def _conv_weight_grad(grid: np.ndarray, g: np.ndarray, geo: _ConvGeometry, w_shape: tuple[int, ...]) -> np.ndarray:
    wk_shape = _shift_weight(np.zeros(w_shape), geo.s).shape
    dwk = _shift_conv_dw(grid, geo.full_grad(g), wk_shape[0], wk_shape[1])
    return _unshift_weight(dwk, geo.s, w_shape)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation; ``w`` is (out_channels, in_channels, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    b = None if b is None else as_tensor(b)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    geo = _ConvGeometry(x.shape[2], x.shape[3], w.shape[2], w.shape[3], stride, padding)
    out, grid, wk = _conv_forward(x.data, w.data, geo)
    if b is not None:
        out += b.data[None, :, None, None]

    def back(g):
        dx = dw = db = None
        if x.requires_grad:
            dx = _conv_input_grad(g, wk, geo, x.shape[1])
        if w.requires_grad:
            dw = _conv_weight_grad(grid, g, geo, w.shape)
        if b is not None and b.requires_grad:
            db = g.sum(axis=(0, 2, 3))
        return dx, dw, db

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, back, "conv2d")


def conv_transpose2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution (adjoint of conv2d); ``w`` is (in_channels, out_channels, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    b = None if b is None else as_tensor(b)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose2d: input {x.shape} incompatible with weight {w.shape}")
    n, cin, h, wd = x.shape
    _, cout, kh, kw = w.shape
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (wd - 1) * stride - 2 * padding + kw
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv_transpose2d: empty output for input {x.shape}")
    # the matching forward conv maps (cout, ho, wo) images to (cin, h, w)
    geo = _ConvGeometry(ho, wo, kh, kw, stride, padding)
    if (geo.ho, geo.wo) != (h, wd):
        raise ShapeError(f"conv_transpose2d: input {h}x{wd} is not reachable with stride {stride}")
    wk = _shift_weight(w.data, stride)
    out = _conv_input_grad(x.data, wk, geo, cout)
    if b is not None:
        out += b.data[None, :, None, None]

    def back(g):
        dx = dw = db = None
        grid = geo.pad_input(g)
        if x.requires_grad:
            full = _shift_conv(grid, wk)[:, :h, :wd]
            dx = np.ascontiguousarray(full.transpose(0, 3, 1, 2))
        if w.requires_grad:
            dw = _conv_weight_grad(grid, x.data, geo, w.shape)
        if b is not None and b.requires_grad:
            db = g.sum(axis=(0, 2, 3))
        return dx, dw, db

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, back, "conv_transpose2d")


# -- resampling -------------------------------------------------------------


def avg_pool2d(x, k: int = 2) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d: {h}x{w} not divisible by {k}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def back(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)

    return _make(out, (x,), back, "avg_pool2d")


def upsample_nearest(x, scale: int = 2) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, scale, axis=2), scale, axis=3)

    def back(g):
        return (g.reshape(n, c, h, scale, w, scale).sum(axis=(3, 5)),)

    return _make(out, (x,), back, "upsample_nearest")


@lru_cache(maxsize=None)
def bilinear_matrix(size: int, scale: int) -> np.ndarray:
    """Row-stochastic (size*scale, size) interpolation matrix, half-pixel centres."""
    out = np.zeros((size * scale, size))
    for dst in range(size * scale):
        src = max((dst + 0.5) / scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), size - 1)
        i1 = min(i0 + 1, size - 1)
        frac = src - i0
        out[dst, i0] += 1.0 - frac
        out[dst, i1] += frac
    out.setflags(write=False)
    return out


def upsample_bilinear(x, scale: int = 2) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample_bilinear expects NCHW, got {x.shape}")
    uh = bilinear_matrix(x.shape[2], scale)
    uw = bilinear_matrix(x.shape[3], scale)
    out = np.matmul(np.matmul(uh, x.data), uw.T)

    def back(g):
        return (np.matmul(np.matmul(uh.T, g), uw),)

    return _make(out, (x,), back, "upsample_bilinear")


# -- normalization ----------------------------------------------------------


def instance_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"instance_norm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    centred = x.data - mu
    inv_std = 1.0 / np.sqrt((centred * centred).mean(axis=(2, 3), keepdims=True) + eps)
    xhat = centred * inv_std
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def back(g):
        dx = dgamma = dbeta = None
        if x.requires_grad:
            gx = g * gamma.data[None, :, None, None]
            dx = inv_std * (
                gx - gx.mean(axis=(2, 3), keepdims=True) - xhat * (gx * xhat).mean(axis=(2, 3), keepdims=True)
            )
        if gamma.requires_grad:
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
        if beta.requires_grad:
            dbeta = g.sum(axis=(0, 2, 3))
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), back, "instance_norm")
