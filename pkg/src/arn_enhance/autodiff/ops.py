"""Differentiable primitives.

No broadcasting: elementwise binary ops need equal shapes. The one
exception is :func:`bias_add`, which adds a vector along the last axis.
"""

from __future__ import annotations

import numpy as np

from .. import dsp
from . import _lstm_kernels
from .tensor import Tensor, as_tensor, make_result


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _swap(x):
    return np.swapaxes(x, -1, -2)


def matmul(a, b) -> Tensor:
    """``a @ b``; *a* may carry leading batch axes, *b* is 2-D or batched like *a*."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def vjp(g):
        ga = g @ _swap(B) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if B.ndim == 2:
                k, n = B.shape
                gb = A.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _swap(A) @ g
        return ga, gb

    return make_result(A @ B, (a, b), vjp, "matmul")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    A, B = a.data, b.data
    return make_result(A * B, (a, b), lambda g: (g * B, g * A), "mul")


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    return make_result(x.data * c, (x,), lambda g: (g * c,), "scale")


def bias_add(x, b) -> Tensor:
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim != 1 or b.shape[0] != x.shape[-1]:
        raise ValueError(f"bias_add: bias {b.shape} does not match last axis of {x.shape}")
    n = b.shape[0]
    return make_result(x.data + b.data, (x, b), lambda g: (g, g.reshape(-1, n).sum(0)), "bias_add")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return make_result(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def _sigmoid(z):
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return make_result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return make_result(y, (x,), lambda g: (g * y,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise ValueError("log of non-positive value")
    X = x.data
    return make_result(np.log(X), (x,), lambda g: (g / X,), "log")


def abs(x) -> Tensor:
    """Absolute value with subgradient 0 at 0."""
    x = as_tensor(x)
    s = np.sign(x.data)
    return make_result(np.abs(x.data), (x,), lambda g: (g * s,), "abs")


def softmax(x) -> Tensor:
    x = as_tensor(x)
    y = x.data - x.data.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)

    def vjp(g):
        gy = g * y
        gy -= y * gy.sum(axis=-1, keepdims=True)
        return (gy,)

    return make_result(y, (x,), vjp, "softmax")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ValueError(f"layer_norm: gain/bias must have shape ({n},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    G = gain.data

    def vjp(g):
        dxhat = g * G
        dx = inv * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
        return dx, (g * xhat).reshape(-1, n).sum(0), g.reshape(-1, n).sum(0)

    return make_result(xhat * G + bias.data, (x, gain, bias), vjp, "layer_norm")


def concat(xs, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return make_result(np.concatenate([x.data for x in xs], axis=axis), xs, vjp, "concat")


def slice(x, index) -> Tensor:
    x = as_tensor(x)
    shape, dtype = x.shape, x.dtype

    def vjp(g):
        out = np.zeros(shape, dtype=dtype)
        out[index] += g
        return (out,)

    return make_result(np.array(x.data[index]), (x,), vjp, "slice")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_result(np.ascontiguousarray(np.transpose(x.data, axes)), (x,),
                       lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def dropout(x, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; the identity when not training or when ``p == 0``."""
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def sum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.asarray(x.data.sum(axis=axis)), (x,), vjp, "sum")


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / count)


def frame(x, frame_len: int, hop: int) -> Tensor:
    """Differentiable :func:`arn_enhance.dsp.frame_array` over the last axis."""
    x = as_tensor(x)
    m = x.shape[-1]
    return make_result(dsp.frame_array(x.data, frame_len, hop), (x,),
                       lambda g: (dsp.ola_sum(g, hop, m),), "frame")


def overlap_add(x, hop: int, length: int) -> Tensor:
    """Count-normalized overlap-add of ``(..., T, L)`` frames to ``(..., length)``."""
    x = as_tensor(x)
    t, frame_len = x.shape[-2:]
    if dsp.num_frames(length, frame_len, hop) != t:
        raise ValueError(f"{t} frames do not match a {length}-sample signal")
    counts = dsp.overlap_counts(t, frame_len, hop, length).astype(x.dtype)
    out = dsp.ola_sum(x.data, hop, length) / counts
    return make_result(out, (x,), lambda g: (dsp.frame_array(g / counts, frame_len, hop),), "overlap_add")


def lstm(x, w_ih, w_hh, b, reverse: bool = False) -> Tensor:
    """Single-direction LSTM over axis 1 of a ``(B, T, D)`` input.

    Gate layout along the ``4H`` axis is input, forget, cell, output.
    Zero initial state. Backward is explicit backpropagation through time.
    """
    x, w_ih, w_hh, b = (as_tensor(v) for v in (x, w_ih, w_hh, b))
    if x.ndim != 3:
        raise ValueError(f"lstm expects (B, T, D) input, got {x.shape}")
    hid = w_hh.shape[0]
    if w_ih.shape != (x.shape[2], 4 * hid) or w_hh.shape != (hid, 4 * hid) or b.shape != (4 * hid,):
        raise ValueError("lstm: weight shapes inconsistent with input")
    X, Wih = x.data, w_ih.data
    dt = np.result_type(X, Wih, w_hh.data)
    Whh = np.ascontiguousarray(w_hh.data, dtype=dt)
    pre = np.ascontiguousarray(X @ Wih + b.data, dtype=dt)
    gates, cells, tcells, hs = _lstm_kernels.lstm_forward(pre, Whh, reverse)

    def vjp(dh):
        dpre, dwhh = _lstm_kernels.lstm_backward(np.ascontiguousarray(dh, dtype=dt), gates, cells,
                                                 tcells, hs, Whh, reverse)
        flat = dpre.reshape(-1, 4 * hid)
        dx = dpre @ Wih.T if x.requires_grad else None
        return dx, X.reshape(-1, X.shape[2]).T @ flat, dwhh, flat.sum(0)

    return make_result(hs, (x, w_ih, w_hh, b), vjp, "lstm")


__all__ = [
    "abs", "add", "bias_add", "concat", "dropout", "exp", "frame", "layer_norm", "log", "lstm",
    "matmul", "mean", "mul", "overlap_add", "reshape", "scale", "sigmoid", "slice", "softmax",
    "sub", "sum", "tanh", "transpose",
]
