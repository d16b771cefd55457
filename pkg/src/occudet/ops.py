"""Differentiable numeric primitives on plain numpy arrays.

Every operation follows the same convention: ``op(...) -> (out, vjp)`` where
``vjp(d_out)`` returns the gradients with respect to each differentiable
input, in argument order.  Backward passes are hand-written; there is no
tape.  Arrays keep whatever float dtype they come in with, so the same code
runs the float32 training path and the float64 shadow path used by the
gradient checker.

Outputs are checked for NaN/Inf and raise ``NonFiniteError`` instead of
propagating silently.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

Array = np.ndarray
Vjp = Callable


class NonFiniteError(FloatingPointError):
    """An operation produced (or was fed) NaN or Inf."""


def ensure_finite(name: str, arr: Array) -> Array:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {name}")
    return arr


@dataclass
class Param:
    """A trainable tensor with its gradient accumulator."""

    name: str
    value: Array
    grad: Array = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ValueError(f"grad shape {self.grad.shape} != value shape "
                             f"{self.value.shape} for {self.name}")

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def dense(x: Array, w: Array, b: Array | None = None):
    """y = x @ w (+ b).  x: (..., k), w: (k, m), b: (m,)."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"dense: x last dim {x.shape[-1]} != w rows {w.shape[0]}")
    y = x @ w
    if b is not None:
        y = y + b
    ensure_finite("dense", y)

    def vjp(dy: Array):
        dx = dy @ w.T
        x2 = x.reshape(-1, x.shape[-1])
        dy2 = dy.reshape(-1, w.shape[1])
        dw = x2.T @ dy2
        if b is None:
            return dx, dw
        db = dy2.sum(axis=0)
        return dx, dw, db

    return y, vjp


def relu(x: Array):
    y = np.maximum(x, 0.0)

    def vjp(dy: Array):
        return (dy * (x > 0),)

    return y, vjp


def sigmoid(x: Array):
    y = 0.5 * (np.tanh(0.5 * x) + 1.0)  # stable for large |x|

    def vjp(dy: Array):
        return (dy * y * (1.0 - y),)

    return y, vjp


def softmax(x: Array, axis: int):
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    ensure_finite("softmax", y)

    def vjp(dy: Array):
        dot = (dy * y).sum(axis=axis, keepdims=True)
        return (y * (dy - dot),)

    return y, vjp


def softmax_vjp_only(y: Array, dy: Array, axis: int) -> Array:
    """Backward of softmax given its output; used when probs were cached."""
    dot = (dy * y).sum(axis=axis, keepdims=True)
    return y * (dy - dot)


def layer_norm(x: Array, gamma: Array, beta: Array, axis: int = 0,
               eps: float = 1e-5):
    """Normalize over one axis; gamma/beta are 1-D of that axis' length."""
    n = x.shape[axis]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ValueError("layer_norm: gamma/beta must match normalized axis")
    shape = [1] * x.ndim
    shape[axis] = n
    g = gamma.reshape(shape)
    bt = beta.reshape(shape)

    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = g * xhat + bt
    ensure_finite("layer_norm", y)

    def vjp(dy: Array):
        dxhat = dy * g
        m1 = dxhat.mean(axis=axis, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=axis, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        other = tuple(i for i in range(x.ndim) if i != axis)
        dgamma = (dy * xhat).sum(axis=other)
        dbeta = dy.sum(axis=other)
        return dx, dgamma, dbeta

    return y, vjp


def _check_kernel(k: tuple[int, ...]) -> None:
    for kk in k:
        if kk % 2 != 1:
            raise ValueError(f"kernel sizes must be odd, got {k}")


def _conv_nd(x: Array, w: Array, b: Array | None, stride: int, nd: int,
             name: str):
    """Shared direct convolution: zero padding k//2, stride 1 or 2,
    one im2col gather + one matmul per call."""
    B, cin = x.shape[:2]
    spatial = x.shape[2:]
    cout, cin_w = w.shape[:2]
    kernel = w.shape[2:]
    _check_kernel(kernel)
    if cin != cin_w:
        raise ValueError(f"{name}: {cin} input channels vs kernel {cin_w}")
    if stride not in (1, 2):
        raise ValueError(f"{name}: stride must be 1 or 2")
    pads = tuple(k // 2 for k in kernel)
    outs = tuple((s + 2 * p - k) // stride + 1
                 for s, p, k in zip(spatial, pads, kernel))
    xp = np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in pads))
    n_out = int(np.prod(outs))
    taps = list(np.ndindex(*kernel))

    def tap_slice(t):
        return (slice(None), slice(None)) + tuple(
            slice(t[d], t[d] + stride * outs[d], stride) for d in range(nd))

    cols = np.empty((len(taps), B, cin, n_out), dtype=x.dtype)
    for ti, t in enumerate(taps):
        cols[ti] = xp[tap_slice(t)].reshape(B, cin, n_out)
    # column layout must match the (cout, cin, *kernel) weight flattening
    w_m = w.reshape(cout, cin * len(taps))
    cols_cm = np.ascontiguousarray(
        cols.transpose(1, 2, 0, 3)).reshape(B, cin * len(taps), n_out)
    y = np.matmul(w_m, cols_cm).reshape((B, cout) + outs)
    if b is not None:
        y += b.reshape((1, cout) + (1,) * nd)
    ensure_finite(name, y)

    def vjp(dy: Array):
        dy_m = dy.reshape(B, cout, n_out)
        dw = np.einsum("bon,bcn->oc", dy_m, cols_cm,
                       optimize=False).reshape(w.shape) if B > 1 else \
            (dy_m[0] @ cols_cm[0].T).reshape(w.shape)
        d_cols = np.matmul(w_m.T, dy_m)  # (B, cin*taps, n_out)
        d_cols = d_cols.reshape(B, cin, len(taps), n_out)
        dxp = np.zeros_like(xp)
        for ti, t in enumerate(taps):
            dxp[tap_slice(t)] += d_cols[:, :, ti].reshape((B, cin) + outs)
        dx = dxp[(slice(None), slice(None)) + tuple(
            slice(p, p + s) for p, s in zip(pads, spatial))]
        if b is None:
            return dx, dw
        return dx, dw, dy.sum(axis=(0,) + tuple(range(2, 2 + nd)))

    return y, vjp


def conv2d(x: Array, w: Array, b: Array | None = None, stride: int = 1):
    """Direct 2-D convolution with zero padding k//2.

    x: (B, Cin, H, W); w: (Cout, Cin, kh, kw) with odd kh/kw; stride 1 or 2.
    Output spatial dims: (H + 2*(k//2) - k)//stride + 1.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d expects (B, C, H, W) and (Co, Ci, kh, kw)")
    return _conv_nd(x, w, b, stride, 2, "conv2d")


def conv3d(x: Array, w: Array, b: Array | None = None, stride: int = 1):
    """Direct 3-D convolution, zero padding k//2, stride 1 or 2.

    x: (B, Cin, X, Y, Z); w: (Cout, Cin, kx, ky, kz) with odd kernels.
    """
    if x.ndim != 5 or w.ndim != 5:
        raise ValueError("conv3d expects (B, C, X, Y, Z) and 5-D kernels")
    return _conv_nd(x, w, b, stride, 3, "conv3d")


def channel_mix(x: Array, w: Array, b: Array | None = None):
    """1x1 "convolution": mix the leading channel axis of a (C, *spatial) map.

    w: (Cout, Cin).  Cheaper and clearer than a full conv call for the many
    pointwise projections in the pipeline.
    """
    cin = x.shape[0]
    if w.shape[1] != cin:
        raise ValueError(f"channel_mix: {cin} channels vs w {w.shape}")
    y = np.tensordot(w, x, axes=(1, 0))
    if b is not None:
        y += b.reshape((-1,) + (1,) * (x.ndim - 1))
    ensure_finite("channel_mix", y)

    def vjp(dy: Array):
        dx = np.tensordot(w.T, dy, axes=(1, 0))
        dw = np.tensordot(dy.reshape(dy.shape[0], -1),
                          x.reshape(cin, -1).T, axes=(1, 0))
        if b is None:
            return dx, dw
        db = dy.reshape(dy.shape[0], -1).sum(axis=1)
        return dx, dw, db

    return y, vjp


def upsample_nearest(x: Array, factor: int, spatial_axes: tuple[int, ...]):
    """Nearest-neighbor upsampling along the given axes; exact and cheap."""
    y = x
    for ax in spatial_axes:
        y = np.repeat(y, factor, axis=ax)

    def vjp(dy: Array):
        d = dy
        for ax in spatial_axes:
            shape = list(d.shape)
            shape[ax] = shape[ax] // factor
            shape.insert(ax + 1, factor)
            d = d.reshape(shape).sum(axis=ax + 1)
        return (d,)

    return y, vjp
