"""Differentiable operations.

Every op returns a new :class:`Tensor` carrying a closure that maps the output
gradient to one gradient per parent (``None`` for non-differentiable inputs).
Loss-style reductions run in float64 and cast back to the storage dtype.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor


# when a list, relu masks and maxpool argmaxes are appended (used by grad_check)
_kink_log: Optional[list] = None


class record_kinks:
    """Collect the piecewise-linear branch choices made while the block runs."""

    def __enter__(self) -> list:
        global _kink_log
        self._saved = _kink_log
        _kink_log = []
        return _kink_log

    def __exit__(self, *exc):
        global _kink_log
        _kink_log = self._saved
        return False


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return Tensor(a.data + b.data, (a, b), lambda g: (g, g), op="add")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor(a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),), op="scale")


def tsum(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(dtype=np.float64))

    def back(g):
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype),)

    return Tensor(out, (a,), back, op="sum")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _kink_log is not None:
        _kink_log.append(mask)
    return Tensor(np.maximum(x.data, 0), (x,), lambda g: (g * mask,), op="relu")


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: (N, C, H, W) -> (N, C)."""
    if x.data.ndim != 4:
        raise ValueError(f"global_avg_pool expects NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), dtype=np.float64)

    def back(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).astype(x.data.dtype),)

    return Tensor(out, (x,), back, op="gap")


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` with x (B, D), weight (D, K), bias (K,)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"affine: cannot multiply {x.shape} by {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ValueError(f"affine: bias shape {bias.shape} does not match {weight.shape[1]} outputs")
    xd, wd = x.data, weight.data
    out = xd @ wd + bias.data

    def back(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0, dtype=np.float64).astype(g.dtype)

    return Tensor(out, (x, weight, bias), back, op="affine")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    """(N, C, H, W) -> (N, C*kh*kw, OH*OW) patch matrix."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, oh, ow = win.shape[:4]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, oh * ow)
    return cols, oh, ow


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Cross-correlation of NCHW input with (O, C, kh, kw) weights."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weights, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    o, wc, kh, kw = weight.shape
    if wc != c:
        raise ValueError(f"conv2d: input has {c} channels, weights expect {wc}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"conv2d: bias shape {bias.shape}, expected ({o},)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols, oh, ow = _im2col(xp, kh, kw, stride)
    wmat = weight.data.reshape(o, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, o, oh, ow)

    def back(g):
        g3 = g.reshape(n, o, oh * ow)
        dw = np.tensordot(g3, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        dcols = np.matmul(wmat.T, g3).reshape(n, c, kh, kw, oh, ow)
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride] += dcols[:, :, i, j]
        dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        grads = [dx, dw]
        if bias is not None:
            grads.append(g3.sum(axis=(0, 2), dtype=np.float64).astype(g.dtype))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor(out, parents, back, op="conv2d")


def maxpool2d(x: Tensor, window: int = 2, stride: Optional[int] = None) -> Tensor:
    """Per-window maximum; gradient goes to the first maximal element."""
    stride = window if stride is None else stride
    if x.data.ndim != 4:
        raise ValueError(f"maxpool2d expects NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ValueError(f"maxpool2d: window {window} larger than input {h}x{w}")
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1

    def view(arr, k):
        i, j = divmod(k, window)
        return arr[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride]

    out = view(x.data, 0).copy()
    for k in range(1, window * window):
        np.maximum(out, view(x.data, k), out=out)

    def first_hits():
        # yields (offset, mask) with each output claimed by its first maximal element
        taken = np.zeros(out.shape, dtype=bool)
        for k in range(window * window):
            hit = view(x.data, k) == out
            hit &= ~taken
            taken |= hit
            yield k, hit

    if _kink_log is not None:
        arg = np.zeros(out.shape, dtype=np.int32)
        for k, hit in first_hits():
            arg[hit] = k
        _kink_log.append(arg)

    def back(g):
        dx = np.zeros(x.shape, dtype=g.dtype)
        for k, hit in first_hits():
            view(dx, k)[...] += g * hit
        return (dx,)

    return Tensor(out, (x,), back, op="maxpool2d")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax64(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(
    logits: Tensor,
    labels: Sequence[int],
    mask: Optional[Sequence[float]] = None,
) -> Tensor:
    """Mask-weighted mean cross-entropy over rows whose mask is positive.

    Rows with zero mask contribute neither to the value nor the gradient; the
    divisor is the number of positive-mask rows, so scaling the mask by c scales
    the loss and gradients by c.
    """
    if logits.data.ndim != 2:
        raise ValueError(f"softmax_cross_entropy expects (B, K) logits, got {logits.shape}")
    b, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (b,):
        raise ValueError(f"expected {b} labels, got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    m = np.ones(b) if mask is None else np.asarray(mask, dtype=np.float64)
    if m.shape != (b,) or (m < 0).any():
        raise ValueError("mask must have one non-negative weight per row")
    active = int((m > 0).sum())
    logp = _log_softmax64(logits.data)
    rows = np.arange(b)
    if active == 0:
        value = 0.0
    else:
        value = float(-(m * logp[rows, labels]).sum() / active)

    def back(g):
        if active == 0:
            return (np.zeros(logits.shape, dtype=logits.data.dtype),)
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        d *= (m / active)[:, None]
        return ((d * float(g)).astype(logits.data.dtype),)

    return Tensor(np.asarray(value), (logits,), back, op="softmax_ce")


def entropy(logits: Tensor, mask: Optional[Sequence[bool]] = None) -> Tensor:
    """Mean Shannon entropy of the row softmax distributions (natural log).

    ``mask`` restricts the mean to selected rows; with no selected rows the
    value and gradient are zero.
    """
    if logits.data.ndim != 2:
        raise ValueError(f"entropy expects (B, K) logits, got {logits.shape}")
    b = logits.shape[0]
    sel = np.ones(b, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    active = int(sel.sum())
    logq = _log_softmax64(logits.data)
    q = np.exp(logq)
    h = -(q * logq).sum(axis=1)
    value = float(h[sel].sum() / active) if active else 0.0

    def back(g):
        if active == 0:
            return (np.zeros(logits.shape, dtype=logits.data.dtype),)
        d = -q * (logq + h[:, None])
        d *= (sel / active)[:, None]
        return ((d * float(g)).astype(logits.data.dtype),)

    return Tensor(np.asarray(value), (logits,), back, op="entropy")
