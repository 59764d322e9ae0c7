"""3D convolution and transposed convolution.

Both are computed im2col-style: a strided sliding-window view of the
(padded) input is contracted against the kernel with ``np.tensordot``.  The
adjoint (col2im) scatters window contributions back with one strided
``+=`` per kernel offset, so there are only k**3 Python-level iterations.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import Tensor, as_tensor


class ShapeError(ValueError):
    pass


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def transpose_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n - 1) * stride - 2 * padding + k


def _windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    """(B, C, X, Y, Z) -> (B, C, Ox, Oy, Oz, k, k, k) view."""
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    return win[:, :, ::stride, ::stride, ::stride]


def _scatter(cols: np.ndarray, full_shape: tuple, k: int, stride: int) -> np.ndarray:
    """Adjoint of :func:`_windows`; ``cols`` is (B, Ox, Oy, Oz, C, k, k, k)."""
    out = np.zeros(full_shape, dtype=cols.dtype)
    _, ox, oy, oz = cols.shape[:4]
    for i in range(k):
        for j in range(k):
            for l in range(k):
                out[:, :, i:i + stride * (ox - 1) + 1:stride,
                    j:j + stride * (oy - 1) + 1:stride,
                    l:l + stride * (oz - 1) + 1:stride] += np.moveaxis(cols[..., i, j, l], 4, 1)
    return out


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))


def _crop(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return x[:, :, p:-p, p:-p, p:-p]


def _check(x: Tensor, w: Tensor, stride: int, padding: int, in_axis: int):
    if x.ndim != 5:
        raise ShapeError(f"input must be (B, C, X, Y, Z), got shape {x.shape}")
    if w.ndim != 5 or not (w.shape[2] == w.shape[3] == w.shape[4]):
        raise ShapeError(f"weight must have a cubic kernel, got shape {w.shape}")
    if x.shape[1] != w.shape[in_axis]:
        raise ShapeError(f"input has {x.shape[1]} channels, weight expects {w.shape[in_axis]}")
    if stride < 1 or padding < 0:
        raise ShapeError("stride must be >= 1 and padding >= 0")


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (B, Cin, X, Y, Z) with ``weight`` (Cout, Cin, k, k, k)."""
    x, weight = as_tensor(x), as_tensor(weight)
    _check(x, weight, stride, padding, 1)
    k = weight.shape[2]
    if min(x.shape[2:]) + 2 * padding < k:
        raise ShapeError(f"kernel {k} does not fit padded input {x.shape[2:]} (padding {padding})")
    xp = _pad(x.data, padding)
    win = _windows(xp, k, stride)
    out = np.moveaxis(np.tensordot(win, weight.data, axes=([1, 5, 6, 7], [1, 2, 3, 4])), 4, 1)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1, 1)
    out = np.ascontiguousarray(out, dtype=x.dtype)

    def backward(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3, 4], [0, 2, 3, 4])) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            cols = np.tensordot(np.moveaxis(g, 1, 4), weight.data, axes=([4], [0]))
            gx = _crop(_scatter(cols, xp.shape, k, stride), padding)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward)


def conv3d_transpose(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv3d` w.r.t. its input; ``weight`` is (Cin, Cout, k, k, k).

    Output spatial size is ``(X - 1) * stride - 2 * padding + k``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    _check(x, weight, stride, padding, 0)
    k = weight.shape[2]
    B = x.shape[0]
    full = tuple((n - 1) * stride + k for n in x.shape[2:])
    if min(full) - 2 * padding < 1:
        raise ShapeError(f"padding {padding} leaves no output for input {x.shape[2:]}")
    cout = weight.shape[1]
    cols = np.tensordot(np.moveaxis(x.data, 1, 4), weight.data, axes=([4], [0]))
    out = _crop(_scatter(cols, (B, cout) + full, k, stride), padding)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1, 1)
    out = np.ascontiguousarray(out, dtype=x.dtype)

    def backward(g):
        win = _windows(_pad(g, padding), k, stride)
        gx = None
        if x.requires_grad:
            gx = np.moveaxis(np.tensordot(win, weight.data, axes=([1, 5, 6, 7], [1, 2, 3, 4])), 4, 1)
        gw = np.tensordot(x.data, win, axes=([0, 2, 3, 4], [0, 2, 3, 4])) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward)
