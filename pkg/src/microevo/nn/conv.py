"""N-d cross-correlation and its transpose as differentiable ops.

Layouts follow the usual channels-first convention: inputs ``(B, C, *S)``,
convolution weights ``(C_out, C_in, *K)``, transposed-convolution weights
``(C_in, C_out, *K)``. Both directions are built from the same two
primitives, a strided window view (im2col without the copy) and a
scatter-add over kernel offsets in a fixed order.

Stride-1 convolutions take a faster route: on the flattened padded grid every
kernel offset is a contiguous shift, so each offset costs one batched matmul
and no gather. A stride-1 transposed convolution is a convolution with the
flipped, channel-swapped kernel.
"""

from __future__ import annotations

import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor


def _tuple(v, n: int) -> tuple[int, ...]:
    if isinstance(v, int):
        return (v,) * n
    v = tuple(int(i) for i in v)
    if len(v) != n:
        raise ValueError(f"expected {n} values, got {v}")
    return v


def conv_output_shape(spatial, kernel, stride, padding) -> tuple[int, ...]:
    return tuple((s + 2 * p - k) // st + 1 for s, k, st, p in zip(spatial, kernel, stride, padding))


def deconv_output_shape(spatial, kernel, stride, padding, output_padding) -> tuple[int, ...]:
    return tuple((s - 1) * st - 2 * p + k + op for s, k, st, p, op in zip(spatial, kernel, stride, padding, output_padding))


def _windows(xp: np.ndarray, kernel, stride, out_shape) -> np.ndarray:
    """View of shape ``(B, C, *out_shape, *kernel)``."""
    n = len(kernel)
    win = sliding_window_view(xp, kernel, axis=tuple(range(2, 2 + n)))
    sl = (slice(None), slice(None)) + tuple(slice(0, o * s, s) for o, s in zip(out_shape, stride))
    return win[sl]


def _scatter(cols: np.ndarray, buf: np.ndarray, kernel, stride, out_shape) -> None:
    """Add ``cols`` of shape ``(C, *kernel, B, *out_shape)`` into ``buf`` (B, C, *full)."""
    for k in itertools.product(*(range(kk) for kk in kernel)):
        sl = (slice(None), slice(None)) + tuple(slice(ki, ki + o * s, s) for ki, o, s in zip(k, out_shape, stride))
        piece = cols[(slice(None),) + k]  # (C, B, *out)
        buf[sl] += np.swapaxes(piece, 0, 1)


def _pad(x: np.ndarray, padding) -> np.ndarray:
    if not any(padding):
        return x
    return np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in padding])


def _crop(x: np.ndarray, padding) -> np.ndarray:
    if not any(padding):
        return x
    return x[(slice(None), slice(None)) + tuple(slice(p, x.shape[2 + i] - p) for i, p in enumerate(padding))]


def _offsets(kernel, full) -> list[tuple[tuple[int, ...], int]]:
    """Kernel offsets and their shifts on the row-major flattened ``full`` grid."""
    flat = np.cumprod((1,) + tuple(full[::-1]))[:-1][::-1]
    return [(k, int(np.dot(k, flat))) for k in itertools.product(*(range(kk) for kk in kernel))]


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` for ``a`` (O, C) and stacked ``b`` (B, C, L); rank-1 case by broadcasting."""
    return a * b if a.shape[1] == 1 else np.matmul(a, b)


def _conv_shift(x: Tensor, w: Tensor, b: Tensor | None, padding) -> Tensor:
    """Stride-1 cross-correlation by shifted matmuls on the flattened padded input."""
    n = w.ndim - 2
    kernel = w.shape[2:]
    xp = np.ascontiguousarray(_pad(x.data, padding))
    B, C = xp.shape[:2]
    full = xp.shape[2:]
    out_shape = tuple(f - k + 1 for f, k in zip(full, kernel))
    offs = _offsets(kernel, full)
    span = offs[-1][1]
    L = int(np.prod(full)) - span  # flat positions whose every shifted read stays in range
    X = xp.reshape(B, C, -1)
    wd = w.data
    # contiguous (O, C) block per offset keeps matmul on the BLAS path
    wk = np.ascontiguousarray(np.moveaxis(wd.reshape(wd.shape[0], C, -1), -1, 0))
    Y = np.zeros((B, w.shape[0], L), xp.dtype)
    for i, (_, sh) in enumerate(offs):
        Y += _mm(wk[i], X[:, :, sh : sh + L])
    Yf = np.zeros((B, w.shape[0], int(np.prod(full))), xp.dtype)
    Yf[:, :, :L] = Y
    crop = (slice(None), slice(None)) + tuple(slice(0, o) for o in out_shape)
    out = Yf.reshape((B, w.shape[0]) + full)[crop]
    if b is not None:
        out = out + b.data.reshape((1, -1) + (1,) * n)
    out = np.ascontiguousarray(out)

    def back(g):
        G = np.zeros((B, w.shape[0]) + full, g.dtype)
        G[crop] = g
        G = G.reshape(B, w.shape[0], -1)[:, :, :L]
        G = np.ascontiguousarray(G)
        gX = np.zeros_like(X)
        gw = np.empty_like(wd)
        wkT = np.ascontiguousarray(wk.transpose(0, 2, 1))
        for i, (k, sh) in enumerate(offs):
            gX[:, :, sh : sh + L] += _mm(wkT[i], G)
            gw[(slice(None), slice(None)) + k] = np.matmul(G, X[:, :, sh : sh + L].transpose(0, 2, 1)).sum(axis=0)
        gx = _crop(gX.reshape(xp.shape), padding)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=tuple([0] + list(range(2, 2 + n))))

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._make(out, parents, back)


def conv(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation over the trailing ``w.ndim - 2`` axes of ``x``."""
    n = w.ndim - 2
    if x.ndim != n + 2:
        raise ValueError(f"conv: input {x.shape} does not match a {n}-d kernel {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv: input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
    kernel = w.shape[2:]
    stride, padding = _tuple(stride, n), _tuple(padding, n)
    out_shape = conv_output_shape(x.shape[2:], kernel, stride, padding)
    if min(out_shape) < 1:
        raise ValueError(f"conv: kernel {kernel} larger than padded input {x.shape[2:]}")
    if all(s == 1 for s in stride):
        return _conv_shift(x, w, b, padding)
    return _conv_gather(x, w, b, stride, padding, out_shape)


def _conv_gather(x: Tensor, w: Tensor, b: Tensor | None, stride, padding, out_shape) -> Tensor:
    n = w.ndim - 2
    kernel = w.shape[2:]
    xp = _pad(x.data, padding)
    win = _windows(xp, kernel, stride, out_shape)
    wd = w.data
    red = list(range(2 + n, 2 + 2 * n))
    out = np.tensordot(win, wd, axes=([1] + red, [1] + list(range(2, 2 + n))))  # (B, *out, O)
    out = np.moveaxis(out, -1, 1)
    if b is not None:
        out = out + b.data.reshape((1, -1) + (1,) * n)
    out = np.ascontiguousarray(out)
    sp = list(range(2, 2 + n))

    def back(g):
        gw = np.tensordot(g, win, axes=([0] + sp, [0] + sp))  # (O, C, *K)
        cols = np.tensordot(wd, g, axes=([0], [1]))  # (C, *K, B, *out)
        gxp = np.zeros(xp.shape, xp.dtype)
        _scatter(cols, gxp, kernel, stride, out_shape)
        gx = _crop(gxp, padding)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=tuple([0] + sp))

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._make(out, parents, back)


def conv_transpose(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0, output_padding=0) -> Tensor:
    """Adjoint of :func:`conv` with respect to its input, plus an optional bias."""
    n = w.ndim - 2
    if x.ndim != n + 2:
        raise ValueError(f"conv_transpose: input {x.shape} does not match a {n}-d kernel {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"conv_transpose: input has {x.shape[1]} channels, kernel expects {w.shape[0]}")
    kernel = w.shape[2:]
    stride, padding, output_padding = _tuple(stride, n), _tuple(padding, n), _tuple(output_padding, n)
    in_shape = x.shape[2:]
    full = tuple((s - 1) * st + k + op for s, k, st, op in zip(in_shape, kernel, stride, output_padding))
    if any(f - 2 * p < 1 for f, p in zip(full, padding)):
        raise ValueError("conv_transpose: padding removes the whole output")
    if all(s == 1 for s in stride) and not any(output_padding) and all(p < k for p, k in zip(padding, kernel)):
        flip = (slice(None), slice(None)) + (slice(None, None, -1),) * n
        wf = w.transpose((1, 0) + tuple(range(2, 2 + n)))[flip]
        return _conv_shift(x, wf, b, tuple(k - 1 - p for k, p in zip(kernel, padding)))
    wd = w.data
    cols = np.tensordot(wd, x.data, axes=([0], [1]))  # (Cout, *K, B, *S)
    buf = np.zeros((x.shape[0], w.shape[1]) + full, x.data.dtype)
    _scatter(cols, buf, kernel, stride, in_shape)
    out = _crop(buf, padding)
    if b is not None:
        out = out + b.data.reshape((1, -1) + (1,) * n)
    out = np.ascontiguousarray(out)
    sp = list(range(2, 2 + n))
    red = list(range(2 + n, 2 + 2 * n))
    xd = x.data

    def back(g):
        gp = _pad(g, padding)
        win = _windows(gp, kernel, stride, in_shape)  # (B, Cout, *S, *K)
        gx = np.moveaxis(np.tensordot(win, wd, axes=([1] + red, [1] + sp)), -1, 1)
        gw = np.tensordot(xd, win, axes=([0] + sp, [0] + sp))  # (Cin, Cout, *K)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=tuple([0] + sp))

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._make(out, parents, back)
