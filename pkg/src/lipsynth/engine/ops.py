"""Fused neural-net ops: convolutions, pooling, LSTM, batch norm, |STFT|.

Each op calls the active kernel backend for data movement and keeps the
matmuls in numpy/BLAS. Gradients for unused parents are skipped (e.g. no
input gradient is formed for a first conv layer over raw pixels).
"""

from __future__ import annotations

import numpy as np

from .. import dsp
from .backend import kernels as K
from .tensor import Tensor, make_op


def conv1d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    """x (B, Cin, L), w (Cout, Cin//groups, K) -> (B, Cout, Lo)."""
    bs, cin, length = x.data.shape
    cout, cg, k = w.data.shape
    cols = K.im2col1d(x.data, k, stride, padding, dilation)  # (B, Cin, K, Lo)
    lo = cols.shape[-1]
    cols_r = cols.reshape(bs, groups, cg * k, lo)
    w_r = w.data.reshape(groups, cout // groups, cg * k)
    y = np.matmul(w_r, cols_r).reshape(bs, cout, lo)
    if b is not None:
        y += b.data[:, None]

    def vjp(g):
        g_r = g.reshape(bs, groups, cout // groups, lo)
        dw = None
        if w.requires_grad:
            dw = np.matmul(g_r, cols_r.swapaxes(-1, -2)).sum(axis=0).reshape(w.data.shape)
        dx = None
        if x.requires_grad:
            dcols = np.matmul(w_r.swapaxes(-1, -2), g_r).reshape(bs, cin, k, lo)
            dx = K.col2im1d(dcols, length, stride, padding, dilation)
        db = g.sum(axis=(0, 2)) if b is not None and b.requires_grad else None
        return (dx, dw, db) if b is not None else (dx, dw)

    parents = (x, w) if b is None else (x, w, b)
    return make_op(y, parents, vjp)


def conv_transpose1d(
    x: Tensor, w: Tensor, b: Tensor | None, stride: int, padding: int
) -> Tensor:
    """x (B, Cin, L), w (Cin, Cout, K) -> (B, Cout, (L-1)*stride - 2*padding + K)."""
    bs, cin, length = x.data.shape
    _, cout, k = w.data.shape
    lout = (length - 1) * stride - 2 * padding + k
    w_r = w.data.reshape(cin, cout * k)
    cols = np.matmul(w_r.T, x.data).reshape(bs, cout, k, length)
    y = K.col2im1d(cols, lout, stride, padding, 1)
    if b is not None:
        y += b.data[:, None]

    def vjp(g):
        dcols = K.im2col1d(g, k, stride, padding, 1)  # (B, Cout, K, L)
        dcols_r = dcols.reshape(bs, cout * k, length)
        dx = np.matmul(w_r, dcols_r) if x.requires_grad else None
        dw = None
        if w.requires_grad:
            dw = np.tensordot(x.data, dcols_r, axes=([0, 2], [0, 2])).reshape(w.data.shape)
        db = g.sum(axis=(0, 2)) if b is not None and b.requires_grad else None
        return (dx, dw, db) if b is not None else (dx, dw)

    parents = (x, w) if b is None else (x, w, b)
    return make_op(y, parents, vjp)


def conv2d(
    x: Tensor, w: Tensor, b: Tensor | None, stride: tuple, padding: tuple
) -> Tensor:
    """x (B, C, H, W), w (O, C, KH, KW); stride/padding are (h, w) pairs."""
    bs, cin, h, wd = x.data.shape
    cout, _, kh, kw = w.data.shape
    sh, sw = stride
    ph, pw = padding
    cols = K.im2col2d(x.data, kh, kw, sh, sw, ph, pw)
    ho, wo = cols.shape[-2:]
    cols_r = cols.reshape(bs, cin * kh * kw, ho * wo)
    w_r = w.data.reshape(cout, cin * kh * kw)
    y = np.matmul(w_r, cols_r).reshape(bs, cout, ho, wo)
    if b is not None:
        y += b.data[:, None, None]

    def vjp(g):
        g_r = g.reshape(bs, cout, ho * wo)
        dw = None
        if w.requires_grad:
            dw = np.tensordot(g_r, cols_r, axes=([0, 2], [0, 2])).reshape(w.data.shape)
        dx = None
        if x.requires_grad:
            dcols = np.matmul(w_r.T, g_r).reshape(bs, cin, kh, kw, ho, wo)
            dx = K.col2im2d(dcols, h, wd, sh, sw, ph, pw)
        db = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        return (dx, dw, db) if b is not None else (dx, dw)

    parents = (x, w) if b is None else (x, w, b)
    return make_op(y, parents, vjp)


def conv3d(
    x: Tensor, w: Tensor, b: Tensor | None, stride: tuple, padding: tuple
) -> Tensor:
    """x (B, C, D, H, W), w (O, C, KD, KH, KW); stride/padding are (d, h, w)."""
    bs, cin, d, h, wd = x.data.shape
    cout, _, kd, kh, kw = w.data.shape
    sd, sh, sw = stride
    pd, ph, pw = padding
    cols = K.im2col3d(x.data, kd, kh, kw, sd, sh, sw, pd, ph, pw)
    do, ho, wo = cols.shape[-3:]
    cols_r = cols.reshape(bs, cin * kd * kh * kw, do * ho * wo)
    w_r = w.data.reshape(cout, cin * kd * kh * kw)
    y = np.matmul(w_r, cols_r).reshape(bs, cout, do, ho, wo)
    if b is not None:
        y += b.data[:, None, None, None]

    def vjp(g):
        g_r = g.reshape(bs, cout, do * ho * wo)
        dw = None
        if w.requires_grad:
            dw = np.tensordot(g_r, cols_r, axes=([0, 2], [0, 2])).reshape(w.data.shape)
        dx = None
        if x.requires_grad:
            dcols = np.matmul(w_r.T, g_r).reshape(bs, cin, kd, kh, kw, do, ho, wo)
            dx = K.col2im3d(dcols, d, h, wd, sd, sh, sw, pd, ph, pw)
        db = g.sum(axis=(0, 2, 3, 4)) if b is not None and b.requires_grad else None
        return (dx, dw, db) if b is not None else (dx, dw)

    parents = (x, w) if b is None else (x, w, b)
    return make_op(y, parents, vjp)


def avg_pool1d(x: Tensor, k: int, stride: int, padding: int) -> Tensor:
    """Average pooling counting padded zeros in the denominator."""
    bs, c, length = x.data.shape
    cols = K.im2col1d(x.data, k, stride, padding, 1)
    y = cols.mean(axis=2)

    def vjp(g):
        dcols = np.broadcast_to(g[:, :, None, :] / k, cols.shape).astype(g.dtype)
        return (K.col2im1d(np.ascontiguousarray(dcols), length, stride, padding, 1),)

    return make_op(y, (x,), vjp)


def max_pool2d(x: Tensor, kernel: tuple, stride: tuple, padding: tuple) -> Tensor:
    """x (B, C, H, W) max pooling over the trailing two axes."""
    bs, c, h, w = x.data.shape
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    y, idx = K.maxpool2d_fwd(x.data.reshape(bs * c, h, w), kh, kw, sh, sw, ph, pw)
    ho, wo = y.shape[-2:]

    def vjp(g):
        dx = K.maxpool2d_bwd(g.reshape(bs * c, ho, wo), idx, h, w)
        return (dx.reshape(bs, c, h, w),)

    return make_op(y.reshape(bs, c, ho, wo), (x,), vjp)


def lstm_seq(x: Tensor, w_ih: Tensor, w_hh: Tensor, b: Tensor) -> Tensor:
    """Single-direction LSTM: x (B, T, I) -> hidden states (B, T, H)."""
    xg = x.data @ w_ih.data.T + b.data
    h, c, gates = K.lstm_fwd(xg, w_hh.data)

    def vjp(dh):
        dgpre = K.lstm_bwd(w_hh.data, gates, c, np.ascontiguousarray(dh))
        dx = dgpre @ w_ih.data if x.requires_grad else None
        dwih = (
            np.tensordot(dgpre, x.data, axes=([0, 1], [0, 1]))
            if w_ih.requires_grad
            else None
        )
        dwhh = (
            np.tensordot(dgpre[:, 1:], h[:, :-1], axes=([0, 1], [0, 1]))
            if w_hh.requires_grad
            else None
        )
        db = dgpre.sum(axis=(0, 1)) if b.requires_grad else None
        return (dx, dwih, dwhh, db)

    return make_op(h, (x, w_ih, w_hh, b), vjp)


def batch_norm_train(
    x: Tensor, w: Tensor, b: Tensor, mean: np.ndarray, var: np.ndarray, eps: float
) -> Tensor:
    """Normalize x (B, C, ...) with the given batch stats (biased variance).

    mean/var are shape-(C,) arrays computed from x.data by the caller (which
    also owns the running-stat update); the backward pass treats them as
    functions of x, i.e. this is standard training-mode batch norm.
    """
    c = x.data.shape[1]
    bshape = (1, c) + (1,) * (x.data.ndim - 2)
    axes = (0,) + tuple(range(2, x.data.ndim))
    n = x.data.size // c
    invstd = (1.0 / np.sqrt(var + eps)).reshape(bshape).astype(x.data.dtype)
    xhat = (x.data - mean.reshape(bshape).astype(x.data.dtype)) * invstd
    y = xhat * w.data.reshape(bshape) + b.data.reshape(bshape)

    def vjp(g):
        dw = (g * xhat).sum(axis=axes) if w.requires_grad else None
        db = g.sum(axis=axes) if b.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * w.data.reshape(bshape)
            m1 = dxhat.sum(axis=axes, keepdims=True) / n
            m2 = (dxhat * xhat).sum(axis=axes, keepdims=True) / n
            dx = invstd * (dxhat - m1 - xhat * m2)
        return (dx, dw, db)

    return make_op(y, (x, w, b), vjp)


def _rfft_adjoint(g_spec: np.ndarray, n: int) -> np.ndarray:
    """Adjoint of np.fft.rfft for real length-n input: dL/dx from dL/dX."""
    h = g_spec.copy()
    h[..., 1 : (n + 1) // 2] *= 0.5
    return n * np.fft.irfft(h, n=n, axis=-1)


def stft_magnitude(x: Tensor, cfg: "dsp.StftConfig") -> Tensor:
    """Differentiable |STFT|: x (B, T) -> (B, T', F)."""
    bs, t = x.data.shape
    pad = cfg.fft_size // 2
    spec, mag = dsp.stft_magnitude_batch(x.data, cfg)
    win = dsp.stft_window(cfg)

    def vjp(g):
        dspec = g * spec / np.maximum(mag, 1e-30)
        dframes = _rfft_adjoint(dspec, cfg.fft_size) * win
        dpadded = K.overlap_add(
            np.ascontiguousarray(dframes), cfg.hop_size, t + 2 * pad
        )
        dx = dsp.reflect_fold(dpadded, t, pad)
        return (dx.astype(x.data.dtype),)

    return make_op(mag, (x,), vjp)
