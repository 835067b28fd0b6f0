"""Pure-numpy kernel implementations.

Reference semantics for the numba backend: every function here must agree with
its jitted twin to float rounding. Gather kernels (im2col, framing) are exact;
scatter kernels (col2im, overlap_add) may differ in summation order only.

Layout conventions: channels-first activations, im2col column tensors keep the
batch and channel axes leading so the caller can matmul over flattened taps.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col1d(x: np.ndarray, k: int, stride: int, pad: int, dil: int) -> np.ndarray:
    """(B, C, L) -> (B, C, k, Lo) tap gather for 1-d convolution."""
    b, c, length = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    eff = (k - 1) * dil + 1
    lo = (length + 2 * pad - eff) // stride + 1
    v = sliding_window_view(x, eff, axis=2)[:, :, : (lo - 1) * stride + 1 : stride, ::dil]
    return np.ascontiguousarray(v.transpose(0, 1, 3, 2))


def col2im1d(cols: np.ndarray, length: int, stride: int, pad: int, dil: int) -> np.ndarray:
    """Adjoint of im2col1d: scatter-add taps back to (B, C, length)."""
    b, c, k, lo = cols.shape
    out = np.zeros((b, c, length + 2 * pad), dtype=cols.dtype)
    idx = (np.arange(k) * dil)[:, None] + (np.arange(lo) * stride)[None, :]
    np.add.at(out, (slice(None), slice(None), idx), cols)
    return out[:, :, pad : pad + length] if pad else out


def im2col2d(
    x: np.ndarray, kh: int, kw: int, sh: int, sw: int, ph: int, pw: int
) -> np.ndarray:
    """(B, C, H, W) -> (B, C, kh, kw, Ho, Wo)."""
    b, c, h, w = x.shape
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    v = sliding_window_view(x, (kh, kw), axis=(2, 3))
    v = v[:, :, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]
    return np.ascontiguousarray(v.transpose(0, 1, 4, 5, 2, 3))


def col2im2d(
    cols: np.ndarray, h: int, w: int, sh: int, sw: int, ph: int, pw: int
) -> np.ndarray:
    b, c, kh, kw, ho, wo = cols.shape
    out = np.zeros((b, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    ih = (np.arange(kh)[:, None, None, None] + (np.arange(ho) * sh)[None, None, :, None])
    iw = (np.arange(kw)[None, :, None, None] + (np.arange(wo) * sw)[None, None, None, :])
    ih = np.broadcast_to(ih, (kh, kw, ho, wo))
    iw = np.broadcast_to(iw, (kh, kw, ho, wo))
    np.add.at(out, (slice(None), slice(None), ih, iw), cols)
    if ph or pw:
        out = out[:, :, ph : ph + h, pw : pw + w]
    return out


def im2col3d(
    x: np.ndarray,
    kd: int, kh: int, kw: int,
    sd: int, sh: int, sw: int,
    pd: int, ph: int, pw: int,
) -> np.ndarray:
    """(B, C, D, H, W) -> (B, C, kd, kh, kw, Do, Ho, Wo)."""
    b, c, d, h, w = x.shape
    if pd or ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    do = (d + 2 * pd - kd) // sd + 1
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    v = sliding_window_view(x, (kd, kh, kw), axis=(2, 3, 4))
    v = v[
        :, :,
        : (do - 1) * sd + 1 : sd,
        : (ho - 1) * sh + 1 : sh,
        : (wo - 1) * sw + 1 : sw,
    ]
    return np.ascontiguousarray(v.transpose(0, 1, 5, 6, 7, 2, 3, 4))


def col2im3d(
    cols: np.ndarray,
    d: int, h: int, w: int,
    sd: int, sh: int, sw: int,
    pd: int, ph: int, pw: int,
) -> np.ndarray:
    b, c, kd, kh, kw, do, ho, wo = cols.shape
    out = np.zeros((b, c, d + 2 * pd, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    sh6 = (kd, kh, kw, do, ho, wo)
    idd = np.broadcast_to(
        np.arange(kd)[:, None, None, None, None, None]
        + (np.arange(do) * sd)[None, None, None, :, None, None], sh6)
    ihh = np.broadcast_to(
        np.arange(kh)[None, :, None, None, None, None]
        + (np.arange(ho) * sh)[None, None, None, None, :, None], sh6)
    iww = np.broadcast_to(
        np.arange(kw)[None, None, :, None, None, None]
        + (np.arange(wo) * sw)[None, None, None, None, None, :], sh6)
    np.add.at(out, (slice(None), slice(None), idd, ihh, iww), cols)
    if pd or ph or pw:
        out = out[:, :, pd : pd + d, ph : ph + h, pw : pw + w]
    return out


def maxpool2d_fwd(
    x: np.ndarray, kh: int, kw: int, sh: int, sw: int, ph: int, pw: int
):
    """(M, H, W) -> pooled (M, Ho, Wo) plus flat argmax h*W + w into the unpadded input."""
    m, h, w = x.shape
    neg = np.finfo(x.dtype).min
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)), constant_values=neg) if (ph or pw) else x
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    v = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    v = v[:, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]  # (M,Ho,Wo,kh,kw)
    flat = v.reshape(m, ho, wo, kh * kw)
    a = flat.argmax(axis=3)
    y = np.take_along_axis(flat, a[..., None], axis=3)[..., 0]
    hh = a // kw + (np.arange(ho) * sh)[None, :, None] - ph
    ww = a % kw + (np.arange(wo) * sw)[None, None, :] - pw
    idx = hh * w + ww
    return np.ascontiguousarray(y), idx.astype(np.int64)


def maxpool2d_bwd(dy: np.ndarray, idx: np.ndarray, h: int, w: int) -> np.ndarray:
    m = dy.shape[0]
    dx = np.zeros((m, h * w), dtype=dy.dtype)
    rows = np.arange(m)[:, None, None]
    np.add.at(dx, (rows, idx), dy)
    return dx.reshape(m, h, w)


def lstm_fwd(xg: np.ndarray, w_hh: np.ndarray):
    """Single-direction LSTM over precomputed input projections.

    xg: (B, T, 4H) = x @ W_ih.T + b, gate order i, f, g, o. Initial h and c are
    zero. Returns h (B,T,H), c (B,T,H) and post-activation gates (B,T,4H).
    """
    b, t, g4 = xg.shape
    hdim = g4 // 4
    h = np.zeros((b, t, hdim), dtype=xg.dtype)
    c = np.zeros((b, t, hdim), dtype=xg.dtype)
    g = np.empty((b, t, g4), dtype=xg.dtype)
    h_prev = np.zeros((b, hdim), dtype=xg.dtype)
    c_prev = np.zeros((b, hdim), dtype=xg.dtype)
    w_hh_t = np.ascontiguousarray(w_hh.T)
    for ti in range(t):
        pre = xg[:, ti] + h_prev @ w_hh_t
        i = _sigmoid(pre[:, :hdim])
        f = _sigmoid(pre[:, hdim : 2 * hdim])
        gg = np.tanh(pre[:, 2 * hdim : 3 * hdim])
        o = _sigmoid(pre[:, 3 * hdim :])
        c_prev = f * c_prev + i * gg
        h_prev = o * np.tanh(c_prev)
        g[:, ti, :hdim] = i
        g[:, ti, hdim : 2 * hdim] = f
        g[:, ti, 2 * hdim : 3 * hdim] = gg
        g[:, ti, 3 * hdim :] = o
        c[:, ti] = c_prev
        h[:, ti] = h_prev
    return h, c, g


def lstm_bwd(
    w_hh: np.ndarray, g: np.ndarray, c: np.ndarray, dh: np.ndarray
) -> np.ndarray:
    """Backward recurrence; returns pre-activation gate grads (B, T, 4H)."""
    b, t, g4 = g.shape
    hdim = g4 // 4
    dg = np.empty_like(g)
    dc = np.zeros((b, hdim), dtype=g.dtype)
    dh_rec = np.zeros((b, hdim), dtype=g.dtype)
    for ti in range(t - 1, -1, -1):
        i = g[:, ti, :hdim]
        f = g[:, ti, hdim : 2 * hdim]
        gg = g[:, ti, 2 * hdim : 3 * hdim]
        o = g[:, ti, 3 * hdim :]
        c_prev = c[:, ti - 1] if ti > 0 else np.zeros((b, hdim), dtype=g.dtype)
        tc = np.tanh(c[:, ti])
        dht = dh[:, ti] + dh_rec
        do = dht * tc
        dc = dc + dht * o * (1.0 - tc * tc)
        di = dc * gg
        df = dc * c_prev
        dgg = dc * i
        dg[:, ti, :hdim] = di * i * (1.0 - i)
        dg[:, ti, hdim : 2 * hdim] = df * f * (1.0 - f)
        dg[:, ti, 2 * hdim : 3 * hdim] = dgg * (1.0 - gg * gg)
        dg[:, ti, 3 * hdim :] = do * o * (1.0 - o)
        dh_rec = dg[:, ti] @ w_hh
        dc = dc * f
    return dg


def overlap_add(frames: np.ndarray, hop: int, out_len: int) -> np.ndarray:
    """(B, F, n) frames placed at f*hop, summed into (B, out_len)."""
    b, f, n = frames.shape
    out = np.zeros((b, out_len), dtype=frames.dtype)
    idx = (np.arange(f) * hop)[:, None] + np.arange(n)[None, :]
    np.add.at(out, (slice(None), idx), frames)
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
