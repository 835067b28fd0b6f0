"""Numba-jitted kernel implementations.

Signature-for-signature twins of kernels_numpy. Gather kernels and pooling
are bit-exact; scatter and recurrence kernels agree to float rounding (the
summation order differs, and transcendentals go through libm in double).
The LSTM matrix products still run through BLAS via np.dot.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def im2col1d(x, k, stride, pad, dil):
    b, c, length = x.shape
    eff = (k - 1) * dil + 1
    lout = (length + 2 * pad - eff) // stride + 1
    out = np.zeros((b, c, k, lout), dtype=x.dtype)
    for bi in range(b):
        for ci in range(c):
            for ki in range(k):
                for oi in range(lout):
                    src = oi * stride + ki * dil - pad
                    if 0 <= src < length:
                        out[bi, ci, ki, oi] = x[bi, ci, src]
    return out


@njit(cache=True)
def col2im1d(cols, length, stride, pad, dil):
    b, c, k, lo = cols.shape
    out = np.zeros((b, c, length), dtype=cols.dtype)
    for bi in range(b):
        for ci in range(c):
            for ki in range(k):
                for oi in range(lo):
                    dst = oi * stride + ki * dil - pad
                    if 0 <= dst < length:
                        out[bi, ci, dst] += cols[bi, ci, ki, oi]
    return out


@njit(cache=True)
def im2col2d(x, kh, kw, sh, sw, ph, pw):
    b, c, h, w = x.shape
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    out = np.zeros((b, c, kh, kw, ho, wo), dtype=x.dtype)
    for bi in range(b):
        for ci in range(c):
            for ki in range(kh):
                hbase = ki - ph
                i0, i1 = _valid_range(h, ho, sh, hbase)
                for kj in range(kw):
                    wbase = kj - pw
                    j0, j1 = _valid_range(w, wo, sw, wbase)
                    for oi in range(i0, i1):
                        src = x[bi, ci, oi * sh + hbase]
                        dst = out[bi, ci, ki, kj, oi]
                        for oj in range(j0, j1):
                            dst[oj] = src[oj * sw + wbase]
    return out


@njit(cache=True)
def col2im2d(cols, h, w, sh, sw, ph, pw):
    b, c, kh, kw, ho, wo = cols.shape
    out = np.zeros((b, c, h, w), dtype=cols.dtype)
    for bi in range(b):
        for ci in range(c):
            for ki in range(kh):
                for kj in range(kw):
                    for oi in range(ho):
                        hh = oi * sh + ki - ph
                        if hh < 0 or hh >= h:
                            continue
                        for oj in range(wo):
                            ww = oj * sw + kj - pw
                            if 0 <= ww < w:
                                out[bi, ci, hh, ww] += cols[bi, ci, ki, kj, oi, oj]
    return out


@njit(cache=True)
def im2col3d(x, kd, kh, kw, sd, sh, sw, pd, ph, pw):
    b, c, d, h, w = x.shape
    do = (d + 2 * pd - kd) // sd + 1
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    out = np.zeros((b, c, kd, kh, kw, do, ho, wo), dtype=x.dtype)
    for bi in range(b):
        for ci in range(c):
            for kk in range(kd):
                dbase = kk - pd
                d0, d1 = _valid_range(d, do, sd, dbase)
                for ki in range(kh):
                    hbase = ki - ph
                    i0, i1 = _valid_range(h, ho, sh, hbase)
                    for kj in range(kw):
                        wbase = kj - pw
                        j0, j1 = _valid_range(w, wo, sw, wbase)
                        for od in range(d0, d1):
                            for oi in range(i0, i1):
                                src = x[bi, ci, od * sd + dbase, oi * sh + hbase]
                                dst = out[bi, ci, kk, ki, kj, od, oi]
                                for oj in range(j0, j1):
                                    dst[oj] = src[oj * sw + wbase]
    return out


@njit(cache=True)
def col2im3d(cols, d, h, w, sd, sh, sw, pd, ph, pw):
    b, c, kd, kh, kw, do, ho, wo = cols.shape
    out = np.zeros((b, c, d, h, w), dtype=cols.dtype)
    for bi in range(b):
        for ci in range(c):
            for kk in range(kd):
                for ki in range(kh):
                    for kj in range(kw):
                        for od in range(do):
                            dd = od * sd + kk - pd
                            if dd < 0 or dd >= d:
                                continue
                            for oi in range(ho):
                                hh = oi * sh + ki - ph
                                if hh < 0 or hh >= h:
                                    continue
                                for oj in range(wo):
                                    ww = oj * sw + kj - pw
                                    if 0 <= ww < w:
                                        out[bi, ci, dd, hh, ww] += \
                                            cols[bi, ci, kk, ki, kj, od, oi, oj]
    return out


@njit(cache=True)
def maxpool2d_fwd(x, kh, kw, sh, sw, ph, pw):
    m, h, w = x.shape
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    y = np.empty((m, ho, wo), dtype=x.dtype)
    idx = np.empty((m, ho, wo), dtype=np.int64)
    for mi in range(m):
        for oi in range(ho):
            for oj in range(wo):
                found = False
                best = x[mi, 0, 0]
                bh = 0
                bw = 0
                for ki in range(kh):
                    hh = oi * sh + ki - ph
                    if hh < 0 or hh >= h:
                        continue
                    for kj in range(kw):
                        ww = oj * sw + kj - pw
                        if ww < 0 or ww >= w:
                            continue
                        v = x[mi, hh, ww]
                        if not found or v > best:
                            found = True
                            best = v
                            bh = hh
                            bw = ww
                y[mi, oi, oj] = best
                idx[mi, oi, oj] = bh * w + bw
    return y, idx


@njit(cache=True)
def maxpool2d_bwd(dy, idx, h, w):
    m = dy.shape[0]
    ho, wo = dy.shape[1], dy.shape[2]
    dx = np.zeros((m, h * w), dtype=dy.dtype)
    for mi in range(m):
        for oi in range(ho):
            for oj in range(wo):
                dx[mi, idx[mi, oi, oj]] += dy[mi, oi, oj]
    return dx.reshape(m, h, w)


@njit(cache=True, inline="always")
def _sig(v):
    if v >= 0.0:
        return 1.0 / (1.0 + math.exp(-v))
    e = math.exp(v)
    return e / (1.0 + e)


@njit(cache=True)
def lstm_fwd(xg, w_hh):
    b, t, g4 = xg.shape
    hdim = g4 // 4
    h = np.zeros((b, t, hdim), dtype=xg.dtype)
    c = np.zeros((b, t, hdim), dtype=xg.dtype)
    g = np.empty((b, t, g4), dtype=xg.dtype)
    h_prev = np.zeros((b, hdim), dtype=xg.dtype)
    c_prev = np.zeros((b, hdim), dtype=xg.dtype)
    w_hh_t = np.ascontiguousarray(w_hh.T)
    for ti in range(t):
        pre = np.ascontiguousarray(xg[:, ti]) + np.dot(h_prev, w_hh_t)
        for bi in range(b):
            for hj in range(hdim):
                iv = _sig(pre[bi, hj])
                fv = _sig(pre[bi, hdim + hj])
                gv = math.tanh(pre[bi, 2 * hdim + hj])
                ov = _sig(pre[bi, 3 * hdim + hj])
                cv = fv * c_prev[bi, hj] + iv * gv
                hv = ov * math.tanh(cv)
                c_prev[bi, hj] = cv
                h_prev[bi, hj] = hv
                g[bi, ti, hj] = iv
                g[bi, ti, hdim + hj] = fv
                g[bi, ti, 2 * hdim + hj] = gv
                g[bi, ti, 3 * hdim + hj] = ov
                c[bi, ti, hj] = cv
                h[bi, ti, hj] = hv
    return h, c, g


@njit(cache=True)
def lstm_bwd(w_hh, g, c, dh):
    b, t, g4 = g.shape
    hdim = g4 // 4
    dg = np.empty_like(g)
    dc = np.zeros((b, hdim), dtype=g.dtype)
    dh_rec = np.zeros((b, hdim), dtype=g.dtype)
    w_hh_c = np.ascontiguousarray(w_hh)
    for ti in range(t - 1, -1, -1):
        for bi in range(b):
            for hj in range(hdim):
                i = g[bi, ti, hj]
                f = g[bi, ti, hdim + hj]
                gg = g[bi, ti, 2 * hdim + hj]
                o = g[bi, ti, 3 * hdim + hj]
                c_prev = c[bi, ti - 1, hj] if ti > 0 else 0.0
                tc = math.tanh(c[bi, ti, hj])
                dht = dh[bi, ti, hj] + dh_rec[bi, hj]
                do = dht * tc
                dcv = dc[bi, hj] + dht * o * (1.0 - tc * tc)
                dg[bi, ti, hj] = dcv * gg * i * (1.0 - i)
                dg[bi, ti, hdim + hj] = dcv * c_prev * f * (1.0 - f)
                dg[bi, ti, 2 * hdim + hj] = dcv * i * (1.0 - gg * gg)
                dg[bi, ti, 3 * hdim + hj] = do * o * (1.0 - o)
                dc[bi, hj] = dcv * f
        dh_rec = np.dot(np.ascontiguousarray(dg[:, ti]), w_hh_c)
    return dg


@njit(cache=True)
def overlap_add(frames, hop, out_len):
    b, f, n = frames.shape
    out = np.zeros((b, out_len), dtype=frames.dtype)
    for bi in range(b):
        for fi in range(f):
            base = fi * hop
            for ni in range(n):
                out[bi, base + ni] += frames[bi, fi, ni]
    return out
