"""Compiled inner loops for the depthwise convolution paths.

Every kernel takes an already zero-padded input ``xp`` of shape (N, D, Hp, Wp)
and a filter bank ``w`` of shape (G, D, k, k) where filter ``g`` of feature ``j``
lives at ``w[g, j]``.
"""

from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True)
def dwconv_forward(xp, w, b, stride):
    N, D, Hp, Wp = xp.shape
    G, _, k, _ = w.shape
    H = (Hp - k) // stride + 1
    W = (Wp - k) // stride + 1
    out = np.empty((N, G, D, H, W))
    for n in range(N):
        for j in range(D):
            for g in range(G):
                o = out[n, g, j]
                o[:, :] = b[g, j]
                for a in range(k):
                    for c in range(k):
                        wv = w[g, j, a, c]
                        for h in range(H):
                            row = xp[n, j, h * stride + a]
                            for q in range(W):
                                o[h, q] += row[q * stride + c] * wv
    return out


@numba.njit(cache=True)
def dwconv_backward(xp, w, gout, stride):
    N, D, Hp, Wp = xp.shape
    G, _, k, _ = w.shape
    H = gout.shape[3]
    W = gout.shape[4]
    gw = np.zeros(w.shape)
    gxp = np.zeros(xp.shape)
    for n in range(N):
        for j in range(D):
            for g in range(G):
                go = gout[n, g, j]
                for a in range(k):
                    for c in range(k):
                        wv = w[g, j, a, c]
                        acc = 0.0
                        for h in range(H):
                            row = xp[n, j, h * stride + a]
                            grow = gxp[n, j, h * stride + a]
                            for q in range(W):
                                acc += row[q * stride + c] * go[h, q]
                                grow[q * stride + c] += wv * go[h, q]
                        gw[g, j, a, c] += acc
    return gw, gxp


@numba.njit(cache=True)
def dwconv_pool_forward(xp, w, b, stride):
    """Depthwise conv followed by global average and max pooling, never
    materialising the full (N, G, D, H, W) response."""
    N, D, Hp, Wp = xp.shape
    G, _, k, _ = w.shape
    H = (Hp - k) // stride + 1
    W = (Wp - k) // stride + 1
    avg = np.empty((N, G, D))
    mx = np.empty((N, G, D))
    arg = np.empty((N, G, D), np.int64)
    buf = np.empty((H, W))
    for n in range(N):
        for j in range(D):
            for g in range(G):
                buf[:, :] = b[g, j]
                for a in range(k):
                    for c in range(k):
                        wv = w[g, j, a, c]
                        for h in range(H):
                            row = xp[n, j, h * stride + a]
                            for q in range(W):
                                buf[h, q] += row[q * stride + c] * wv
                s = 0.0
                best = -np.inf
                bi = 0
                for h in range(H):
                    for q in range(W):
                        v = buf[h, q]
                        s += v
                        # strict '>' keeps the lowest flat index on ties
                        if v > best:
                            best = v
                            bi = h * W + q
                avg[n, g, j] = s / (H * W)
                mx[n, g, j] = best
                arg[n, g, j] = bi
    return avg, mx, arg


@numba.njit(cache=True)
def dwconv_pool_backward(xp, w, arg, g_avg, g_max, stride, H, W):
    N, D, Hp, Wp = xp.shape
    G, _, k, _ = w.shape
    gw = np.zeros(w.shape)
    gb = np.zeros((G, D))
    gxp = np.zeros(xp.shape)
    inv = 1.0 / (H * W)
    wsum = np.empty((k, k))
    coef = np.empty((k, k))
    for n in range(N):
        for j in range(D):
            # window sums of the padded input, shared by all G filters
            for a in range(k):
                for c in range(k):
                    s = 0.0
                    for h in range(H):
                        row = xp[n, j, h * stride + a]
                        for q in range(W):
                            s += row[q * stride + c]
                    wsum[a, c] = s
            coef[:, :] = 0.0
            for g in range(G):
                ga = g_avg[n, g, j]
                gm = g_max[n, g, j]
                gb[g, j] += ga + gm
                h0 = (arg[n, g, j] // W) * stride
                q0 = (arg[n, g, j] % W) * stride
                for a in range(k):
                    for c in range(k):
                        gw[g, j, a, c] += ga * wsum[a, c] * inv + gm * xp[n, j, h0 + a, q0 + c]
                        coef[a, c] += ga * w[g, j, a, c] * inv
                        gxp[n, j, h0 + a, q0 + c] += gm * w[g, j, a, c]
            for a in range(k):
                for c in range(k):
                    cv = coef[a, c]
                    if cv == 0.0:
                        continue
                    for h in range(H):
                        grow = gxp[n, j, h * stride + a]
                        for q in range(W):
                            grow[q * stride + c] += cv
    return gw, gb, gxp
