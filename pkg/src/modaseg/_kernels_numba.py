"""Numba-jitted kernel implementations (default path).

Matches ``_kernels_numpy`` semantics. The convolution kernels do explicit
im2col/col2im in tight loops and hand the dense contraction to BLAS via
``np.dot``; pooling, upsampling and the surface-distance reduction are plain
loops. ``cache=True`` persists the compiled kernels across processes.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _im2col(xp, kh, kw, stride):
    n, ci, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    k = ci * kh * kw
    cols = np.empty((n * ho * wo, k), dtype=xp.dtype)
    for b in range(n):
        for oh in range(ho):
            for ow in range(wo):
                r = (b * ho + oh) * wo + ow
                c = 0
                for cc in range(ci):
                    for i in range(kh):
                        ih = oh * stride + i
                        iw = ow * stride
                        for j in range(kw):
                            cols[r, c] = xp[b, cc, ih, iw + j]
                            c += 1
    return cols


@njit(cache=True)
def conv2d_forward(xp, w, stride):
    n, ci, hp, wp = xp.shape
    co, _, kh, kw = w.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = _im2col(xp, kh, kw, stride)
    w2 = np.ascontiguousarray(w.reshape(co, ci * kh * kw).T)
    flat = np.dot(cols, w2)  # (N*Ho*Wo, Co)
    out = np.empty((n, co, ho, wo), dtype=xp.dtype)
    for b in range(n):
        for oh in range(ho):
            for ow in range(wo):
                r = (b * ho + oh) * wo + ow
                for cc in range(co):
                    out[b, cc, oh, ow] = flat[r, cc]
    return out


@njit(cache=True)
def conv2d_grad_input(gout, w, stride, hp, wp):
    n, co, ho, wo = gout.shape
    _, ci, kh, kw = w.shape
    k = ci * kh * kw
    g2 = np.empty((n * ho * wo, co), dtype=gout.dtype)
    for b in range(n):
        for oh in range(ho):
            for ow in range(wo):
                r = (b * ho + oh) * wo + ow
                for cc in range(co):
                    g2[r, cc] = gout[b, cc, oh, ow]
    w2 = np.ascontiguousarray(w.reshape(co, k))
    gcols = np.dot(g2, w2)  # (N*Ho*Wo, K)
    gxp = np.zeros((n, ci, hp, wp), dtype=gout.dtype)
    for b in range(n):
        for oh in range(ho):
            for ow in range(wo):
                r = (b * ho + oh) * wo + ow
                c = 0
                for cc in range(ci):
                    for i in range(kh):
                        ih = oh * stride + i
                        iw = ow * stride
                        for j in range(kw):
                            gxp[b, cc, ih, iw + j] += gcols[r, c]
                            c += 1
    return gxp


@njit(cache=True)
def conv2d_grad_weight(xp, gout, stride, kh, kw):
    n, ci, hp, wp = xp.shape
    co = gout.shape[1]
    ho, wo = gout.shape[2], gout.shape[3]
    cols = _im2col(xp, kh, kw, stride)
    g2 = np.empty((co, n * ho * wo), dtype=gout.dtype)
    for b in range(n):
        for oh in range(ho):
            for ow in range(wo):
                r = (b * ho + oh) * wo + ow
                for cc in range(co):
                    g2[cc, r] = gout[b, cc, oh, ow]
    gw2 = np.dot(g2, cols)  # (Co, K)
    return np.ascontiguousarray(gw2).reshape(co, ci, kh, kw)


@njit(cache=True)
def maxpool2x_forward(x):
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    out = np.empty((n, c, ho, wo), dtype=x.dtype)
    idx = np.empty((n, c, ho, wo), dtype=np.uint8)
    for b in range(n):
        for cc in range(c):
            for oh in range(ho):
                for ow in range(wo):
                    best = x[b, cc, 2 * oh, 2 * ow]
                    code = np.uint8(0)
                    v = x[b, cc, 2 * oh, 2 * ow + 1]
                    if v > best:
                        best = v
                        code = np.uint8(1)
                    v = x[b, cc, 2 * oh + 1, 2 * ow]
                    if v > best:
                        best = v
                        code = np.uint8(2)
                    v = x[b, cc, 2 * oh + 1, 2 * ow + 1]
                    if v > best:
                        best = v
                        code = np.uint8(3)
                    out[b, cc, oh, ow] = best
                    idx[b, cc, oh, ow] = code
    return out, idx


@njit(cache=True)
def maxpool2x_backward(g, idx):
    n, c, ho, wo = g.shape
    gx = np.zeros((n, c, 2 * ho, 2 * wo), dtype=g.dtype)
    for b in range(n):
        for cc in range(c):
            for oh in range(ho):
                for ow in range(wo):
                    code = idx[b, cc, oh, ow]
                    di = code >> 1
                    dj = code & 1
                    gx[b, cc, 2 * oh + di, 2 * ow + dj] = g[b, cc, oh, ow]
    return gx


@njit(cache=True)
def upsample2x_forward(x):
    n, c, h, w = x.shape
    out = np.empty((n, c, 2 * h, 2 * w), dtype=x.dtype)
    for b in range(n):
        for cc in range(c):
            for oh in range(2 * h):
                k = oh >> 1
                if oh & 1 == 0:
                    k2 = k - 1 if k > 0 else 0
                else:
                    k2 = k + 1 if k < h - 1 else h - 1
                for ow in range(2 * w):
                    m = ow >> 1
                    if ow & 1 == 0:
                        m2 = m - 1 if m > 0 else 0
                    else:
                        m2 = m + 1 if m < w - 1 else w - 1
                    r0 = 0.75 * x[b, cc, k, m] + 0.25 * x[b, cc, k, m2]
                    r1 = 0.75 * x[b, cc, k2, m] + 0.25 * x[b, cc, k2, m2]
                    out[b, cc, oh, ow] = 0.75 * r0 + 0.25 * r1
    return out


@njit(cache=True)
def upsample2x_backward(g):
    n, c, h2, w2 = g.shape
    h, w = h2 // 2, w2 // 2
    gx = np.zeros((n, c, h, w), dtype=g.dtype)
    for b in range(n):
        for cc in range(c):
            for oh in range(h2):
                k = oh >> 1
                if oh & 1 == 0:
                    k2 = k - 1 if k > 0 else 0
                else:
                    k2 = k + 1 if k < h - 1 else h - 1
                for ow in range(w2):
                    m = ow >> 1
                    if ow & 1 == 0:
                        m2 = m - 1 if m > 0 else 0
                    else:
                        m2 = m + 1 if m < w - 1 else w - 1
                    gv = g[b, cc, oh, ow]
                    gx[b, cc, k, m] += 0.5625 * gv
                    gx[b, cc, k, m2] += 0.1875 * gv
                    gx[b, cc, k2, m] += 0.1875 * gv
                    gx[b, cc, k2, m2] += 0.0625 * gv
    return gx


@njit(cache=True)
def min_sq_dists(a, b):
    ka = a.shape[0]
    kb = b.shape[0]
    out = np.empty(ka, dtype=np.float64)
    for i in range(ka):
        best = np.inf
        ax, ay, az = a[i, 0], a[i, 1], a[i, 2]
        for j in range(kb):
            dx = ax - b[j, 0]
            dy = ay - b[j, 1]
            dz = az - b[j, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < best:
                best = d
        out[i] = best
    return out
