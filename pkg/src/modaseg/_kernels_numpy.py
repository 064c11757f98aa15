"""Pure-numpy kernel implementations (fallback path).

Same signatures and semantics as ``_kernels_numba``. Convolutions are
expressed as strided-view im2col plus BLAS contractions; the backward-input
scatter walks the kernel taps so each update is a strided vectorized add.

All convolution entry points take the input already padded ("valid"
cross-correlation only); padding itself lives in the autodiff layer, where the
pad mode (zero / reflect / replicate) is handled.
"""

from __future__ import annotations

import numpy as np


def _col_view(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Sliding-window view (N, Ci, kh, kw, Ho, Wo) of the padded input."""
    n, ci, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    sn, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, ci, kh, kw, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )


def conv2d_forward(xp: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """Valid cross-correlation. xp: (N,Ci,Hp,Wp), w: (Co,Ci,kh,kw)."""
    cols = _col_view(xp, w.shape[2], w.shape[3], stride)
    out = np.tensordot(cols, w, axes=([1, 2, 3], [1, 2, 3]))  # (N,Ho,Wo,Co)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_grad_input(gout: np.ndarray, w: np.ndarray, stride: int, hp: int, wp: int) -> np.ndarray:
    """Gradient w.r.t. the padded input of conv2d_forward."""
    n, co, ho, wo = gout.shape
    _, ci, kh, kw = w.shape
    # (N,Ho,Wo,Ci,kh,kw) -> (kh,kw,N,Ci,Ho,Wo) so each tap is one strided add
    gcols = np.tensordot(gout, w, axes=([1], [0])).transpose(4, 5, 0, 3, 1, 2)
    gxp = np.zeros((n, ci, hp, wp), dtype=gout.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[i, j]
    return gxp


def conv2d_grad_weight(xp: np.ndarray, gout: np.ndarray, stride: int, kh: int, kw: int) -> np.ndarray:
    """Gradient w.r.t. the conv weights."""
    cols = _col_view(xp, kh, kw, stride)
    # (Co, Ci, kh, kw) <- contract over batch and output positions
    gw = np.tensordot(gout, cols, axes=([0, 2, 3], [0, 4, 5]))
    return np.ascontiguousarray(gw)


def maxpool2x_forward(x: np.ndarray):
    """2x2/stride-2 max pooling. Ties resolve to the first window position
    in (0,0),(0,1),(1,0),(1,1) scan order. Returns (out, corner-index)."""
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    win = x.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    idx = win.argmax(axis=-1).astype(np.uint8)
    out = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2x_backward(g: np.ndarray, idx: np.ndarray) -> np.ndarray:
    n, c, ho, wo = g.shape
    scat = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
    np.put_along_axis(scat, idx[..., None].astype(np.intp), g[..., None], axis=-1)
    gx = scat.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
    return np.ascontiguousarray(gx)


def _up1d(x: np.ndarray, axis: int) -> np.ndarray:
    """Double one axis with half-pixel-center linear interpolation, clamped."""
    x = np.moveaxis(x, axis, -1)
    shp = x.shape[:-1] + (2 * x.shape[-1],)
    out = np.empty(shp, dtype=x.dtype)
    lo = np.concatenate([x[..., :1], x[..., :-1]], axis=-1)   # x[k-1] clamped
    hi = np.concatenate([x[..., 1:], x[..., -1:]], axis=-1)   # x[k+1] clamped
    out[..., 0::2] = 0.75 * x + 0.25 * lo
    out[..., 1::2] = 0.75 * x + 0.25 * hi
    return np.moveaxis(out, -1, axis)


def _up1d_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    ge, go = g[..., 0::2], g[..., 1::2]
    gx = 0.75 * (ge + go)
    gx[..., :-1] += 0.25 * ge[..., 1:]
    gx[..., 0] += 0.25 * ge[..., 0]
    gx[..., 1:] += 0.25 * go[..., :-1]
    gx[..., -1] += 0.25 * go[..., -1]
    return np.moveaxis(gx, -1, axis)


def upsample2x_forward(x: np.ndarray) -> np.ndarray:
    """Bilinear 2x upsampling of (N,C,H,W), half-pixel centers, edge-clamped."""
    return np.ascontiguousarray(_up1d(_up1d(x, 2), 3))


def upsample2x_backward(g: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(_up1d_adjoint(_up1d_adjoint(g, 3), 2))


def min_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """For each point (row) in a, the min squared euclidean distance to b.

    a: (Ka,3), b: (Kb,3) float64. Chunked to bound the (chunk, Kb) buffer.
    """
    out = np.empty(a.shape[0], dtype=np.float64)
    chunk = max(1, int(4e6 // max(b.shape[0], 1)))
    for s in range(0, a.shape[0], chunk):
        d = a[s:s + chunk, None, :] - b[None, :, :]
        # explicit (dx*dx + dy*dy) + dz*dz: bit-identical to the jitted path
        sq = d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]
        out[s:s + chunk] = sq.min(axis=1)
    return out
