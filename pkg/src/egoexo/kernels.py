"""Hot inner loops for convolution and pooling.

Each kernel has a pure-numpy implementation and, when numba is importable,
an ``@njit`` twin.  The numba path is the default; set ``EXGN_NUMBA=0`` in
the environment to force numpy (useful for debugging and for the benchmark
in ``benchmarks/bench_kernels.py``).  Both paths produce bit-identical
results because every accumulation runs in the same fixed order.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


def _flag_enabled() -> bool:
    return os.environ.get("EXGN_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


USE_NUMBA = HAVE_NUMBA and _flag_enabled()


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------

def im2col_numpy(xp, kh, kw, stride, ho, wo):
    """Unfold a padded batch ``[B,C,Hp,Wp]`` into ``[B*ho*wo, C*kh*kw]``."""
    b, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    # [B,C,ho,wo,kh,kw] -> [B,ho,wo,C,kh,kw]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * ho * wo, c * kh * kw)


def col2im_numpy(cols, shape, kh, kw, stride, ho, wo):
    """Adjoint of :func:`im2col_numpy`: scatter-add columns into ``shape``."""
    b, c, hp, wp = shape
    out = np.zeros(shape, dtype=cols.dtype)
    c6 = cols.reshape(b, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += c6[:, :, :, :, i, j]
    return out


def maxpool_numpy(x, k, stride, ho, wo):
    """Max over windows; returns values and flat in-window argmax (first max wins)."""
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    flat = win.reshape(win.shape[:4] + (k * k,))
    idx = flat.argmax(axis=-1)
    val = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(val), idx.astype(np.int64)


def maxpool_backward_numpy(g, idx, shape, k, stride):
    b, c, h, w = shape
    ho, wo = g.shape[2:]
    out = np.zeros(shape, dtype=g.dtype)
    di, dj = np.divmod(idx, k)
    bb, cc, oi, oj = np.indices((b, c, ho, wo))
    np.add.at(out, (bb, cc, oi * stride + di, oj * stride + dj), g)
    return out


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _im2col_nb(xp, kh, kw, stride, ho, wo):
        b, c = xp.shape[0], xp.shape[1]
        out = np.empty((b * ho * wo, c * kh * kw), dtype=xp.dtype)
        for n in range(b):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        col = (ch * kh + i) * kw + j
                        for oi in range(ho):
                            r0 = (n * ho + oi) * wo
                            for oj in range(wo):
                                out[r0 + oj, col] = xp[n, ch, oi * stride + i, oj * stride + j]
        return out

    @njit(cache=True)
    def _col2im_nb(cols, out, kh, kw, stride, ho, wo):
        b, c = out.shape[0], out.shape[1]
        # Same (i, j) outer order as the numpy path, so float sums agree bitwise.
        for i in range(kh):
            for j in range(kw):
                for n in range(b):
                    for oi in range(ho):
                        for oj in range(wo):
                            row = (n * ho + oi) * wo + oj
                            for ch in range(c):
                                out[n, ch, oi * stride + i, oj * stride + j] += cols[row, (ch * kh + i) * kw + j]
        return out

    @njit(cache=True)
    def _maxpool_nb(x, k, stride, ho, wo):
        b, c = x.shape[0], x.shape[1]
        val = np.empty((b, c, ho, wo), dtype=x.dtype)
        idx = np.empty((b, c, ho, wo), dtype=np.int64)
        for n in range(b):
            for ch in range(c):
                for oi in range(ho):
                    for oj in range(wo):
                        best = x[n, ch, oi * stride, oj * stride]
                        arg = 0
                        for t in range(1, k * k):
                            v = x[n, ch, oi * stride + t // k, oj * stride + t % k]
                            if v > best:
                                best = v
                                arg = t
                        val[n, ch, oi, oj] = best
                        idx[n, ch, oi, oj] = arg
        return val, idx

    @njit(cache=True)
    def _maxpool_backward_nb(g, idx, out, k, stride):
        b, c, ho, wo = g.shape
        for n in range(b):
            for ch in range(c):
                for oi in range(ho):
                    for oj in range(wo):
                        t = idx[n, ch, oi, oj]
                        out[n, ch, oi * stride + t // k, oj * stride + t % k] += g[n, ch, oi, oj]
        return out


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def im2col(xp, kh, kw, stride, ho, wo, use_numba=None):
    if USE_NUMBA if use_numba is None else use_numba:
        return _im2col_nb(np.ascontiguousarray(xp), kh, kw, stride, ho, wo)
    return im2col_numpy(xp, kh, kw, stride, ho, wo)


def col2im(cols, shape, kh, kw, stride, ho, wo, use_numba=None):
    if USE_NUMBA if use_numba is None else use_numba:
        out = np.zeros(shape, dtype=cols.dtype)
        return _col2im_nb(np.ascontiguousarray(cols), out, kh, kw, stride, ho, wo)
    return col2im_numpy(cols, shape, kh, kw, stride, ho, wo)


def maxpool(x, k, stride, ho, wo, use_numba=None):
    if USE_NUMBA if use_numba is None else use_numba:
        return _maxpool_nb(np.ascontiguousarray(x), k, stride, ho, wo)
    return maxpool_numpy(x, k, stride, ho, wo)


def maxpool_backward(g, idx, shape, k, stride, use_numba=None):
    if USE_NUMBA if use_numba is None else use_numba:
        out = np.zeros(shape, dtype=g.dtype)
        return _maxpool_backward_nb(np.ascontiguousarray(g), idx, out, k, stride)
    return maxpool_backward_numpy(g, idx, shape, k, stride)
