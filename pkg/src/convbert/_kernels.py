"""Sliding-window convolution kernels.

Two implementations of each kernel share one calling convention over
``(batch, positions, channels)`` arrays:

* ``*_np``: vectorised numpy via ``sliding_window_view`` / ``einsum``;
* ``*_nb``: explicit loops compiled with numba ``@njit``.

The public names (``dwconv_forward`` etc.) point at the numba versions unless
numba is missing or ``CONVBERT_NUMBA=0`` is set in the environment.
Taps are centred: output row ``i`` reads input row ``i + j - pad`` for tap
``j`` in ``0..k-1``, where ``pad = (k - 1) // 2``; out-of-range rows are zero.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda f: f


USE_NUMBA = HAVE_NUMBA and os.environ.get("CONVBERT_NUMBA", "1") != "0"


def _windows(x, k, pad):
    xp = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
    return sliding_window_view(xp, k, axis=1)  # (B, n, C, k)


# --------------------------------------------------------------------------
# numpy path


def dwconv_forward_np(x, w):
    k = w.shape[1]
    return np.einsum("bncj,cj->bnc", _windows(x, k, (k - 1) // 2), w)


def dwconv_backward_np(x, w, g):
    B, n, C = x.shape
    k = w.shape[1]
    pad = (k - 1) // 2
    gw = np.einsum("bnc,bncj->cj", g, _windows(x, k, pad))
    gxp = np.zeros((B, n + 2 * pad, C))
    for j in range(k):
        gxp[:, j : j + n, :] += g * w[:, j]
    return gxp[:, pad : pad + n, :], gw


def lconv_forward_np(v, kern):
    B, n, C = v.shape
    H, k = kern.shape[2], kern.shape[3]
    win = _windows(v, k, (k - 1) // 2).reshape(B, n, H, C // H, k)
    return np.einsum("bnhcj,bnhj->bnhc", win, kern).reshape(B, n, C)


def lconv_backward_np(v, kern, g):
    B, n, C = v.shape
    H, k = kern.shape[2], kern.shape[3]
    pad = (k - 1) // 2
    win = _windows(v, k, pad).reshape(B, n, H, C // H, k)
    gh = g.reshape(B, n, H, C // H)
    gk = np.einsum("bnhc,bnhcj->bnhj", gh, win)
    gvp = np.zeros((B, n + 2 * pad, C))
    for j in range(k):
        gvp[:, j : j + n, :] += (gh * kern[:, :, :, j : j + 1]).reshape(B, n, C)
    return gvp[:, pad : pad + n, :], gk


# --------------------------------------------------------------------------
# numba path


@njit(cache=True)
def dwconv_forward_nb(x, w):
    B, n, C = x.shape
    k = w.shape[1]
    pad = (k - 1) // 2
    out = np.zeros((B, n, C))
    for b in range(B):
        for i in range(n):
            for j in range(k):
                src = i + j - pad
                if src < 0 or src >= n:
                    continue
                for c in range(C):
                    out[b, i, c] += w[c, j] * x[b, src, c]
    return out


@njit(cache=True)
def dwconv_backward_nb(x, w, g):
    B, n, C = x.shape
    k = w.shape[1]
    pad = (k - 1) // 2
    gx = np.zeros((B, n, C))
    gw = np.zeros((C, k))
    for b in range(B):
        for i in range(n):
            for j in range(k):
                src = i + j - pad
                if src < 0 or src >= n:
                    continue
                for c in range(C):
                    gx[b, src, c] += w[c, j] * g[b, i, c]
                    gw[c, j] += g[b, i, c] * x[b, src, c]
    return gx, gw


@njit(cache=True)
def lconv_forward_nb(v, kern):
    B, n, C = v.shape
    H = kern.shape[2]
    k = kern.shape[3]
    width = C // H
    pad = (k - 1) // 2
    out = np.zeros((B, n, C))
    for b in range(B):
        for i in range(n):
            for h in range(H):
                c0 = h * width
                for j in range(k):
                    src = i + j - pad
                    if src < 0 or src >= n:
                        continue
                    wt = kern[b, i, h, j]
                    for c in range(c0, c0 + width):
                        out[b, i, c] += wt * v[b, src, c]
    return out


@njit(cache=True)
def lconv_backward_nb(v, kern, g):
    B, n, C = v.shape
    H = kern.shape[2]
    k = kern.shape[3]
    width = C // H
    pad = (k - 1) // 2
    gv = np.zeros((B, n, C))
    gk = np.zeros((B, n, H, k))
    for b in range(B):
        for i in range(n):
            for h in range(H):
                c0 = h * width
                for j in range(k):
                    src = i + j - pad
                    if src < 0 or src >= n:
                        continue
                    wt = kern[b, i, h, j]
                    acc = 0.0
                    for c in range(c0, c0 + width):
                        gv[b, src, c] += wt * g[b, i, c]
                        acc += g[b, i, c] * v[b, src, c]
                    gk[b, i, h, j] = acc
    return gv, gk


if USE_NUMBA:
    dwconv_forward, dwconv_backward = dwconv_forward_nb, dwconv_backward_nb
    lconv_forward, lconv_backward = lconv_forward_nb, lconv_backward_nb
else:
    dwconv_forward, dwconv_backward = dwconv_forward_np, dwconv_backward_np
    lconv_forward, lconv_backward = lconv_forward_np, lconv_backward_np

BACKEND = "numba" if USE_NUMBA else "numpy"
