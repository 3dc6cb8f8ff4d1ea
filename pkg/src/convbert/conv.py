"""Convolution operators: depthwise, lightweight, dynamic and span-based dynamic.

All sequence inputs are ``[..., n, channels]`` tensors (an optional leading
batch axis is allowed). Kernels are centred with zero padding, so ``k`` must be
odd.
"""

from __future__ import annotations

import numpy as np

from . import _kernels
from .errors import ConfigError, DimensionError
from .tensor import (
    Tensor,
    _node,
    _tally,
    add,
    as_tensor,
    matmul,
    mul,
    reshape,
    sigmoid,
    softmax,
)


def check_kernel_size(k: int) -> None:
    if k < 1 or k % 2 == 0:
        raise ConfigError(f"kernel size must be a positive odd integer, got {k}")


def _as_batched(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.reshape((-1,) + x.shape[-2:]), dtype=np.float64)


def dwconv(x: Tensor, w: Tensor) -> Tensor:
    """Depthwise convolution: ``out[i, c] = sum_j w[c, j] * x[i + j - pad, c]``."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"dwconv channel mismatch: input {x.shape}, kernel {w.shape}")
    check_kernel_size(w.shape[1])
    xb = _as_batched(x.data)
    wd = np.ascontiguousarray(w.data, dtype=np.float64)
    out = _kernels.dwconv_forward(xb, wd)
    _tally(out.size * w.shape[1])

    def bw(g):
        gx, gw = _kernels.dwconv_backward(xb, wd, _as_batched(g))
        return gx.reshape(x.shape), gw

    return _node(out.reshape(x.shape), (x, w), bw)


def lconv(v: Tensor, kernels: Tensor) -> Tensor:
    """Lightweight convolution with per-position kernels.

    ``kernels`` has shape ``[..., n, heads, k]``; channels of ``v`` are split
    into ``heads`` contiguous groups, each convolved with its head's kernel.
    A kernel constant over positions gives the classic weight-tied LConv.
    """
    v, kernels = as_tensor(v), as_tensor(kernels)
    n, channels = v.shape[-2:]
    if kernels.ndim < 3 or kernels.shape[-3] != n or kernels.shape[:-2] != v.shape[:-1]:
        raise DimensionError(f"lconv kernels {kernels.shape} do not match values {v.shape}")
    heads, k = kernels.shape[-2:]
    if channels % heads:
        raise ConfigError(f"{heads} convolution heads do not divide {channels} channels")
    check_kernel_size(k)
    vb = _as_batched(v.data)
    kb = np.ascontiguousarray(kernels.data.reshape((-1, n, heads, k)), dtype=np.float64)
    out = _kernels.lconv_forward(vb, kb)
    _tally(out.size * k)

    def bw(g):
        gv, gk = _kernels.lconv_backward(vb, kb, _as_batched(g))
        return gv.reshape(v.shape), gk.reshape(kernels.shape)

    return _node(out.reshape(v.shape), (v, kernels), bw)


def glu(x: Tensor) -> Tensor:
    """Gated linear unit: first half of the last axis times sigmoid of the second."""
    x = as_tensor(x)
    width = x.shape[-1]
    if width % 2:
        raise DimensionError(f"glu needs an even last extent, got {width}")
    half = width // 2
    return mul(x[..., :half], sigmoid(x[..., half:]))


def _head_logits(x: Tensor, w_f: Tensor, b_f: Tensor | None) -> Tensor:
    """Per-head kernel logits: ``x[..., n, H*dh]`` -> ``[..., n, H, k]``."""
    heads, d_head, k = w_f.shape
    if x.shape[-1] != heads * d_head:
        raise DimensionError(
            f"kernel generator expects {heads} heads x {d_head} channels, got width {x.shape[-1]}"
        )
    xh = reshape(x, x.shape[:-1] + (heads, 1, d_head))
    logits = reshape(matmul(xh, w_f), x.shape[:-1] + (heads, k))
    if b_f is not None:
        logits = add(logits, b_f)
    return logits


def dconv(x: Tensor, w_f: Tensor, b_f: Tensor | None = None) -> Tensor:
    """Dynamic convolution: each position's kernel is a softmax of a linear map of that token."""
    x, w_f = as_tensor(x), as_tensor(w_f)
    kernels = softmax(_head_logits(x, w_f, b_f), axis=-1)
    return lconv(x, kernels)


def dconv_kernels(x: Tensor, w_f: Tensor, b_f: Tensor | None = None) -> Tensor:
    x, w_f = as_tensor(x), as_tensor(w_f)
    return softmax(_head_logits(x, w_f, b_f), axis=-1)


def span_key(x: Tensor, w_dw: Tensor, w_pw: Tensor, b_pw: Tensor | None = None) -> Tensor:
    """Span-aware key: depthwise conv over ``x`` then a pointwise projection.

    ``w_dw`` is ``[d, k]`` and ``w_pw`` is ``[d, d_cv]``.
    """
    x, w_pw = as_tensor(x), as_tensor(w_pw)
    if w_pw.ndim != 2 or w_pw.shape[0] != x.shape[-1]:
        raise DimensionError(f"pointwise weight {w_pw.shape} does not accept width {x.shape[-1]}")
    out = matmul(dwconv(x, w_dw), w_pw)
    if b_pw is not None:
        out = add(out, b_pw)
    return out


def kernel_gen(q: Tensor, k_s: Tensor, w_f: Tensor, b_f: Tensor | None = None) -> Tensor:
    """Span-based kernels ``softmax(W_f (Q * K_s))`` per head, shape ``[..., n, H, k]``."""
    q, k_s, w_f = as_tensor(q), as_tensor(k_s), as_tensor(w_f)
    if q.shape != k_s.shape:
        raise DimensionError(f"query {q.shape} and span key {k_s.shape} differ")
    return softmax(_head_logits(mul(q, k_s), w_f, b_f), axis=-1)


def sdconv(q: Tensor, k_s: Tensor, v: Tensor, w_f: Tensor, b_f: Tensor | None = None) -> Tensor:
    """Span-based dynamic convolution of ``v`` with kernels generated from ``q`` and ``k_s``."""
    v = as_tensor(v)
    if v.shape != as_tensor(q).shape:
        raise DimensionError(f"values {v.shape} and query {as_tensor(q).shape} differ")
    return lconv(v, kernel_gen(q, k_s, w_f, b_f))
