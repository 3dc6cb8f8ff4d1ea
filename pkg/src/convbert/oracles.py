"""Scalar-loop reference implementations used to cross-check the fast operators.

Everything here works on plain 2-D numpy arrays for a single sequence and
avoids the tensor module entirely, so a bug in the vectorised path cannot
leak into the reference.
"""

import math

import numpy as np


def matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def softmax(row):
    m = max(row)
    e = [math.exp(x - m) for x in row]
    s = sum(e)
    return np.array([x / s for x in e])


def dwconv(x, w):
    n, d = x.shape
    k = w.shape[1]
    out = np.zeros((n, d))
    for i in range(n):
        for c in range(d):
            s = 0.0
            # 1-based taps, offset i + j - ceil((k+1)/2)
            for j in range(1, k + 1):
                src = i + j - math.ceil((k + 1) / 2)
                if 0 <= src < n:
                    s += w[c, j - 1] * x[src, c]
            out[i, c] = s
    return out


def lconv(v, kernels):
    """``kernels[i][h][j]``; channels split into contiguous head groups."""
    n, d = v.shape
    heads, k = kernels.shape[1], kernels.shape[2]
    width = d // heads
    out = np.zeros((n, d))
    for i in range(n):
        for c in range(d):
            h = c // width
            s = 0.0
            for j in range(1, k + 1):
                src = i + j - math.ceil((k + 1) / 2)
                if 0 <= src < n:
                    s += kernels[i, h, j - 1] * v[src, c]
            out[i, c] = s
    return out


def head_kernels(x, w_f, b_f=None):
    """softmax over taps of ``x_i[head slice] . w_f[h]`` for every (i, h)."""
    n = x.shape[0]
    heads, d_head, k = w_f.shape
    kern = np.zeros((n, heads, k))
    for i in range(n):
        for h in range(heads):
            logits = []
            for j in range(k):
                s = 0.0 if b_f is None else b_f[h, j]
                for t in range(d_head):
                    s += x[i, h * d_head + t] * w_f[h, t, j]
                logits.append(s)
            kern[i, h] = softmax(logits)
    return kern


def dconv(x, w_f, b_f=None):
    return lconv(x, head_kernels(x, w_f, b_f))


def span_key(x, w_dw, w_pw, b_pw=None):
    out = matmul(dwconv(x, w_dw), w_pw)
    if b_pw is not None:
        out = out + b_pw
    return out


def kernel_gen(q, k_s, w_f, b_f=None):
    n, d = q.shape
    prod = np.zeros((n, d))
    for i in range(n):
        for c in range(d):
            prod[i, c] = q[i, c] * k_s[i, c]
    return head_kernels(prod, w_f, b_f)


def sdconv(q, k_s, v, w_f, b_f=None):
    return lconv(v, kernel_gen(q, k_s, w_f, b_f))


def glu(x):
    n, w = x.shape
    half = w // 2
    out = np.zeros((n, half))
    for i in range(n):
        for c in range(half):
            out[i, c] = x[i, c] / (1.0 + math.exp(-x[i, half + c]))
    return out


def self_attention(q, k, v, heads, mask=None):
    """Quadruple loop over (head, query, key, channel).

    ``mask[j]`` False excludes key ``j``; rows with no valid key are zero.
    Returns ``(output, weights[heads, n, n])``.
    """
    n, width = q.shape
    d_head = width // heads
    valid = [True] * n if mask is None else [bool(m) for m in mask]
    out = np.zeros((n, width))
    weights = np.zeros((heads, n, n))
    scale = 1.0 / math.sqrt(d_head)
    for h in range(heads):
        lo = h * d_head
        for i in range(n):
            keys = [j for j in range(n) if valid[j]]
            if not keys:
                continue
            logits = []
            for j in keys:
                s = 0.0
                for c in range(d_head):
                    s += q[i, lo + c] * k[j, lo + c]
                logits.append(s * scale)
            probs = softmax(logits)
            for p, j in zip(probs, keys):
                weights[h, i, j] = p
            for c in range(d_head):
                s = 0.0
                for p, j in zip(probs, keys):
                    s += p * v[j, lo + c]
                out[i, lo + c] = s
    return out, weights


def grouped_linear(x, w, b, groups):
    """Dense product with a block-diagonal matrix assembled from ``w[g, a/g, b/g]``."""
    _, ga, gb = w.shape
    dense = np.zeros((ga * groups, gb * groups))
    for g in range(groups):
        dense[g * ga : (g + 1) * ga, g * gb : (g + 1) * gb] = w[g]
    return matmul(x, dense) + b


def mixed_attention(x, p, heads, mask=None):
    """Branch-composition reference for one mixed-attention block.

    ``p`` maps the block's parameter names to arrays (see
    :func:`convbert.attention.init_mixed_attention`).
    """
    q = matmul(x, p["wq"]) + p["bq"]
    k = matmul(x, p["wk"]) + p["bk"]
    v = matmul(x, p["wv"]) + p["bv"]
    attn, _ = self_attention(q, k, v, heads, mask)
    if "w_f" not in p:
        return matmul(attn, p["wo"]) + p["bo"]
    keep = np.ones((x.shape[0], 1)) if mask is None else np.asarray(mask, dtype=float)[:, None]
    # padded rows read as zeros inside convolution windows
    k_s = span_key(x * keep, p["w_dw"], p["w_pw"], p["b_pw"])
    v_conv = matmul(x, p["wcv"]) + p["bcv"] if "wcv" in p else v
    v_conv = v_conv * keep
    conv = sdconv(q, k_s, v_conv, p["w_f"], p["b_f"])
    return matmul(np.concatenate([attn, conv], axis=1), p["wo"]) + p["bo"]
