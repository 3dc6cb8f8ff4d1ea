"""Bottlenecked multi-head self-attention and the mixed attention block.

The mixed block projects ``x[n, d]`` down to ``d_b = d / gamma`` for the
query, key and value, runs ``heads / gamma`` attention heads on them, runs a
span-based dynamic convolution that reuses the same query (with a span-aware
key from a depthwise-separable convolution over ``x``), concatenates both
branches to width ``2 * d_b`` and maps back to ``d`` with one output linear.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import oracles
from .conv import check_kernel_size, sdconv, span_key
from .errors import ConfigError, ContractError
from .tensor import (
    Tensor,
    add,
    as_tensor,
    concat,
    matmul,
    mul,
    parameter,
    reshape,
    scope,
    softmax,
    swapaxes,
)

naive_attention_oracle = oracles.self_attention


@dataclass(frozen=True)
class MixedAttentionConfig:
    d: int
    heads: int
    gamma: int = 2
    k: int = 9
    use_conv: bool = True
    separate_conv_value: bool = False

    def __post_init__(self):
        if self.d % self.heads:
            raise ConfigError(f"hidden size {self.d} not divisible by {self.heads} heads")
        if self.gamma < 1 or self.heads % self.gamma:
            raise ConfigError(f"reduction ratio {self.gamma} must divide head count {self.heads}")
        if self.use_conv and self.gamma != 2:
            raise ConfigError(f"mixed attention needs gamma=2 so both branches fill d; got {self.gamma}")
        check_kernel_size(self.k)

    @property
    def d_head(self) -> int:
        return self.d // self.heads

    @property
    def attn_heads(self) -> int:
        return self.heads // self.gamma

    @property
    def d_b(self) -> int:
        return self.d // self.gamma


def init_mixed_attention(cfg: MixedAttentionConfig, rng: np.random.Generator, std: float = 0.02) -> dict[str, Tensor]:
    """Fresh block parameters in declaration order."""
    d, db = cfg.d, cfg.d_b

    def w(*shape):
        return parameter(rng.normal(0.0, std, size=shape))

    def zeros(*shape):
        return parameter(np.zeros(shape))

    p = {
        "wq": w(d, db), "bq": zeros(db),
        "wk": w(d, db), "bk": zeros(db),
        "wv": w(d, db), "bv": zeros(db),
    }
    if cfg.use_conv:
        p.update({
            "w_dw": w(d, cfg.k),
            "w_pw": w(d, db), "b_pw": zeros(db),
            "w_f": w(cfg.attn_heads, cfg.d_head, cfg.k), "b_f": zeros(cfg.attn_heads, cfg.k),
        })
        if cfg.separate_conv_value:
            p.update({"wcv": w(d, db), "bcv": zeros(db)})
        p.update({"wo": w(2 * db, d), "bo": zeros(d)})
    else:
        p.update({"wo": w(db, d), "bo": zeros(d)})
    return p


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    return out if b is None else add(out, b)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # [..., n, H*dh] -> [..., H, n, dh]
    n, width = x.shape[-2:]
    return swapaxes(reshape(x, x.shape[:-1] + (heads, width // heads)), -2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    heads, n, dh = x.shape[-3:]
    return reshape(swapaxes(x, -2, -3), x.shape[:-3] + (n, heads * dh))


def self_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, mask=None, return_weights: bool = False):
    """Scaled dot-product attention over ``heads`` heads.

    ``mask`` is a boolean array over key positions (``[..., n]``, True means
    valid). Query rows with no valid key produce zeros.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    n = q.shape[-2]
    if n == 0:
        raise ContractError("self_attention on an empty sequence")
    if q.shape[-1] % heads:
        raise ConfigError(f"{heads} heads do not divide width {q.shape[-1]}")
    d_head = q.shape[-1] // heads
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    with scope("scores"):
        scores = mul(matmul(qh, swapaxes(kh, -1, -2)), 1.0 / math.sqrt(d_head))
        key_mask = None if mask is None else np.asarray(mask, dtype=bool)[..., None, None, :]
        weights = softmax(scores, axis=-1, mask=key_mask)
    with scope("context"):
        out = _merge_heads(matmul(weights, vh))
    return (out, weights) if return_weights else out


def bottleneck_project(x: Tensor, p: dict[str, Tensor], cfg: MixedAttentionConfig, mask=None):
    """Project ``x`` to the bottleneck width: returns ``(Q, K, V, K_s)``.

    ``K_s`` is None when the block has no convolution branch.
    """
    x = as_tensor(x)
    if x.shape[-1] != cfg.d:
        raise ConfigError(f"input width {x.shape[-1]} does not match block width {cfg.d}")
    with scope("qkv"):
        q = linear(x, p["wq"], p["bq"])
        k = linear(x, p["wk"], p["bk"])
        v = linear(x, p["wv"], p["bv"])
    k_s = None
    if cfg.use_conv:
        with scope("span_key"):
            xc = x if mask is None else mul(x, _keep(mask))
            k_s = span_key(xc, p["w_dw"], p["w_pw"], p["b_pw"])
    return q, k, v, k_s


def _keep(mask) -> np.ndarray:
    return np.asarray(mask, dtype=np.float64)[..., None]


def mixed_attention(x: Tensor, p: dict[str, Tensor], cfg: MixedAttentionConfig, mask=None, return_weights: bool = False):
    """Mixed attention block: ``OutputLinear(Cat(SelfAttn(Q,K,V), SDConv(Q,K_s,V)))``.

    With ``cfg.use_conv`` False this is plain (optionally bottlenecked)
    multi-head self-attention followed by the output linear.
    """
    q, k, v, k_s = bottleneck_project(x, p, cfg, mask)
    attn, weights = self_attention(q, k, v, cfg.attn_heads, mask, return_weights=True)
    if cfg.use_conv:
        with scope("sdconv"):
            v_conv = linear(x, p["wcv"], p["bcv"]) if cfg.separate_conv_value else v
            if mask is not None:
                v_conv = mul(v_conv, _keep(mask))
            conv = sdconv(q, k_s, v_conv, p["w_f"], p["b_f"])
        mixed = concat([attn, conv], axis=-1)
    else:
        mixed = attn
    with scope("output"):
        out = linear(mixed, p["wo"], p["bo"])
    return (out, weights) if return_weights else out


def average_attention_map(model, token_ids) -> np.ndarray:
    """Mean post-softmax attention matrix over all layers and heads.

    ``model`` is anything exposing ``forward(token_ids, return_attention=True)``
    that returns ``(hidden, [weights per layer])`` with weights shaped
    ``[heads, n, n]``.
    """
    _, maps = model.forward(np.asarray(token_ids), return_attention=True)
    stacked = np.stack([m.data if isinstance(m, Tensor) else np.asarray(m) for m in maps])
    flat = stacked.reshape((-1,) + stacked.shape[-2:])
    # mean of deviations from the first map: identical maps average to themselves exactly
    return flat[0] + (flat - flat[0]).mean(axis=0)
