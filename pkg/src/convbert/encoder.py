"""ConvBERT encoder: embeddings, grouped feed-forward and the layer stack."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .attention import MixedAttentionConfig, linear, mixed_attention
from .errors import ConfigError, InputError
from .tensor import (
    Tensor,
    add,
    as_tensor,
    embedding,
    gelu,
    layer_norm,
    matmul,
    parameter,
    reshape,
    scope,
    swapaxes,
)

VARIANTS = ("bert-baseline", "bnk", "bnk+sdconv", "bnk+gl", "bnk+gl+sdconv")


@dataclass(frozen=True)
class ModelConfig:
    layers: int
    d: int
    d_emb: int
    ffn_inner: int
    heads: int
    groups: int = 1
    gamma: int = 2
    k: int = 9
    vocab_size: int = 30522
    max_positions: int = 512
    variant: str = "bnk+sdconv"
    type_vocab_size: int = 2
    separate_conv_value: bool = False
    layer_norm_eps: float = 1e-12
    d_head: int | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.d % self.heads:
            raise ConfigError(f"hidden size {self.d} not divisible by {self.heads} heads")
        if self.d_head is None:
            object.__setattr__(self, "d_head", self.d // self.heads)
        elif self.d_head * self.heads != self.d:
            raise ConfigError(f"d_head {self.d_head} x heads {self.heads} != hidden size {self.d}")
        g = self.ffn_groups
        if self.d % g or self.ffn_inner % g:
            raise ConfigError(f"{g} groups must divide hidden size {self.d} and ffn_inner {self.ffn_inner}")
        if min(self.layers, self.d_emb, self.vocab_size, self.max_positions) < 1:
            raise ConfigError("layers, d_emb, vocab_size and max_positions must be positive")
        self.attention  # validates gamma, heads and k

    @property
    def use_conv(self) -> bool:
        return "sdconv" in self.variant

    @property
    def block_gamma(self) -> int:
        return self.gamma if "bnk" in self.variant else 1

    @property
    def ffn_groups(self) -> int:
        return self.groups if "gl" in self.variant else 1

    @property
    def attention(self) -> MixedAttentionConfig:
        return MixedAttentionConfig(
            d=self.d,
            heads=self.heads,
            gamma=self.block_gamma,
            k=self.k,
            use_conv=self.use_conv,
            separate_conv_value=self.separate_conv_value,
        )

    def replace(self, **changes) -> "ModelConfig":
        if "heads" in changes or "d" in changes:
            changes.setdefault("d_head", None)
        return dataclasses.replace(self, **changes)


PRESETS = {
    "small": ModelConfig(layers=12, d=256, d_emb=128, ffn_inner=1024, heads=4, groups=1, variant="bnk+sdconv"),
    "medium-small": ModelConfig(layers=12, d=384, d_emb=128, ffn_inner=1536, heads=8, groups=2, variant="bnk+gl+sdconv"),
    "base": ModelConfig(layers=12, d=768, d_emb=768, ffn_inner=3072, heads=12, groups=1, variant="bnk+sdconv"),
    "tiny": ModelConfig(layers=2, d=16, d_emb=16, ffn_inner=32, heads=4, groups=2, k=3, vocab_size=64, max_positions=32, variant="bnk+gl+sdconv"),
}


def preset(name: str, variant: str | None = None) -> ModelConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}") from None
    return cfg if variant is None else cfg.replace(variant=variant)


# --------------------------------------------------------------------------
# parameters


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Every learnable tensor of the encoder, in declaration order."""
    d, a = cfg.d, cfg.attention
    db, g, f = a.d_b, cfg.ffn_groups, cfg.ffn_inner
    shapes = [("embeddings.word", (cfg.vocab_size, cfg.d_emb))]
    if cfg.d_emb != d:
        shapes += [("embeddings.proj_w", (cfg.d_emb, d)), ("embeddings.proj_b", (d,))]
    shapes += [
        ("embeddings.position", (cfg.max_positions, d)),
        ("embeddings.segment", (cfg.type_vocab_size, d)),
        ("embeddings.ln_g", (d,)),
        ("embeddings.ln_b", (d,)),
    ]
    for i in range(cfg.layers):
        pre = f"layer{i}."
        attn = [("wq", (d, db)), ("bq", (db,)), ("wk", (d, db)), ("bk", (db,)), ("wv", (d, db)), ("bv", (db,))]
        if a.use_conv:
            attn += [
                ("w_dw", (d, cfg.k)),
                ("w_pw", (d, db)), ("b_pw", (db,)),
                ("w_f", (a.attn_heads, a.d_head, cfg.k)), ("b_f", (a.attn_heads, cfg.k)),
            ]
            if a.separate_conv_value:
                attn += [("wcv", (d, db)), ("bcv", (db,))]
            attn += [("wo", (2 * db, d)), ("bo", (d,))]
        else:
            attn += [("wo", (db, d)), ("bo", (d,))]
        shapes += [(pre + "attn." + n, s) for n, s in attn]
        shapes += [
            (pre + "attn_ln_g", (d,)),
            (pre + "attn_ln_b", (d,)),
            (pre + "ffn.w1", (g, d // g, f // g)),
            (pre + "ffn.b1", (f,)),
            (pre + "ffn.w2", (g, f // g, d // g)),
            (pre + "ffn.b2", (d,)),
            (pre + "ffn_ln_g", (d,)),
            (pre + "ffn_ln_b", (d,)),
        ]
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator, std: float = 0.02) -> dict[str, Tensor]:
    params = {}
    for name, shape in param_shapes(cfg):
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("ln_g"):
            data = np.ones(shape)
        elif leaf.startswith("b") or leaf.endswith("_b"):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, std, size=shape)
        params[name] = parameter(data, name=name)
    return params


def _sub(params: dict[str, Tensor], prefix: str) -> dict[str, Tensor]:
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


# --------------------------------------------------------------------------
# forward pieces


def embed(params: dict[str, Tensor], cfg: ModelConfig, token_ids, positions=None, segments=None) -> Tensor:
    """Word (+ projection) + position + segment embeddings, then layer norm."""
    ids = np.asarray(token_ids)
    n = ids.shape[-1]
    if n > cfg.max_positions:
        raise InputError(f"sequence length {n} exceeds max_positions {cfg.max_positions}")
    positions = np.arange(n) if positions is None else np.asarray(positions)
    segments = np.zeros(ids.shape, dtype=np.int64) if segments is None else np.asarray(segments)
    with scope("embeddings"):
        with scope("word"):
            h = embedding(params["embeddings.word"], ids)
        if cfg.d_emb != cfg.d:
            with scope("projection"):
                h = linear(h, params["embeddings.proj_w"], params["embeddings.proj_b"])
        with scope("position"):
            h = add(h, embedding(params["embeddings.position"], positions))
        with scope("segment"):
            h = add(h, embedding(params["embeddings.segment"], segments))
        with scope("norm"):
            h = layer_norm(h, params["embeddings.ln_g"], params["embeddings.ln_b"], cfg.layer_norm_eps)
    return h


def grouped_linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Block-diagonal linear map; ``w`` is ``[groups, a/g, b/g]``.

    The last axis of ``x`` is cut into ``groups`` contiguous slices, each
    multiplied by its own block, and the results concatenated.
    """
    x, w = as_tensor(x), as_tensor(w)
    g, ga, gb = w.shape
    if x.shape[-1] != g * ga:
        raise ConfigError(f"grouped linear expects width {g}x{ga}={g * ga}, got {x.shape[-1]}")
    if g == 1:
        out = matmul(x, reshape(w, (ga, gb)))
    else:
        lead = x.shape[:-1]
        xg = swapaxes(reshape(x, lead + (g, ga)), -2, -3)  # [..., g, n, a/g]
        out = reshape(swapaxes(matmul(xg, w), -2, -3), lead + (g * gb,))
    return out if b is None else add(out, b)


def ffn(x: Tensor, p: dict[str, Tensor]) -> Tensor:
    """grouped_linear -> GELU -> grouped_linear (residual and norm are applied by the caller)."""
    return grouped_linear(gelu(grouped_linear(x, p["w1"], p["b1"])), p["w2"], p["b2"])


def model_forward(params: dict[str, Tensor], cfg: ModelConfig, token_ids, mask=None, segments=None, return_attention: bool = False):
    """Embeddings followed by ``cfg.layers`` post-norm mixed-attention layers.

    ``token_ids`` is ``[n]`` or ``[batch, n]``; ``mask`` (same shape, True =
    real token) hides padding keys from attention and zeroes padded rows in
    the convolution windows. Returns the final hidden states, plus the list of
    per-layer attention weights ``[..., heads, n, n]`` when requested.
    """
    acfg = cfg.attention
    h = embed(params, cfg, token_ids, segments=segments)
    maps = []
    for i in range(cfg.layers):
        pre = f"layer{i}."
        with scope(f"layer{i}"):
            with scope("attention"):
                a, weights = mixed_attention(h, _sub(params, pre + "attn."), acfg, mask, return_weights=True)
            with scope("attention_norm"):
                h = layer_norm(add(h, a), params[pre + "attn_ln_g"], params[pre + "attn_ln_b"], cfg.layer_norm_eps)
            with scope("ffn"):
                f = ffn(h, _sub(params, pre + "ffn."))
            with scope("ffn_norm"):
                h = layer_norm(add(h, f), params[pre + "ffn_ln_g"], params[pre + "ffn_ln_b"], cfg.layer_norm_eps)
        maps.append(weights)
    return (h, maps) if return_attention else h


class ConvBertModel:
    """Parameters plus config; ``forward`` delegates to :func:`model_forward`."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None, rng: np.random.Generator | None = None):
        self.cfg = cfg
        if params is None:
            params = init_params(cfg, rng if rng is not None else np.random.default_rng(0))
        expected = param_shapes(cfg)
        if [n for n, _ in expected] != list(params):
            raise ConfigError("parameter names do not match the configuration")
        for name, shape in expected:
            if params[name].shape != shape:
                raise ConfigError(f"parameter {name} has shape {params[name].shape}, expected {shape}")
        self.params = params

    def forward(self, token_ids, mask=None, segments=None, return_attention: bool = False):
        return model_forward(self.params, self.cfg, token_ids, mask, segments, return_attention)

    __call__ = forward

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
