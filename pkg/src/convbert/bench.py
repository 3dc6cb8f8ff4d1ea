"""Per-component wall time and counted multiply-adds for one mixed-attention layer."""

from __future__ import annotations

import ctypes
import ctypes.util
import timeit

import numpy as np

from .attention import init_mixed_attention, linear, self_attention
from .conv import sdconv, span_key
from .cost import count_flops
from .encoder import ModelConfig, ffn, init_params
from .tensor import no_grad

COMPONENTS = ("qkv", "span_key", "attention", "sdconv", "ffn")


def pin_allocator(limit: int = 256 << 20) -> bool:
    """Keep large temporaries on the glibc heap instead of fresh mmap pages.

    glibc moves its mmap threshold depending on allocation history, so the
    same operator can run 2-3x slower from page faults alone. Pinning both
    thresholds makes repeated timings comparable. Returns False off glibc.
    """
    name = ctypes.util.find_library("c")
    if not name:
        return False
    try:
        libc = ctypes.CDLL(name)
        m_trim_threshold, m_mmap_threshold = -1, -3
        return bool(libc.mallopt(m_mmap_threshold, limit)) and bool(libc.mallopt(m_trim_threshold, 2 * limit))
    except (OSError, AttributeError):
        return False


def _best_time(fn, repeats: int) -> float:
    """Best per-call time over ``repeats`` runs of a loop lasting at least 0.2 s."""
    fn()  # warm-up (JIT compilation, allocator)
    timer = timeit.Timer(fn)
    number, _ = timer.autorange()
    return min(timer.repeat(repeat=repeats, number=number)) / number


def layer_madds(cfg: ModelConfig, n: int, batch: int = 1) -> dict[str, int]:
    """Counted MAdds of layer 0, grouped like :data:`COMPONENTS`."""
    report = count_flops(cfg, n, batch).find("layer0")
    att = report.find("attention")
    out = {
        "qkv": att.find("qkv").madds,
        "attention": att.find("scores").madds + att.find("context").madds,
        "ffn": report.find("ffn").madds,
    }
    if cfg.use_conv:
        out["span_key"] = att.find("span_key").madds
        out["sdconv"] = att.find("sdconv").madds
    return out


def layer_timings(cfg: ModelConfig, n: int, batch: int = 1, repeats: int = 5, seed: int = 0, components=COMPONENTS) -> dict[str, float]:
    """Best-of-``repeats`` forward seconds for each requested component of one layer."""
    rng = np.random.default_rng(seed)
    acfg = cfg.attention
    p = init_mixed_attention(acfg, rng)
    fp = {k.split(".")[-1]: v for k, v in init_params(cfg.replace(layers=1), rng).items() if ".ffn." in k}
    x = rng.standard_normal((batch, n, cfg.d))
    q, k, v = (rng.standard_normal((batch, n, acfg.d_b)) for _ in range(3))
    fns = {
        "qkv": lambda: [linear(x, p[w], p[b]) for w, b in (("wq", "bq"), ("wk", "bk"), ("wv", "bv"))],
        "attention": lambda: self_attention(q, k, v, acfg.attn_heads),
        "ffn": lambda: ffn(x, fp),
    }
    if acfg.use_conv:
        fns["span_key"] = lambda: span_key(x, p["w_dw"], p["w_pw"], p["b_pw"])
        fns["sdconv"] = lambda: sdconv(q, k, v, p["w_f"], p["b_f"])
    with no_grad():
        return {name: _best_time(fn, repeats) for name, fn in fns.items() if name in components}


def scaling_rows(cfg: ModelConfig, lens, batch: int = 1, repeats: int = 5, seed: int = 0, components=COMPONENTS) -> list[dict]:
    """One row per (length, component): ``n, component, seconds, madds``."""
    rows = []
    for n in lens:
        secs = layer_timings(cfg, n, batch, repeats, seed, components)
        madds = layer_madds(cfg, n, batch)
        for comp in COMPONENTS:
            if comp in secs:
                rows.append({"n": n, "component": comp, "seconds": secs[comp], "madds": madds[comp]})
    return rows
