"""Seeded verification suites shared by the CLI and the test-suite.

``oracle_suite`` compares every fast operator with its scalar-loop reference
on random instances; ``grad_suite`` compares reverse-mode gradients with
central finite differences.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import oracles
from .attention import MixedAttentionConfig, init_mixed_attention, mixed_attention, self_attention
from .conv import dconv, dwconv, glu, kernel_gen, lconv, sdconv, span_key
from .encoder import ffn, grouped_linear, init_params, model_forward, preset
from .gradcheck import grad_check
from .tensor import Tensor, as_tensor, bce_with_logits, cross_entropy, layer_norm, matmul, mul, parameter, reshape, softmax, tsum

KERNEL_SIZES = (1, 3, 5, 9)
ORACLE_OPS = (
    "dwconv", "lconv", "dconv", "span_key", "kernel_gen", "sdconv",
    "self_attention", "grouped_linear", "mixed_attention",
)
OP_GRAD_TOL = 1e-4
MODEL_GRAD_TOL = 1e-3


def _divisors(d: int) -> list[int]:
    return [h for h in range(1, d + 1) if d % h == 0]


def _instance(op: str, rng: np.random.Generator):
    """Random arguments for ``op`` (unit-scale, so differences are not hidden by tiny weights)."""
    n = int(rng.integers(1, 17))
    k = int(rng.choice(KERNEL_SIZES))
    r = rng.standard_normal
    if op in ("self_attention", "mixed_attention"):
        d = int(rng.choice([2, 4, 6, 8, 10, 12, 14, 16]))
        heads = int(rng.choice([h for h in _divisors(d) if h % 2 == 0]))
        mask = rng.random(n) < 0.8 if rng.random() < 0.5 else None
        if op == "self_attention":
            width = int(rng.integers(1, 5)) * heads
            return (r((n, width)), r((n, width)), r((n, width)), heads, mask)
        cfg = MixedAttentionConfig(d=d, heads=heads, k=k, separate_conv_value=bool(rng.random() < 0.3))
        p = {name: r(t.shape) for name, t in init_mixed_attention(cfg, rng).items()}
        return (r((n, d)), p, cfg, mask)
    d = int(rng.integers(1, 17))
    if op == "dwconv":
        return (r((n, d)), r((d, k)))
    if op == "lconv":
        heads = int(rng.choice(_divisors(d)))
        return (r((n, d)), r((n, heads, k)))
    if op == "grouped_linear":
        g = int(rng.integers(1, 5))
        a, b = g * int(rng.integers(1, 5)), g * int(rng.integers(1, 5))
        return (r((n, a)), r((g, a // g, b // g)), r(b))
    heads = int(rng.choice(_divisors(d)))
    w_f, b_f = r((heads, d // heads, k)), r((heads, k))
    if op == "dconv":
        return (r((n, d)), w_f, b_f)
    if op == "span_key":
        d_out = int(rng.integers(1, 17))
        return (r((n, d)), r((d, k)), r((d, d_out)), r(d_out))
    if op == "kernel_gen":
        return (r((n, d)), r((n, d)), w_f, b_f)
    if op == "sdconv":
        return (r((n, d)), r((n, d)), r((n, d)), w_f, b_f)
    raise KeyError(op)


def _fast(op: str, args) -> np.ndarray:
    fn = {
        "dwconv": dwconv, "lconv": lconv, "dconv": dconv, "span_key": span_key,
        "kernel_gen": kernel_gen, "sdconv": sdconv,
    }
    if op in fn:
        return fn[op](*args).data
    if op == "self_attention":
        q, k, v, heads, mask = args
        return self_attention(q, k, v, heads, mask).data
    if op == "grouped_linear":
        return grouped_linear(*args).data
    x, p, cfg, mask = args
    return mixed_attention(x, {n: as_tensor(a) for n, a in p.items()}, cfg, mask).data


def _slow(op: str, args) -> np.ndarray:
    if op == "self_attention":
        q, k, v, heads, mask = args
        return oracles.self_attention(q, k, v, heads, mask)[0]
    if op == "grouped_linear":
        x, w, b = args
        return oracles.grouped_linear(x, w, b, w.shape[0])
    if op == "mixed_attention":
        x, p, cfg, mask = args
        return oracles.mixed_attention(x, p, cfg.attn_heads, mask)
    return getattr(oracles, op)(*args)


def oracle_suite(seed: int = 0, instances: int = 50, ops=ORACLE_OPS) -> dict[str, float]:
    """Max absolute difference between fast operator and oracle, per operator."""
    rng = np.random.default_rng(seed)
    worst = {}
    for op in ops:
        err = 0.0
        for _ in range(instances):
            args = _instance(op, rng)
            err = max(err, float(np.max(np.abs(_fast(op, args) - _slow(op, args)), initial=0.0)))
        worst[op] = err
    return worst


# --------------------------------------------------------------------------
# gradients


def _op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    """Each case is ``(loss_fn, params)`` with loss ``sum(op(...) * R)`` for a fixed random ``R``."""
    n, d, heads, k = 7, 6, 2, 5

    def P(*shape, scale=1.0):
        return parameter(scale * rng.standard_normal(shape))

    cases = {}

    def case(name, build, params):
        proj = rng.standard_normal(build().shape)
        cases[name] = (lambda: tsum(mul(build(), proj)), params)

    x, w = P(n, d), P(d, k)
    case("dwconv", lambda: dwconv(x, w), [x, w])
    v, kern = P(n, d), P(n, heads, k)
    case("lconv", lambda: lconv(v, kern), [v, kern])
    xg = P(n, 2 * d)
    case("glu", lambda: glu(xg), [xg])
    xd, wf, bf = P(n, d), P(heads, d // heads, k), P(heads, k)
    case("dconv", lambda: dconv(xd, wf, bf), [xd, wf, bf])
    xs, wdw, wpw, bpw = P(n, d), P(d, k), P(d, 4), P(4)
    case("span_key", lambda: span_key(xs, wdw, wpw, bpw), [xs, wdw, wpw, bpw])
    q, ks, vv = P(n, d), P(n, d), P(n, d)
    case("kernel_gen", lambda: kernel_gen(q, ks, wf, bf), [q, ks, wf, bf])
    case("sdconv", lambda: sdconv(q, ks, vv, wf, bf), [q, ks, vv, wf, bf])
    mask = np.array([True] * (n - 2) + [False, False])
    qa, ka, va = P(n, d), P(n, d), P(n, d)
    case("self_attention", lambda: self_attention(qa, ka, va, heads, mask), [qa, ka, va])
    xl, wl, bl = P(n, 6), P(3, 2, 4), P(12)
    case("grouped_linear", lambda: grouped_linear(xl, wl, bl), [xl, wl, bl])
    xs2 = P(n, d)
    case("softmax", lambda: softmax(xs2, axis=-1), [xs2])
    xn, g, b = P(n, d), P(d), P(d)
    case("layer_norm", lambda: layer_norm(xn, g, b, 1e-12), [xn, g, b])
    logits, targets = P(n, 5), rng.integers(0, 5, n)
    cases["cross_entropy"] = (lambda: cross_entropy(logits, targets), [logits])
    bl2, labels, wts = P(n), (rng.random(n) < 0.5).astype(float), rng.random(n)
    cases["bce_with_logits"] = (lambda: bce_with_logits(bl2, labels, wts), [bl2])
    return cases


def _block_cases(rng: np.random.Generator):
    cases = {}
    n = 6
    mask = np.array([True] * (n - 1) + [False])
    for sep in (False, True):
        cfg = MixedAttentionConfig(d=8, heads=4, k=3, separate_conv_value=sep)
        p = {name: parameter(0.5 * rng.standard_normal(t.shape), name=name) for name, t in init_mixed_attention(cfg, rng).items()}
        x = parameter(rng.standard_normal((2, n, 8)), name="x")
        proj = rng.standard_normal((2, n, 8))
        name = "mixed_attention" + ("_separate_value" if sep else "")
        cases[name] = (
            lambda p=p, x=x, cfg=cfg, proj=proj: tsum(mul(mixed_attention(x, p, cfg, mask), proj)),
            [x, *p.values()],
        )
    fp = {
        "w1": parameter(rng.standard_normal((2, 4, 8)), name="w1"),
        "b1": parameter(rng.standard_normal(16), name="b1"),
        "w2": parameter(rng.standard_normal((2, 8, 4)), name="w2"),
        "b2": parameter(rng.standard_normal(8), name="b2"),
    }
    xf = parameter(rng.standard_normal((n, 8)), name="x")
    projf = rng.standard_normal((n, 8))
    cases["grouped_ffn"] = (lambda: tsum(mul(ffn(xf, fp), projf)), [xf, *fp.values()])
    return cases


def _model_cases(rng: np.random.Generator):
    cfg = preset("tiny")
    params = init_params(cfg, rng, std=0.3)
    ids = rng.integers(5, cfg.vocab_size, size=(2, 9))
    mask = np.ones(ids.shape, dtype=bool)
    mask[1, -3:] = False
    targets = rng.integers(0, cfg.vocab_size, size=(2, 9))
    head = parameter(0.3 * rng.standard_normal((cfg.d, cfg.vocab_size)), name="decoder")

    def loss():
        h = model_forward(params, cfg, ids, mask=mask)
        logits = reshape(matmul(h, head), (-1, cfg.vocab_size))
        keep = mask.reshape(-1)
        return cross_entropy(logits[np.flatnonzero(keep)], targets.reshape(-1)[keep])

    return {"tiny_model": (loss, [*params.values(), head])}


def grad_suite(scope: str = "op", seed: int = 0, max_coords: int = 24) -> dict[str, float]:
    """Worst relative gradient error per case for ``scope`` in {op, block, model}."""
    rng = np.random.default_rng(seed)
    builders = {"op": _op_cases, "block": _block_cases, "model": _model_cases}
    if scope not in builders:
        raise ValueError(f"scope must be one of {sorted(builders)}, got {scope!r}")
    cases = builders[scope](rng)
    return {name: float(grad_check(f, params, eps=1e-6, max_coords=max_coords, rng=rng)) for name, (f, params) in cases.items()}


def grad_tolerance(scope: str) -> float:
    return MODEL_GRAD_TOL if scope == "model" else OP_GRAD_TOL
