"""Dense numpy-backed tensor with reverse-mode differentiation.

Every primitive builds its output through :func:`_node`, which records the
parents and a closure mapping the output gradient to parent gradients.
:class:`GradTape` orders the graph reachable from a loss and replays it
backward.

A multiply-add counter can be activated with :func:`count_madds`; primitives
report their cost to it under the current :func:`scope` path.
"""

from __future__ import annotations

import contextlib
from collections import defaultdict
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError, InputError

_GRAD_ENABLED = True
_COUNTER: "MaddCounter | None" = None
_SCOPE: list[str] = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


# --------------------------------------------------------------------------
# grad mode and multiply-add accounting


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class MaddCounter:
    """Accumulates multiply-adds reported by primitives, keyed by scope path."""

    def __init__(self):
        self.by_scope: dict[str, int] = defaultdict(int)

    @property
    def total(self) -> int:
        return sum(self.by_scope.values())

    def add(self, n: int) -> None:
        self.by_scope[".".join(_SCOPE)] += int(n)


@contextlib.contextmanager
def count_madds():
    global _COUNTER
    prev, _COUNTER = _COUNTER, MaddCounter()
    try:
        yield _COUNTER
    finally:
        _COUNTER = prev


@contextlib.contextmanager
def scope(name: str):
    _SCOPE.append(name)
    try:
        yield
    finally:
        _SCOPE.pop()


def _tally(n) -> None:
    if _COUNTER is not None:
        _COUNTER.add(n)


# --------------------------------------------------------------------------
# graph construction and backward


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


class GradTape:
    """Topologically ordered record of the graph that produced ``root``."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self, seed: np.ndarray) -> list[Tensor]:
        """Propagate ``seed`` from the root; returns nodes in visit order."""
        pending: dict[int, np.ndarray] = {id(self.root): seed}
        visited = []
        for node in reversed(self.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            visited.append(node)
            if node._backward is None:
                node.grad = np.array(g) if node.grad is None else node.grad + g
                continue
            grads = node._backward(g)
            for p, gp in zip(node._parents, grads):
                if gp is None or not p.requires_grad:
                    continue
                if gp.shape != p.data.shape:
                    gp = _unbroadcast(gp, p.data.shape)
                prev = pending.get(id(p))
                pending[id(p)] = gp if prev is None else prev + gp
        return visited


def backward(loss: Tensor) -> GradTape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor with requires_grad")
    tape = GradTape(loss)
    tape.replay(np.ones_like(loss.data))
    return tape


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    _tally(out.size)
    return _node(out, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    _tally(out.size)
    return _node(out, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    _tally(out.size)
    return _node(out, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    _tally(out.size)
    return _node(out, (a, b), lambda g: (g / b.data, -g * a.data / b.data**2))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    _tally(out.size)
    return _node(out, (x,), lambda g: (g * out,))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    _tally(out.size)
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / np.sqrt(2.0)))
    out = xd * cdf
    _tally(out.size)

    def bw(g):
        pdf = np.exp(-0.5 * xd * xd) / np.sqrt(2.0 * np.pi)
        return (g * (cdf + xd * pdf),)

    return _node(out, (x,), bw)


# --------------------------------------------------------------------------
# linear algebra and shape


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul cannot broadcast {a.shape} @ {b.shape}") from exc
    _tally(out.size * a.shape[-1])

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), bw)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    _tally(x.size)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _node(np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _node(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, axes)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    out = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, xs, bw)


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(np.array(out), (x,), bw)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; ids may have any shape."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise InputError(f"token ids must be integers, got dtype {ids.dtype}")
    vocab = table.shape[0]
    bad = np.flatnonzero((ids < 0) | (ids >= vocab))
    if bad.size:
        pos = np.unravel_index(bad[0], ids.shape)
        raise InputError(f"token id {ids[pos]} at index {tuple(int(p) for p in pos)} outside [0, {vocab})")
    out = table.data[ids]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _node(out, (table,), bw)


# --------------------------------------------------------------------------
# normalization


def softmax(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Max-shifted softmax; ``mask`` (True = valid) zeroes excluded entries.

    Slices where every entry is masked come out as all zeros.
    """
    xd = x.data
    if xd.ndim == 0 or xd.shape[axis] == 0:
        raise DimensionError(f"softmax over empty axis {axis} of shape {xd.shape}")
    if mask is None:
        out = xd - xd.max(axis=axis, keepdims=True)
        np.exp(out, out=out)
        out /= out.sum(axis=axis, keepdims=True)
    else:
        valid = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        m = np.where(valid, xd, -np.inf).max(axis=axis, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        e = np.where(valid, np.exp(np.where(valid, xd - m, 0.0)), 0.0)
        s = e.sum(axis=axis, keepdims=True)
        out = np.divide(e, s, out=np.zeros_like(e), where=s > 0)
    _tally(out.size)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    _tally(out.size)
    width = xd.shape[-1]

    def bw(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv / width * (
                width * dxhat
                - dxhat.sum(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
            )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node(out, (x, gamma, beta), bw)


# --------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean categorical cross-entropy of ``logits[M, V]`` against int ``targets[M]``."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy expects [M, V] and [M], got {logits.shape} and {targets.shape}")
    m = logits.shape[0]
    if m == 0:
        return Tensor(0.0)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(m)
    loss = float(np.mean(lse - z[rows, targets]))

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        return (g * p / m,)

    return _node(np.asarray(loss), (logits,), bw)


def bce_with_logits(logits: Tensor, labels, weights=None) -> Tensor:
    """Weighted mean binary cross-entropy; ``weights`` select contributing entries."""
    y = np.asarray(labels, dtype=np.float64)
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=np.float64)
    if logits.shape != y.shape or w.shape != y.shape:
        raise DimensionError(f"bce_with_logits shapes disagree: {logits.shape}, {y.shape}, {w.shape}")
    total = w.sum()
    if total == 0:
        return Tensor(0.0)
    z = logits.data
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    loss = float((w * per).sum() / total)

    def bw(g):
        p = 0.5 * (1.0 + np.tanh(0.5 * z))
        return (g * w * (p - y) / total,)

    return _node(np.asarray(loss), (logits,), bw)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
