"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, EvaluationError
from .tensor import Tensor, backward, no_grad


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-6,
    max_coords: int | None = 64,
    rng: np.random.Generator | None = None,
) -> float:
    """Max over sampled coordinates of ``|analytic - numeric| / max(1, |analytic|)``.

    ``f`` recomputes a scalar loss from the current values of ``params``.
    Each parameter contributes every coordinate if it has at most
    ``max_coords`` entries, otherwise a random sample of that many.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params:
        if p.data.dtype != np.float64:
            raise ContractError(f"grad_check needs float64 parameters, got {p.data.dtype}")
        p.grad = None
    backward(f())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def evaluate(pi, flat):
        with no_grad():
            val = float(f().data)
        if not np.isfinite(val):
            name = params[pi].name or f"params[{pi}]"
            coord = np.unravel_index(flat, params[pi].shape)
            raise EvaluationError(f"non-finite loss when perturbing {name} at {tuple(int(c) for c in coord)}")
        return val

    worst = 0.0
    for pi, p in enumerate(params):
        flat_data = p.data.reshape(-1)
        if max_coords is None or p.size <= max_coords:
            coords = np.arange(p.size)
        else:
            coords = rng.choice(p.size, size=max_coords, replace=False)
        for flat in coords:
            orig = flat_data[flat]
            flat_data[flat] = orig + eps
            up = evaluate(pi, flat)
            flat_data[flat] = orig - eps
            down = evaluate(pi, flat)
            flat_data[flat] = orig
            numeric = (up - down) / (2.0 * eps)
            a = analytic[pi].reshape(-1)[flat]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
        p.grad = None
    return worst
