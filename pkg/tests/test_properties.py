"""Randomised properties (hypothesis) over shapes and values."""

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from convbert import oracles
from convbert.conv import dwconv, kernel_gen, lconv
from convbert.cost import count_flops
from convbert.encoder import preset
from convbert.tensor import Tensor, softmax

settings.register_profile("ci", max_examples=40, deadline=None)
settings.load_profile("ci")

odd_k = st.sampled_from([1, 3, 5, 7, 9])


@given(n=st.integers(1, 12), d=st.integers(1, 6), k=odd_k, seed=st.integers(0, 2**31 - 1))
def test_dwconv_matches_oracle(n, d, k, seed):
    rng = np.random.default_rng(seed)
    x, w = rng.standard_normal((n, d)), rng.standard_normal((d, k))
    np.testing.assert_allclose(dwconv(Tensor(x), Tensor(w)).data, oracles.dwconv(x, w), atol=1e-12)


@given(n=st.integers(1, 12), k=odd_k, seed=st.integers(0, 2**31 - 1))
def test_dwconv_is_linear(n, k, seed):
    rng = np.random.default_rng(seed)
    x, y, w = rng.standard_normal((n, 3)), rng.standard_normal((n, 3)), rng.standard_normal((3, k))
    lhs = dwconv(Tensor(2.0 * x + y), Tensor(w)).data
    rhs = 2.0 * dwconv(Tensor(x), Tensor(w)).data + dwconv(Tensor(y), Tensor(w)).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


@given(n=st.integers(1, 10), k=odd_k, seed=st.integers(0, 2**31 - 1))
def test_constant_kernel_lconv_preserves_interior_mean(n, k, seed):
    # a normalised kernel maps a constant signal to itself away from the borders
    rng = np.random.default_rng(seed)
    kern = rng.random((n, 1, k))
    kern /= kern.sum(-1, keepdims=True)
    out = lconv(Tensor(np.full((n, 2), 3.0)), Tensor(kern)).data
    pad = (k - 1) // 2
    if n > 2 * pad:
        np.testing.assert_allclose(out[pad:n - pad], 3.0, atol=1e-12)


@given(rows=st.integers(1, 5), cols=st.integers(1, 8), shift=st.floats(-50, 50), seed=st.integers(0, 2**31 - 1))
def test_softmax_sums_to_one_and_shift_invariant(rows, cols, shift, seed):
    x = np.random.default_rng(seed).standard_normal((rows, cols)) * 5
    a, b = softmax(Tensor(x)).data, softmax(Tensor(x + shift)).data
    np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(a, b, atol=1e-12)


@given(n=st.integers(1, 8), seed=st.integers(0, 2**31 - 1))
def test_kernel_gen_rows_are_distributions(n, seed):
    rng = np.random.default_rng(seed)
    kern = kernel_gen(Tensor(rng.standard_normal((n, 4))), Tensor(rng.standard_normal((n, 4))), Tensor(rng.standard_normal((2, 2, 3)))).data
    np.testing.assert_allclose(kern.sum(-1), 1.0, atol=1e-12)


@given(n=st.integers(1, 600), variant=st.sampled_from(["bnk+sdconv", "bnk+gl+sdconv"]))
def test_madd_scaling_is_exact(n, variant):
    cfg = preset("small", variant)
    a, b = count_flops(cfg, n), count_flops(cfg, 2 * n)
    assert b.sum_matching("scores") == 4 * a.sum_matching("scores")
    assert b.sum_matching("sdconv") == 2 * a.sum_matching("sdconv")
