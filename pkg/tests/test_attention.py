import numpy as np
import pytest

from convbert import oracles
from convbert.attention import MixedAttentionConfig, average_attention_map, init_mixed_attention, mixed_attention, self_attention
from convbert.encoder import ConvBertModel, preset
from convbert.errors import ConfigError, ContractError
from convbert.tensor import Tensor


def test_zero_scores_average_values():
    q = np.zeros((2, 2))
    v = np.array([[1.0, 2.0], [3.0, 6.0]])
    out, w = self_attention(q, np.ones((2, 2)), v, heads=1, return_weights=True)
    np.testing.assert_array_equal(w.data, np.full((1, 2, 2), 0.5))
    np.testing.assert_array_equal(out.data, [[2.0, 4.0], [2.0, 4.0]])


def test_scores_use_query_times_key_transpose():
    # q0 . k1 is large, q0 . k0 is 0: row 0 must concentrate on key 1
    q = np.array([[10.0, 0.0], [0.0, 0.0]])
    k = np.array([[0.0, 1.0], [1.0, 0.0]])
    _, w = self_attention(q, k, np.eye(2), heads=1, return_weights=True)
    assert w.data[0, 0, 1] > 0.999


def test_masked_keys_get_zero_weight():
    rng = np.random.default_rng(0)
    q, k, v = (rng.standard_normal((5, 4)) for _ in range(3))
    mask = np.array([True, True, False, True, False])
    out, w = self_attention(q, k, v, heads=2, mask=mask, return_weights=True)
    assert np.all(w.data[..., ~mask] == 0.0)
    ref_out, ref_w = oracles.self_attention(q, k, v, 2, mask)
    np.testing.assert_allclose(out.data, ref_out, atol=1e-13)
    np.testing.assert_allclose(w.data, ref_w, atol=1e-15)


def test_all_masked_gives_zero_rows():
    rng = np.random.default_rng(1)
    q, k, v = (rng.standard_normal((3, 2)) for _ in range(3))
    out = self_attention(q, k, v, heads=1, mask=np.zeros(3, dtype=bool))
    np.testing.assert_array_equal(out.data, 0.0)


def test_empty_sequence_is_contract_error():
    with pytest.raises(ContractError):
        self_attention(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros((0, 2)), heads=1)


def test_mixed_attention_requires_gamma_two():
    with pytest.raises(ConfigError):
        MixedAttentionConfig(d=8, heads=4, gamma=4)
    MixedAttentionConfig(d=8, heads=4, gamma=4, use_conv=False)


def test_mixed_block_shapes_and_widths():
    cfg = MixedAttentionConfig(d=16, heads=4, k=9)
    assert (cfg.d_b, cfg.attn_heads, cfg.d_head) == (8, 2, 4)
    p = init_mixed_attention(cfg, np.random.default_rng(2))
    assert p["wo"].shape == (16, 16)  # concat of two d/2 branches
    assert p["w_f"].shape == (2, 4, 9)
    x = np.random.default_rng(3).standard_normal((2, 10, 16))
    assert mixed_attention(x, p, cfg).shape == (2, 10, 16)


@pytest.mark.parametrize("separate", [False, True])
def test_mixed_attention_matches_composition_oracle(separate):
    rng = np.random.default_rng(4)
    cfg = MixedAttentionConfig(d=8, heads=4, k=5, separate_conv_value=separate)
    p = {n: rng.standard_normal(t.shape) for n, t in init_mixed_attention(cfg, rng).items()}
    x = rng.standard_normal((9, 8))
    mask = np.array([True] * 7 + [False] * 2)
    fast = mixed_attention(x, {n: Tensor(a) for n, a in p.items()}, cfg, mask).data
    np.testing.assert_allclose(fast, oracles.mixed_attention(x, p, cfg.attn_heads, mask), atol=1e-12)


def test_padding_does_not_leak_into_real_positions():
    rng = np.random.default_rng(5)
    cfg = MixedAttentionConfig(d=8, heads=4, k=3)
    p = {n: Tensor(rng.standard_normal(t.shape)) for n, t in init_mixed_attention(cfg, rng).items()}
    x = rng.standard_normal((6, 8))
    mask = np.array([True] * 4 + [False] * 2)
    x2 = x.copy()
    x2[4:] = rng.standard_normal((2, 8))  # different junk in the padding
    a = mixed_attention(x, p, cfg, mask).data[:4]
    b = mixed_attention(x2, p, cfg, mask).data[:4]
    np.testing.assert_allclose(a, b, atol=1e-14)


def test_average_attention_map_rows_sum_to_one():
    model = ConvBertModel(preset("tiny"), rng=np.random.default_rng(6))
    avg = average_attention_map(model, np.array([1, 7, 9, 11, 2]))
    assert avg.shape == (5, 5)
    np.testing.assert_allclose(avg.sum(axis=1), 1.0, atol=1e-12)
