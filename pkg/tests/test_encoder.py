import numpy as np
import pytest

from convbert.encoder import VARIANTS, ConvBertModel, ModelConfig, grouped_linear, init_params, model_forward, param_shapes, preset
from convbert.errors import ConfigError, InputError
from convbert import oracles
from convbert.tensor import Tensor


def test_variant_switches():
    base = preset("tiny")
    flags = {v: (base.replace(variant=v).use_conv, base.replace(variant=v).block_gamma, base.replace(variant=v).ffn_groups) for v in VARIANTS}
    assert flags == {
        "bert-baseline": (False, 1, 1),
        "bnk": (False, 2, 1),
        "bnk+sdconv": (True, 2, 1),
        "bnk+gl": (False, 2, 2),
        "bnk+gl+sdconv": (True, 2, 2),
    }


def test_bad_configs_rejected():
    with pytest.raises(ConfigError):
        ModelConfig(layers=1, d=10, d_emb=10, ffn_inner=20, heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(layers=1, d=8, d_emb=8, ffn_inner=16, heads=2, k=4)
    with pytest.raises(ConfigError):
        ModelConfig(layers=1, d=8, d_emb=8, ffn_inner=16, heads=2, variant="bogus")
    with pytest.raises(ConfigError):
        preset("huge")


def test_grouped_linear_is_block_diagonal():
    rng = np.random.default_rng(0)
    x, w, b = rng.standard_normal((5, 6)), rng.standard_normal((3, 2, 4)), rng.standard_normal(12)
    np.testing.assert_allclose(grouped_linear(Tensor(x), Tensor(w), Tensor(b)).data, oracles.grouped_linear(x, w, b, 3), atol=1e-13)


def test_one_group_equals_dense():
    rng = np.random.default_rng(1)
    x, w = rng.standard_normal((4, 3)), rng.standard_normal((1, 3, 5))
    np.testing.assert_allclose(grouped_linear(Tensor(x), Tensor(w)).data, x @ w[0], atol=1e-14)


@pytest.mark.parametrize("variant", VARIANTS)
def test_forward_shapes_all_variants(variant):
    cfg = preset("tiny", variant)
    model = ConvBertModel(cfg, rng=np.random.default_rng(2))
    ids = np.random.default_rng(3).integers(0, cfg.vocab_size, size=(2, 7))
    h, maps = model(ids, return_attention=True)
    assert h.shape == (2, 7, cfg.d)
    assert len(maps) == cfg.layers and maps[0].shape == (2, cfg.attention.attn_heads, 7, 7)
    assert model.num_parameters() == sum(int(np.prod(s)) for _, s in param_shapes(cfg))


def test_forward_is_deterministic():
    cfg = preset("tiny")
    ids = np.arange(5, 14)
    a = model_forward(init_params(cfg, np.random.default_rng(4)), cfg, ids).data
    b = model_forward(init_params(cfg, np.random.default_rng(4)), cfg, ids).data
    np.testing.assert_array_equal(a, b)


def test_sequence_too_long():
    cfg = preset("tiny")
    with pytest.raises(InputError):
        ConvBertModel(cfg).forward(np.zeros(cfg.max_positions + 1, dtype=int))


def test_model_rejects_mismatched_params():
    cfg = preset("tiny")
    params = init_params(cfg, np.random.default_rng(5))
    params.pop("layer0.attn.wq")
    with pytest.raises(ConfigError):
        ConvBertModel(cfg, params)


def test_layer_output_is_normalised():
    cfg = preset("tiny")
    h = ConvBertModel(cfg, rng=np.random.default_rng(6)).forward(np.arange(5, 15)).data
    np.testing.assert_allclose(h.mean(-1), 0.0, atol=1e-12)
