import numpy as np
import pytest

from convbert.encoder import init_params, preset
from convbert.errors import ConfigError, InputError
from convbert.serialization import format_config, load_checkpoint, load_config, parse_config, save_checkpoint


def test_config_round_trip():
    cfg = preset("medium-small")
    back, extras = parse_config(format_config(cfg, {"note": "x"}))
    assert back == cfg and extras == {"note": "x"}


def test_preset_base_with_overrides(tmp_path):
    path = tmp_path / "cfg.txt"
    path.write_text("# tiny but wider\npreset = tiny\nd = 32\nd_emb = 32\n")
    cfg = load_config(str(path))
    assert (cfg.d, cfg.d_head, cfg.layers) == (32, 8, 2)
    assert load_config("small") == preset("small")


def test_bad_values_and_missing_keys():
    with pytest.raises(ConfigError):
        parse_config("preset = tiny\nlayers = many\n")
    with pytest.raises(ConfigError):
        parse_config("preset = tiny\nseparate_conv_value = maybe\n")
    with pytest.raises(ConfigError):
        parse_config("layers = 2\nd = 8\n")
    with pytest.raises(ConfigError):
        parse_config("no equals sign here\n")


def test_checkpoint_round_trip(tmp_path):
    cfg = preset("tiny")
    params = init_params(cfg, np.random.default_rng(0))
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, cfg, params, {"vocab": "[PAD] [CLS] a=b #c"})
    cfg2, params2, extras = load_checkpoint(path)
    assert cfg2 == cfg
    assert extras == {"vocab": "[PAD] [CLS] a=b #c"}
    assert list(params2) == list(params)
    for name in params:
        assert params2[name].data.dtype == np.float64
        np.testing.assert_array_equal(params2[name].data, params[name].data.astype(np.float32))


def test_bad_magic_and_truncation(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOPE!" + b"\0" * 10)
    with pytest.raises(InputError):
        load_checkpoint(bad)
    cfg = preset("tiny")
    good = tmp_path / "good.ckpt"
    save_checkpoint(good, cfg, init_params(cfg, np.random.default_rng(1)))
    cut = tmp_path / "cut.ckpt"
    cut.write_bytes(good.read_bytes()[:-7])
    with pytest.raises((InputError, ValueError)):
        load_checkpoint(cut)
