import math

import numpy as np
import pytest

from convbert.encoder import ModelConfig, preset
from convbert.errors import InputError, NonFiniteGradientError
from convbert.pretrain import (
    TrainState,
    Trainer,
    Vocab,
    adam_step,
    generator_config,
    lr_schedule,
    mask_tokens,
    pretrain_losses,
    rtd_make_example,
    sample_tokens,
    synthetic_corpus,
    train_loop,
)
from convbert.tensor import Tensor, parameter

TINY = ModelConfig(layers=1, d=16, d_emb=16, ffn_inner=32, heads=4, k=3, vocab_size=64, max_positions=16)


def test_mask_rate_and_split():
    rng = np.random.default_rng(0)
    seq = np.arange(5, 105)
    picked = masked = random = kept = 0
    for _ in range(400):
        ex = mask_tokens(seq, rng, 0.15, vocab_size=200)
        picked += ex.positions.size
        got = ex.input_ids[ex.positions]
        masked += int(np.sum(got == 3))
        kept += int(np.sum(got == seq[ex.positions]))
        random += int(np.sum((got != 3) & (got != seq[ex.positions])))
        np.testing.assert_array_equal(ex.originals, seq[ex.positions])
    assert picked / 40000 == pytest.approx(0.15, abs=0.01)
    assert masked / picked == pytest.approx(0.8, abs=0.02)
    assert (random + kept) / picked == pytest.approx(0.2, abs=0.02)


def test_specials_never_masked():
    rng = np.random.default_rng(1)
    seq = np.array([1, 7, 8, 9, 2, 0, 0])
    for _ in range(50):
        ex = mask_tokens(seq, rng, 1.0, vocab_size=20)
        assert set(ex.positions.tolist()) == {1, 2, 3}


def test_nothing_maskable():
    with pytest.raises(InputError):
        mask_tokens(np.array([1, 2, 0]), np.random.default_rng(0))


def test_sample_tokens_follows_distribution():
    rng = np.random.default_rng(2)
    logits = np.tile(np.log([0.1, 0.6, 0.3]), (20000, 1))
    counts = np.bincount(sample_tokens(logits, rng), minlength=3) / 20000
    np.testing.assert_allclose(counts, [0.1, 0.6, 0.3], atol=0.015)


def test_rtd_labels_mark_exactly_the_changed_tokens():
    rng = np.random.default_rng(3)
    seq = np.arange(5, 25)

    def generator(ids):
        logits = np.zeros((ids.size, 30))
        logits[:, 5] = 5.0  # mostly token 5
        return logits

    for _ in range(20):
        ex = rtd_make_example(generator, seq, rng, 0.3, vocab_size=30)
        np.testing.assert_array_equal(ex.labels, (ex.input_ids != seq).astype(int))
        changed = np.flatnonzero(ex.labels)
        assert set(changed.tolist()) <= set(ex.masked.positions.tolist())


def test_analytic_losses():
    V = 7
    out = pretrain_losses(Tensor(np.zeros((4, V))), np.array([0, 1, 2, 3]), Tensor(np.zeros(5)), np.ones(5), np.ones(5), 50.0)
    assert float(out.mlm.data) == pytest.approx(math.log(V), abs=1e-14)
    assert float(out.rtd.data) == pytest.approx(math.log(2), abs=1e-14)
    assert float(out.joint.data) == pytest.approx(math.log(V) + 50 * math.log(2), abs=1e-12)


@pytest.mark.filterwarnings("ignore:no masked positions")
def test_rtd_loss_ignores_padding():
    logits = Tensor(np.array([0.0, 0.0, 100.0]))
    out = pretrain_losses(None, [], logits, np.array([1.0, 0.0, 0.0]), np.array([1.0, 1.0, 0.0]))
    assert out.mlm_empty
    assert float(out.rtd.data) == pytest.approx(math.log(2), abs=1e-14)


def test_lr_schedule_frozen():
    assert [lr_schedule(s, 10, 110) for s in (0, 5, 10, 60, 110)] == [0.0, 0.5, 1.0, 0.5, 0.0]
    with pytest.warns(RuntimeWarning):
        assert lr_schedule(111, 10, 110) == 0.0


def test_first_adam_step_is_lr_times_sign():
    p = parameter(np.array([1.0, 1.0, 1.0]))
    p.grad = np.array([0.5, -2.0, 1e-3])
    adam_step(TrainState(), {"w": p}, lr=0.1)
    g = np.array([0.5, -2.0, 1e-3])
    # bias correction makes m_hat = g and sqrt(v_hat) = |g| on step one
    np.testing.assert_allclose(p.data, 1.0 - 0.1 * g / (np.abs(g) + 1e-6), atol=1e-14)


def test_weight_decay_skips_norm_and_bias():
    w, b, g = (parameter(np.array([2.0])) for _ in range(3))
    for t in (w, b, g):
        t.grad = np.zeros(1)
    adam_step(TrainState(weight_decay=0.1), {"l.w1": w, "l.b1": b, "l.ln_g": g}, lr=1.0)
    assert w.data[0] == pytest.approx(1.8) and b.data[0] == 2.0 and g.data[0] == 2.0


def test_non_finite_gradient_rejects_whole_step():
    a, b = parameter(np.array([1.0])), parameter(np.array([1.0]))
    a.grad, b.grad = np.array([1.0]), np.array([np.nan])
    state = TrainState()
    with pytest.raises(NonFiniteGradientError):
        adam_step(state, {"a": a, "b": b}, lr=0.1)
    assert state.step == 0 and a.data[0] == 1.0


def test_generator_config_rounds_heads():
    gcfg = generator_config(preset("small"), 0.25)
    assert (gcfg.d, gcfg.heads, gcfg.ffn_inner, gcfg.d_emb) == (64, 2, 256, 128)


def test_vocab_round_trip():
    vocab = Vocab.build(["b a a", "c a"])
    assert vocab.itos[5:] == ["a", "b", "c"]
    assert Vocab.from_string(vocab.to_string()).itos == vocab.itos
    assert vocab.encode("a zzz") == [5, vocab.unk_id]


@pytest.mark.parametrize("objective", ["mlm", "rtd"])
def test_short_runs_are_deterministic(objective):
    corpus = synthetic_corpus(12, 8, 20, np.random.default_rng(0))
    logs = [Trainer(TINY, corpus, objective, seed=7, batch_size=4, seq_len=10, total_steps=5).run(5).log for _ in range(2)]
    assert logs[0] == logs[1]
    other = Trainer(TINY, corpus, objective, seed=8, batch_size=4, seq_len=10, total_steps=5).run(5).log
    assert other != logs[0]


def test_shared_embedding_is_one_tensor():
    corpus = synthetic_corpus(8, 6, 10, np.random.default_rng(0))
    tr = Trainer(TINY, corpus, "rtd", batch_size=4, seq_len=8)
    assert tr.generator.params["embeddings.word"] is tr.model.params["embeddings.word"]
    assert sum(1 for k in tr.params if k.endswith("embeddings.word")) == 1


def test_train_loop_writes_metrics_and_checkpoint(tmp_path):
    corpus = synthetic_corpus(8, 6, 10, np.random.default_rng(0))
    train_loop(TINY, corpus, "mlm", steps=3, seed=0, out_dir=tmp_path, batch_size=4, seq_len=8)
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == "step,lr,mlm_loss,rtd_loss,joint_loss" and len(lines) == 4
    assert (tmp_path / "model.ckpt").stat().st_size > 0


def test_corpus_smaller_than_batch():
    with pytest.raises(InputError):
        Trainer(TINY, ["a b", "c d"], "mlm", batch_size=4)
