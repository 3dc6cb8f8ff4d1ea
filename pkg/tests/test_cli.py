import csv

import numpy as np
import pytest

from convbert.cli import main
from convbert.cost import CostReport, count_params
from convbert.encoder import preset
from convbert.pretrain import synthetic_corpus


def test_count_params_text_and_csv(capsys):
    assert main(["count-params", "--preset", "base", "--variant", "bnk"]) == 0
    assert "params=94,722,048" in capsys.readouterr().out
    assert main(["count-params", "--preset", "medium-small", "--csv"]) == 0
    report = CostReport.from_csv(capsys.readouterr().out)
    assert report.params == count_params(preset("medium-small")).params


def test_count_flops(capsys):
    assert main(["count-flops", "--preset", "tiny", "--seq-len", "8", "--csv"]) == 0
    rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
    assert rows[0]["component"] == "tiny/n=8" and int(rows[0]["madds"]) > 0


@pytest.mark.parametrize("argv", [
    ["count-params"],
    ["count-params", "--preset", "small", "--bogus"],
    ["count-params", "--preset", "nope"],
    ["grad-check", "--scope", "galaxy"],
    ["frobnicate"],
    [],
])
def test_usage_errors_exit_2(argv, capsys):
    assert main(argv) == 2
    assert "usage" in capsys.readouterr().err


def test_help_exits_0(capsys):
    assert main(["train", "--help"]) == 0
    assert "--objective" in capsys.readouterr().out


def test_grad_and_oracle_checks(capsys):
    assert main(["grad-check", "--scope", "op", "--seed", "1"]) == 0
    assert main(["oracle-check", "--seed", "3", "--instances", "3"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "mixed_attention" in out


def test_verification_failure_exits_1(monkeypatch):
    import convbert.cli as cli

    monkeypatch.setattr(cli, "grad_suite", lambda scope, seed: {"broken": 0.5})
    assert cli.main(["grad-check", "--scope", "op"]) == 1


def test_train_then_dump_attention(tmp_path, capsys):
    corpus = tmp_path / "corpus.txt"
    corpus.write_text("\n".join(synthetic_corpus(8, 6, 12, np.random.default_rng(0))) + "\n")
    out = tmp_path / "run"
    argv = ["train", "--objective", "rtd", "--corpus", str(corpus), "--steps", "2", "--config", "tiny",
            "--out", str(out), "--batch-size", "4", "--seq-len", "8"]
    assert main(argv) == 0
    assert (out / "metrics.csv").exists()
    dump = tmp_path / "att.csv"
    assert main(["dump-attention", "--checkpoint", str(out / "model.ckpt"), "--text", "w1 w2 unseen", "--out", str(dump)]) == 0
    rows = list(csv.reader(dump.open()))
    assert rows[0] == ["0:[CLS]", "1:w1", "2:w2", "3:unseen", "4:[SEP]"]
    mat = np.array(rows[1:], dtype=float)
    assert mat.shape == (5, 5)
    np.testing.assert_allclose(mat.sum(axis=1), 1.0, atol=1e-6)


def test_missing_checkpoint_is_error(tmp_path, capsys):
    assert main(["dump-attention", "--checkpoint", str(tmp_path / "x"), "--text", "a", "--out", str(tmp_path / "y")]) == 2
    assert "error" in capsys.readouterr().err


def test_bench_scaling_reports_exact_madd_ratios(capsys):
    assert main(["bench-scaling", "--preset", "tiny", "--lens", "16,32", "--repeats", "1"]) == 0
    rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
    madds = {(int(r["n"]), r["component"]): int(r["madds"]) for r in rows}
    assert madds[(32, "attention")] == 4 * madds[(16, "attention")]
    assert madds[(32, "sdconv")] == 2 * madds[(16, "sdconv")]


def test_bench_scaling_bad_lens(capsys):
    assert main(["bench-scaling", "--preset", "tiny", "--lens", "a,b"]) == 2
