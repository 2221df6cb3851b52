import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from mgsr import autodiff as ad
from mgsr import trainer as tr
from mgsr.cli import main


def run_dirs(out: Path, prefix: str) -> list[Path]:
    return sorted(p for p in out.iterdir() if p.name.startswith(prefix + "-"))


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    assert main(["gen-corpus", "--seed", "4", "--splits", "train:96,valid:16,test:16", "--out", str(out)]) == 0
    (run,) = run_dirs(out, "gen-corpus")
    return run


def common(corpus, out, *extra):
    return ["--vocab", str(corpus / "vocab.txt"), "--corpus", str(corpus / "train.tsv"),
            "--valid", str(corpus / "valid.tsv"), "--out", str(out), "--batch-size", "16",
            "--max-new-tokens", "12", *extra]


@pytest.fixture(scope="module")
def teacher(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("teach")
    assert main(["train-teacher", *common(corpus, out, "--epochs", "1")]) == 0
    (run,) = run_dirs(out, "train-teacher")
    return run / "model.ckpt"


def test_help_and_usage_errors(capsys):
    proc = subprocess.run([sys.executable, "-m", "mgsr", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "distill" in proc.stdout
    for cmd in ("gen-corpus", "train-teacher", "distill", "evaluate", "compare-losses", "inspect-dac", "generate"):
        assert main([cmd, "--help"]) == 0
    assert main(["distill", "--bogus"]) == 2
    assert main([]) == 2
    assert main(["distill", "--teacher", "x", "--corpus", "y", "--policy", "sideways"]) == 2
    assert main(["distill", "--teacher", "x", "--corpus", "y", "--loss-weights", "1,2"]) == 2


def test_missing_file_exit_code(tmp_path, capsys):
    code = main(["train-teacher", "--corpus", str(tmp_path / "none.tsv"), "--vocab", str(tmp_path / "v.txt"),
                 "--out", str(tmp_path)])
    assert code == 1
    assert "error" in capsys.readouterr().err


def test_corpus_layout(corpus):
    names = {p.name for p in corpus.iterdir()}
    assert {"vocab.txt", "lexicon.txt", "train.tsv", "valid.tsv", "test.tsv", "run.json", "files.json"} <= names
    assert json.loads((corpus / "run.json").read_text())["command"] == "gen-corpus"


def test_train_teacher_layout(teacher):
    run = teacher.parent
    for name in ("run.json", "config.json", "metrics.jsonl", "summary.json", "losses.png", "model.ckpt"):
        assert (run / name).exists(), name
    assert run.name.split("-")[-2].isdigit()


def test_sft_cross_check(corpus, teacher, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train-teacher", *common(corpus, a, "--epochs", "2", "--model", "student")]) == 0
    assert main(["distill", "--teacher", str(teacher), "--loss-weights", "1,0,0", "--policy", "fixed",
                 *common(corpus, b, "--epochs", "2")]) == 0
    (ra,) = run_dirs(a, "train-teacher")
    (rb,) = run_dirs(b, "distill")
    assert (ra / "model.ckpt").read_bytes() == (rb / "model.ckpt").read_bytes()


def test_distill_evaluate_generate_inspect(corpus, teacher, tmp_path, capsys):
    assert main(["distill", "--teacher", str(teacher), "--clip-mode", "hard", "--seeds", "10,20",
                 *common(corpus, tmp_path, "--epochs", "1")]) == 0
    (run,) = run_dirs(tmp_path, "distill")
    assert (run / "subnet.ckpt").exists() and (run / "samples.jsonl").exists()
    capsys.readouterr()

    assert main(["evaluate", "--student", str(run / "model.ckpt"), "--corpus", str(corpus / "test.tsv"),
                 "--vocab", str(corpus / "vocab.txt"), "--seeds", "10,20", "--out", str(tmp_path)]) == 0
    (ev,) = run_dirs(tmp_path, "evaluate")
    scores = json.loads((ev / "scores.json").read_text())
    assert set(scores["per_seed"]) == {"10", "20"}
    assert (ev / "scores.png").exists()
    assert "mean" in capsys.readouterr().out

    (tmp_path / "prompts.txt").write_text("describe the red fox\n")
    assert main(["generate", "--model", str(run / "model.ckpt"), "--prompts", str(tmp_path / "prompts.txt"),
                 "--vocab", str(corpus / "vocab.txt"), "--out", str(tmp_path)]) == 0
    (gen,) = run_dirs(tmp_path, "generate")
    assert len(json.loads((gen / "completions.json").read_text())) == 1

    assert main(["inspect-dac", "--teacher", str(teacher), "--student", str(run / "subnet.ckpt"),
                 "--corpus", str(corpus / "test.tsv"), "--vocab", str(corpus / "vocab.txt"),
                 "--samples", "0,1", "--positions", "0,2", "--out", str(tmp_path)]) == 0
    (ins,) = run_dirs(tmp_path, "inspect-dac")
    info = json.loads((ins / "inspect.json").read_text())
    assert [(r["sample"], r["position"]) for r in info] == [(0, 0), (0, 2), (1, 0), (1, 2)]
    assert all(0 <= r["lower"] <= r["upper"] <= 1 and r["selected"] for r in info)
    assert len(list(ins.glob("*.png"))) == 4 and len(list(ins.glob("*.csv"))) == 4

    assert main(["inspect-dac", "--teacher", str(teacher), "--quantiles", "0.2,0.01", "--corpus",
                 str(corpus / "test.tsv"), "--vocab", str(corpus / "vocab.txt"), "--out", str(tmp_path / "q")]) == 0
    assert main(["inspect-dac", "--teacher", str(teacher), "--quantiles", "0.2", "--corpus",
                 str(corpus / "test.tsv"), "--vocab", str(corpus / "vocab.txt"), "--out", str(tmp_path / "q")]) != 0


def test_nan_exit_code(corpus, tmp_path, monkeypatch, capsys):
    real = tr.batch_sft
    monkeypatch.setattr(tr, "batch_sft", lambda m, ex, grad=True: real(m, ex, grad) * ad.as_tensor(np.inf))
    assert main(["train-teacher", *common(corpus, tmp_path, "--epochs", "1")]) == 3
    assert "checkpoint" in capsys.readouterr().err


def test_vocab_mismatch_is_reported(corpus, teacher, tmp_path):
    short = tmp_path / "vocab.txt"
    short.write_text("\n".join((corpus / "vocab.txt").read_text().splitlines()[:-1]) + "\n")
    code = main(["distill", "--teacher", str(teacher), "--vocab", str(short), "--corpus", str(corpus / "train.tsv"),
                 "--lexicon", str(corpus / "lexicon.txt"), "--out", str(tmp_path)])
    assert code == 1


def test_config_file_precedence(corpus, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 3, "learning_rate": 1e-3}))
    assert main(["train-teacher", "--config", str(cfg), "--model", "student",
                 *common(corpus, tmp_path, "--epochs", "1")]) == 0
    (run,) = run_dirs(tmp_path, "train-teacher")
    saved = json.loads((run / "config.json").read_text())
    assert saved["epochs"] == 1 and saved["learning_rate"] == 1e-3
