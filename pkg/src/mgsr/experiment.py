"""Toy end-to-end experiment: SFT-only student vs full-method distilled student."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

from .checkpoint import to_bytes
from .corpus import Vocab, gen_synthetic_corpus, load_corpus
from .evaluation import evaluate_multiseed
from .lm import TransformerLM, student_config
from .spans import load_annotations, load_lexicon
from .trainer import TrainConfig, distill, rouge_evaluator, train_teacher

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    corpus_seed: int = 0
    n_train: int = 10_000
    n_valid: int = 500
    n_test: int = 500
    teacher_epochs: int = 8
    student_epochs: int = 6
    seed: int = 0
    seeds: list = field(default_factory=lambda: [10, 20, 30, 40, 50])
    clip_mode: str = "soft:0.01"
    policy: str = "scrg-on"


@dataclass
class StudentRun:
    rouge_l: float
    per_seed: dict
    checkpoint: bytes
    metrics: list
    seconds: float


def _student_run(cfg: TrainConfig, teacher, train, valid, test, vocab, lexicon, seeds, out: Path) -> StudentRun:
    t0 = time.perf_counter()
    student = TransformerLM(student_config(len(vocab), seed=cfg.model_seed))
    rouge = rouge_evaluator(valid, seeds[0], vocab.eos, cfg.max_new_tokens)
    res = distill(cfg, teacher, student, train, valid=valid, out_dir=out, stop_token=vocab.eos,
                  lexicon=lexicon, rouge_eval=rouge)
    ev = evaluate_multiseed(res.model, test, seeds, decode=vocab.decode, stop_token=vocab.eos,
                            max_new_tokens=cfg.max_new_tokens)
    metrics = [m.to_json() for m in res.metrics]
    return StudentRun(ev.mean.f1, {s: sc.f1 for s, sc in ev.per_seed.items()}, to_bytes(res.model), metrics,
                      time.perf_counter() - t0)


def student_configs(exp: ExperimentConfig) -> dict[str, TrainConfig]:
    common = dict(epochs=exp.student_epochs, seed=exp.seed, seeds=list(exp.seeds), select_by="val_rouge")
    return {
        "sft": TrainConfig(policy="fixed", loss_weights=[1.0, 0.0, 0.0], **common),
        "full": TrainConfig(policy=exp.policy, loss="dackl", clip_mode=exp.clip_mode,
                            loss_weights=[1.0, 1.0, 1.0], **common),
    }


def run_experiment(out_dir: str | Path, exp: ExperimentConfig = ExperimentConfig(),
                   teacher: TransformerLM | None = None) -> dict:
    """Train the teacher, both students, and score them on the test split."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    paths = gen_synthetic_corpus(out / "corpus", exp.corpus_seed, exp.n_train + exp.n_valid + exp.n_test,
                                 splits=[("train", exp.n_train), ("valid", exp.n_valid), ("test", exp.n_test)])
    vocab = Vocab.load(paths["vocab"])
    lexicon = load_lexicon(paths["lexicon"])
    train = load_corpus(paths["train"], vocab, load_annotations(paths["train_spans"]))
    valid = load_corpus(paths["valid"], vocab)
    test = load_corpus(paths["test"], vocab)

    timings = {}
    if teacher is None:
        t0 = time.perf_counter()
        (out / "teacher").mkdir(exist_ok=True)
        tcfg = TrainConfig(epochs=exp.teacher_epochs, seed=exp.seed, model="teacher", loss_weights=[1.0, 0.0, 0.0])
        teacher = train_teacher(tcfg, train, valid, out / "teacher", vocab_size=len(vocab)).model
        timings["teacher"] = time.perf_counter() - t0
    t_eval = evaluate_multiseed(teacher, test, exp.seeds, decode=vocab.decode, stop_token=vocab.eos)

    runs = {}
    for name, cfg in student_configs(exp).items():
        (out / name).mkdir(exist_ok=True)
        runs[name] = _student_run(cfg, teacher, train, valid, test, vocab, lexicon, exp.seeds, out / name)
        timings[name] = runs[name].seconds
        log.info("%s student: ROUGE-L %.4f (%.0fs)", name, runs[name].rouge_l, runs[name].seconds)
    summary = {
        "teacher_rouge_l": t_eval.mean.f1,
        "sft_rouge_l": runs["sft"].rouge_l,
        "full_rouge_l": runs["full"].rouge_l,
        "sft_per_seed": runs["sft"].per_seed,
        "full_per_seed": runs["full"].per_seed,
        "timings": timings,
        "total_seconds": time.perf_counter() - start,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, default=str) + "\n", encoding="utf-8")
    summary["runs"] = runs
    summary["teacher"] = teacher
    summary["data"] = (train, valid, test, vocab, lexicon)
    return summary


def rerun_students(out_dir: str | Path, exp: ExperimentConfig, teacher: TransformerLM, data) -> dict[str, StudentRun]:
    """Repeat both student runs with the same configs (reproducibility check)."""
    train, valid, test, vocab, lexicon = data
    out = Path(out_dir)
    runs = {}
    for name, cfg in student_configs(exp).items():
        (out / name).mkdir(parents=True, exist_ok=True)
        runs[name] = _student_run(cfg, teacher, train, valid, test, vocab, lexicon, exp.seeds, out / name)
    return runs
