"""Command-line entry point: ``mgsr <command> [flags]``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import divergences as dv
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .corpus import GrammarConfig, Vocab, gen_synthetic_corpus, load_corpus
from .evaluation import evaluate_multiseed, export_density, write_eval_dump
from .lm import GREEDY, DecodeMode, TransformerLM, batch_response_probs, generate_batch
from .scrg import GenerationPolicy
from .spans import load_annotations, load_lexicon
from .trainer import NaNLossError, TrainConfig, distill, rouge_evaluator, train_teacher

log = logging.getLogger("mgsr")

EXIT_OK, EXIT_MISSING, EXIT_USAGE, EXIT_NAN = 0, 1, 2, 3


class MissingFile(Exception):
    pass


# -- argument types (bad values become usage errors) ------------------------

def _typed(fn, what):
    def parse(text):
        try:
            fn(text)
        except ValueError as exc:
            raise argparse.ArgumentTypeError(f"invalid {what} {text!r}: {exc}") from None
        return text
    return parse


def _seed_list(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed list {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("seed list is empty")
    return seeds


def _decode_mode(text: str) -> DecodeMode:
    try:
        if text == "greedy":
            return GREEDY
        if text == "sample":
            return DecodeMode("sample", 1.0)
        if text.startswith("sample:"):
            return DecodeMode("sample", float(text.split(":", 1)[1]))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    raise argparse.ArgumentTypeError(f"decode mode must be greedy, sample or sample:T, got {text!r}")


# -- parser ---------------------------------------------------------------------

# flag dest -> TrainConfig field
_CONFIG_FLAGS = {
    "seed": "seed", "policy": "policy", "loss": "loss", "loss_weights": "loss_weights",
    "clip_mode": "clip_mode", "epochs": "epochs", "lr": "learning_rate", "seeds": "seeds",
    "dac_components": "dac_components", "batch_size": "batch_size", "model": "model",
    "select_by": "select_by", "max_new_tokens": "max_new_tokens",
}


def _common(p: argparse.ArgumentParser, training: bool = False) -> None:
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="out", help="parent directory for run directories (default: out)")
    p.add_argument("--vocab", help="vocabulary file, one token per line")
    p.add_argument("--seeds", type=_seed_list, help="comma-separated evaluation seeds")
    p.add_argument("-v", "--verbose", action="store_true")
    if training:
        p.add_argument("--corpus", required=True)
        p.add_argument("--spans")
        p.add_argument("--valid", help="validation TSV (default: hold out part of --corpus)")
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--max-new-tokens", type=int)
        p.add_argument("--select-by", choices=("val_loss", "val_rouge"))


def _distill_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--teacher", required=True)
    p.add_argument("--student", help="student initialisation checkpoint (default: fresh student)")
    p.add_argument("--lexicon", help="part-of-speech lexicon (default: lexicon.txt next to --vocab)")
    p.add_argument("--policy", type=_typed(GenerationPolicy.parse, "policy"),
                   help="fixed | student | teacher | mixed:R | scrg-on | scrg-off")
    p.add_argument("--loss-weights", type=_typed(dv.LossWeights.parse, "loss weights"), help="A,B,C")
    p.add_argument("--clip-mode", type=_typed(dv.ClipMode.parse, "clip mode"), help="hard | soft:TAU")
    p.add_argument("--dac-components", choices=dv.COMPONENTS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mgsr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="write a synthetic corpus with gold spans")
    _common(p)
    p.add_argument("--size", type=int, default=11000)
    p.add_argument("--splits", help="name:count,... e.g. train:10000,valid:500,test:500")
    p.add_argument("--world-seed", type=int, default=GrammarConfig.world_seed)

    p = sub.add_parser("train-teacher", help="supervised fine-tuning")
    _common(p, training=True)
    p.add_argument("--model", choices=("teacher", "student"), default=None,
                   help="architecture preset (default: teacher)")

    p = sub.add_parser("distill", help="distil a teacher into a student")
    _common(p, training=True)
    _distill_flags(p)
    p.add_argument("--loss", choices=dv.LOSS_NAMES)

    p = sub.add_parser("evaluate", help="multi-seed ROUGE-L")
    _common(p)
    p.add_argument("--student", "--model", dest="student", required=True, help="checkpoint to evaluate")
    p.add_argument("--corpus", required=True)
    p.add_argument("--decode", type=_decode_mode, default=DecodeMode("sample", 1.0))
    p.add_argument("--max-new-tokens", type=int, default=28)

    p = sub.add_parser("compare-losses", help="one distillation run per objective")
    _common(p, training=True)
    _distill_flags(p)
    p.add_argument("--test", help="evaluation TSV (default: the validation split)")

    p = sub.add_parser("inspect-dac", help="KDE of original vs clipped teacher distributions")
    _common(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--student", help="student checkpoint (sub-network input); default: teacher")
    p.add_argument("--subnet", help="checkpoint holding a sub-network (default: --student)")
    p.add_argument("--quantiles", help="fixed U,L instead of a sub-network")
    p.add_argument("--corpus", required=True)
    p.add_argument("--samples", default="0", help="comma-separated corpus line indices")
    p.add_argument("--positions", default="0", help="comma-separated response positions")
    p.add_argument("--clip-mode", type=_typed(dv.ClipMode.parse, "clip mode"), default="hard")
    p.add_argument("--grid-size", type=int, default=256)

    p = sub.add_parser("generate", help="complete prompts from a file")
    _common(p)
    p.add_argument("--student", "--model", dest="student", required=True)
    p.add_argument("--prompts", required=True, help="one whitespace-tokenised prompt per line")
    p.add_argument("--decode", type=_decode_mode, default=GREEDY)
    p.add_argument("--max-new-tokens", type=int, default=28)
    return parser


# -- helpers ----------------------------------------------------------------------

def _need(path: str | None, what: str) -> Path:
    if path is None:
        raise MissingFile(f"missing required {what}")
    p = Path(path)
    if not p.is_file():
        raise MissingFile(f"{what} not found: {p}")
    return p


def resolve_config(args: argparse.Namespace, command: str) -> TrainConfig:
    """Defaults < config file < flags."""
    data: dict = {}
    if getattr(args, "config", None):
        data.update(json.loads(_need(args.config, "config file").read_text(encoding="utf-8")))
    if command == "train-teacher":
        data.setdefault("model", "teacher")
        data.setdefault("loss_weights", [1.0, 0.0, 0.0])
    for dest, name in _CONFIG_FLAGS.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if dest == "loss_weights":
            value = list(dv.LossWeights.parse(value).__dict__.values())
        data[name] = value
    return TrainConfig.from_dict(data)


def make_run_dir(args: argparse.Namespace, payload: dict) -> Path:
    blob = json.dumps({"command": args.command, **payload}, sort_keys=True, default=str)
    digest = hashlib.sha256(blob.encode("utf-8")).hexdigest()[:8]
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(args.out) / f"{args.command}-{digest}-{stamp}"
    run, k = base, 1
    while run.exists():
        run = Path(f"{base}-{k}")
        k += 1
    run.mkdir(parents=True)
    (run / "run.json").write_text(json.dumps({"command": args.command, **payload}, indent=2, sort_keys=True,
                                             default=str) + "\n", encoding="utf-8")
    return run


def _vocab(args) -> Vocab:
    return Vocab.load(_need(args.vocab, "--vocab"))


def _corpus(path: str, vocab: Vocab, spans: str | None = None):
    ann = load_annotations(_need(spans, "--spans")) if spans else None
    return load_corpus(_need(path, "corpus"), vocab, ann)


def _lexicon(args, vocab_path: Path):
    if getattr(args, "lexicon", None):
        return load_lexicon(_need(args.lexicon, "--lexicon"))
    default = vocab_path.parent / "lexicon.txt"
    return load_lexicon(default) if default.is_file() else None


def _load_model(path: str, what: str) -> tuple[TransformerLM, dv.SubNetwork | None]:
    return load_checkpoint(_need(path, what))


def _print_table(headers: Sequence[str], rows: Sequence[Sequence], out=None) -> str:
    cells = [[str(h) for h in headers]] + [[f"{c:.4f}" if isinstance(c, float) else str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    text = "\n".join(lines)
    print(text, file=out or sys.stdout)
    return text


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _decoder(vocab: Vocab):
    return lambda ids: vocab.decode(ids)


# -- commands ---------------------------------------------------------------------

def cmd_gen_corpus(args) -> int:
    seed = args.seed if args.seed is not None else 0
    splits = None
    if args.splits:
        try:
            splits = [(name, int(n)) for name, n in (s.split(":") for s in args.splits.split(","))]
        except ValueError:
            raise UsageError(f"bad --splits {args.splits!r}") from None
        size = sum(n for _, n in splits)
    else:
        size = args.size
    run = make_run_dir(args, {"seed": seed, "size": size, "splits": splits, "world_seed": args.world_seed})
    paths = gen_synthetic_corpus(run, seed, size, GrammarConfig(world_seed=args.world_seed), splits)
    rows = [(k, str(v)) for k, v in paths.items()]
    _print_table(["file", "path"], rows)
    _write_json(run / "files.json", {k: str(v) for k, v in paths.items()})
    return EXIT_OK


def _training_inputs(args):
    vocab_path = _need(args.vocab, "--vocab")
    vocab = Vocab.load(vocab_path)
    corpus = _corpus(args.corpus, vocab, args.spans)
    valid = load_corpus(_need(args.valid, "--valid"), vocab) if args.valid else None
    return vocab_path, vocab, corpus, valid


def _report_training(run: Path, result, config: TrainConfig) -> None:
    from .plotting import plot_losses

    plot_losses(result.metrics, run / "losses.png")
    val = [(m.epoch, m.validation_loss, m.validation_rouge) for m in result.metrics if m.validation_loss is not None]
    rows = [(e, v, "" if r is None else r) for e, v, r in val]
    _print_table(["epoch", "val_loss", "val_rouge"], rows)
    _write_json(run / "summary.json", {
        "best_epoch": result.best_epoch, "config": config.to_dict(),
        "epochs": [{"epoch": e, "validation_loss": v, "validation_rouge": r} for e, v, r in val],
        "checkpoint": str(result.checkpoint) if result.checkpoint else None,
    })
    print(f"checkpoint: {result.checkpoint}")


def cmd_train_teacher(args) -> int:
    config = resolve_config(args, "train-teacher")
    vocab_path, vocab, corpus, valid = _training_inputs(args)
    run = make_run_dir(args, {"config": config.to_dict(), "corpus": args.corpus, "valid": args.valid})
    _write_json(run / "config.json", config.to_dict())
    result = train_teacher(config, corpus, valid, run, vocab_size=len(vocab))
    _report_training(run, result, config)
    return EXIT_OK


def _student_init(args, config: TrainConfig, vocab_size: int):
    if args.student:
        model, subnet = _load_model(args.student, "--student")
        return model, subnet
    return TransformerLM(config.model_config(vocab_size)), None


def _run_distill(args, config: TrainConfig, run: Path, vocab_path, vocab, corpus, valid):
    teacher, _ = _load_model(args.teacher, "--teacher")
    if teacher.config.vocab_size != len(vocab):
        raise ValueError(f"teacher vocabulary size {teacher.config.vocab_size} != vocab file size {len(vocab)}")
    student, subnet = _student_init(args, config, len(vocab))
    rouge = None
    if config.select_by == "val_rouge":
        val_set = valid if valid is not None else corpus
        rouge = rouge_evaluator(val_set, config.seeds[0], vocab.eos, config.max_new_tokens)
    return distill(config, teacher, student, corpus, valid=valid, out_dir=run, stop_token=vocab.eos,
                   lexicon=_lexicon(args, vocab_path), rouge_eval=rouge, subnet=subnet)


def cmd_distill(args) -> int:
    config = resolve_config(args, "distill")
    vocab_path, vocab, corpus, valid = _training_inputs(args)
    run = make_run_dir(args, {"config": config.to_dict(), "corpus": args.corpus, "teacher": args.teacher,
                              "student": args.student, "valid": args.valid})
    _write_json(run / "config.json", config.to_dict())
    result = _run_distill(args, config, run, vocab_path, vocab, corpus, valid)
    _report_training(run, result, config)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    vocab = _vocab(args)
    model, _ = _load_model(args.student, "--student")
    data = _corpus(args.corpus, vocab)
    seeds = args.seeds or [10, 20, 30, 40, 50]
    run = make_run_dir(args, {"model": args.student, "corpus": args.corpus, "seeds": seeds,
                              "decode": str(args.decode)})
    res = evaluate_multiseed(model, data, seeds, args.decode, decode=_decoder(vocab), stop_token=vocab.eos,
                             max_new_tokens=args.max_new_tokens)
    write_eval_dump(res, run / "eval.jsonl")
    rows = [(s, sc.precision, sc.recall, sc.f1) for s, sc in res.per_seed.items()]
    rows.append(("mean", res.mean.precision, res.mean.recall, res.mean.f1))
    _print_table(["seed", "precision", "recall", "f1"], rows)
    _write_json(run / "scores.json", {
        "mean": res.mean.__dict__, "per_seed": {str(s): sc.__dict__ for s, sc in res.per_seed.items()},
    })
    from .plotting import plot_bars

    plot_bars([str(s) for s in res.per_seed], [sc.f1 for sc in res.per_seed.values()], run / "scores.png",
              "ROUGE-L f1")
    return EXIT_OK


def cmd_compare_losses(args) -> int:
    base = resolve_config(args, "compare-losses")
    vocab_path, vocab, corpus, valid = _training_inputs(args)
    test = load_corpus(_need(args.test, "--test"), vocab) if args.test else None
    run = make_run_dir(args, {"config": base.to_dict(), "corpus": args.corpus, "teacher": args.teacher,
                              "valid": args.valid, "test": args.test})
    rows, records = [], []
    for name in dv.LOSS_NAMES:
        cfg = TrainConfig.from_dict({**base.to_dict(), "loss": name})
        sub = run / name
        sub.mkdir()
        result = _run_distill(args, cfg, sub, vocab_path, vocab, corpus, valid)
        eval_set = test or valid or corpus[: max(1, len(corpus) // 20)]
        res = evaluate_multiseed(result.model, eval_set, cfg.seeds, decode=_decoder(vocab),
                                 stop_token=vocab.eos, max_new_tokens=cfg.max_new_tokens)
        last = result.metrics[-1] if result.metrics else None
        best_val = min((m.validation_loss for m in result.metrics if m.validation_loss is not None), default=None)
        rec = {"loss": name, "final_divergence": last.loss_dac if last else None, "best_validation_loss": best_val,
               "rouge_l": res.mean.f1, "per_seed": {str(s): sc.f1 for s, sc in res.per_seed.items()}}
        records.append(rec)
        rows.append((name, rec["final_divergence"] if last else "", best_val if best_val is not None else "",
                     res.mean.f1))
    _print_table(["loss", "final_divergence", "best_val_loss", "rouge_l"], rows)
    _write_json(run / "comparison.json", records)
    with open(run / "comparison.csv", "w", encoding="utf-8") as fh:
        fh.write("loss,final_divergence,best_validation_loss,rouge_l\n")
        for r in records:
            fh.write(f"{r['loss']},{r['final_divergence']},{r['best_validation_loss']},{r['rouge_l']}\n")
    from .plotting import plot_bars

    plot_bars([r["loss"] for r in records], [r["rouge_l"] for r in records], run / "comparison.png", "ROUGE-L f1")
    return EXIT_OK


def _int_list(text: str, what: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"bad {what} {text!r}") from None


def cmd_inspect_dac(args) -> int:
    vocab = _vocab(args)
    teacher, _ = _load_model(args.teacher, "--teacher")
    student, subnet = _load_model(args.student, "--student") if args.student else (teacher, None)
    if args.subnet:
        _, subnet = _load_model(args.subnet, "--subnet")
    quantiles = None
    if args.quantiles:
        try:
            u, l = (float(x) for x in args.quantiles.split(","))
            quantiles = dv.QuantilePair(u, l)
        except ValueError as exc:
            raise UsageError(f"bad --quantiles {args.quantiles!r}: {exc}") from None
    elif subnet is None:
        raise UsageError("inspect-dac needs --quantiles or a checkpoint with a sub-network")
    data = _corpus(args.corpus, vocab)
    samples = _int_list(args.samples, "--samples")
    positions = _int_list(args.positions, "--positions")
    run = make_run_dir(args, {"teacher": args.teacher, "student": args.student, "subnet": args.subnet,
                              "quantiles": args.quantiles, "samples": samples, "positions": positions,
                              "clip_mode": args.clip_mode})
    mode = dv.ClipMode.parse(args.clip_mode)
    from .plotting import plot_density

    rows, summary = [], []
    for i in samples:
        if not 0 <= i < len(data):
            raise UsageError(f"sample index {i} outside corpus of {len(data)} lines")
        ex = data[i]
        t_probs, _ = batch_response_probs(teacher, [ex.prompt], [ex.response])
        s_probs, _ = batch_response_probs(student, [ex.prompt], [ex.response])
        for pos in positions:
            if not 0 <= pos < len(ex.response):
                raise UsageError(f"position {pos} outside response of length {len(ex.response)} (sample {i})")
            t, s = t_probs[0, pos], s_probs[0, pos]
            q = quantiles
            if q is None:
                u, l = dv.predict_quantiles(subnet, t[None], s[None])
                q = dv.QuantilePair(float(u.data[0]), float(l.data[0]))
            sel = dv.dac_clip(t, q, mode)
            dens = export_density(t, sel, args.grid_size)
            stem = f"density_{i}_{pos}"
            dens.to_csv(run / f"{stem}.csv")
            plot_density(dens, run / f"{stem}.png", f"sample {i}, position {pos}, u={q.upper:.3g}, l={q.lower:.3g}")
            rows.append((i, pos, q.upper, q.lower, len(sel.indices), f"{stem}.csv"))
            summary.append({"sample": i, "position": pos, "upper": q.upper, "lower": q.lower,
                            "selected": [int(k) for k in sel.indices], "csv": f"{stem}.csv",
                            "bandwidth_original": dens.bandwidth_original,
                            "bandwidth_clipped": dens.bandwidth_clipped})
    _print_table(["sample", "position", "u", "l", "n_selected", "csv"], rows)
    _write_json(run / "inspect.json", summary)
    return EXIT_OK


def cmd_generate(args) -> int:
    vocab = _vocab(args)
    model, _ = _load_model(args.student, "--student")
    lines = [ln.split() for ln in _need(args.prompts, "--prompts").read_text(encoding="utf-8").splitlines()
             if ln.strip()]
    try:
        prompts = [[vocab.bos] + vocab.encode(words) + [vocab.sep] for words in lines]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    seed = args.seed if args.seed is not None else 0
    run = make_run_dir(args, {"model": args.student, "prompts": args.prompts, "seed": seed,
                              "decode": str(args.decode)})
    rngs = [np.random.default_rng([seed, i]) for i in range(len(prompts))]
    outs = generate_batch(model, prompts, args.max_new_tokens, args.decode, vocab.eos, rngs) if prompts else []
    records = []
    with open(run / "completions.tsv", "w", encoding="utf-8") as fh:
        for words, out in zip(lines, outs):
            text = " ".join(vocab.decode(out.response))
            fh.write(" ".join(words) + "\t" + text + "\n")
            records.append({"prompt": " ".join(words), "completion": text, "ids": out.response})
            print(f"{' '.join(words)}\t{text}")
    _write_json(run / "completions.json", records)
    return EXIT_OK


class UsageError(Exception):
    pass


COMMANDS = {
    "gen-corpus": cmd_gen_corpus, "train-teacher": cmd_train_teacher, "distill": cmd_distill,
    "evaluate": cmd_evaluate, "compare-losses": cmd_compare_losses, "inspect-dac": cmd_inspect_dac,
    "generate": cmd_generate,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except MissingFile as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NaNLossError as exc:
        print(f"error: training aborted on a non-finite loss ({exc}); last good checkpoint: {exc.checkpoint}",
              file=sys.stderr)
        return EXIT_NAN
    except (UsageError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE if isinstance(exc, UsageError) else EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
