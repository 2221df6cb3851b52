"""Teacher fine-tuning and student distillation loops."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import divergences as dv
from .checkpoint import from_bytes, save_checkpoint, to_bytes
from .corpus import Example
from .evaluation import evaluate_multiseed
from .lm import DecodeMode, ModelConfig, TransformerLM, batch_response_probs, student_config, teacher_config
from .optim import Adam, clip_grad_norm
from .scrg import GenerationPolicy, ReplayBuffer, SamplerSettings, dump_samples, sample_batch, update_schedule
from .spans import Span, chunk_heuristic

log = logging.getLogger(__name__)


class NaNLossError(RuntimeError):
    def __init__(self, message: str, checkpoint: Path | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    epochs: int = 20
    batch_size: int = 32
    loss_weights: list = field(default_factory=lambda: [1.0, 1.0, 1.0])
    policy: str = "scrg-on"
    loss: str = "dackl"
    seed: int = 0
    seeds: list = field(default_factory=lambda: [10, 20, 30, 40, 50])
    validation_fraction: float = 0.05
    clip_mode: str = "soft:0.01"
    dac_components: str = "both"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    alpha: float = dv.DEFAULT_ALPHA
    beta: float = dv.DEFAULT_BETA
    max_new_tokens: int = 28
    gen_temperature: float = 1.0
    teacher_token_mode: str = "greedy"
    select_by: str = "val_loss"
    p_gen: float = 0.5
    p_gen_delta: float = 0.1
    eps_plateau: float = 1e-3
    buffer_capacity: int = 1000
    subnet_hidden: int = 64
    val_seed: int = 0
    model: str = "student"
    model_seed: int = 0
    context_len: int = 40

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in (0, 1)")
        if self.loss not in dv.LOSS_NAMES:
            raise ValueError(f"loss must be one of {dv.LOSS_NAMES}")
        if self.select_by not in ("val_loss", "val_rouge"):
            raise ValueError("select_by must be val_loss or val_rouge")
        if self.model not in ("teacher", "student"):
            raise ValueError("model must be teacher or student")
        if len(self.loss_weights) != 3:
            raise ValueError("loss_weights needs exactly three values (sft, dac, span)")
        self.weights
        self.clip
        self.generation_policy

    @property
    def weights(self) -> dv.LossWeights:
        return dv.LossWeights(*self.loss_weights)

    @property
    def clip(self) -> dv.ClipMode:
        return dv.ClipMode.parse(self.clip_mode)

    @property
    def generation_policy(self) -> GenerationPolicy:
        return GenerationPolicy.parse(self.policy, rng_seed=self.seed)

    def model_config(self, vocab_size: int) -> ModelConfig:
        make = teacher_config if self.model == "teacher" else student_config
        return make(vocab_size, self.context_len, self.model_seed)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class MetricsRecord:
    step: int
    epoch: int
    loss_sft: float
    loss_dac: float
    loss_span: float
    loss_total: float
    validation_loss: float | None = None
    p_gen: float | None = None
    corrected_fraction: float = 0.0
    wallclock: float = 0.0
    validation_rouge: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainResult:
    model: TransformerLM
    subnet: dv.SubNetwork | None
    metrics: list[MetricsRecord]
    best_epoch: int
    checkpoint: Path | None = None


def split_validation(examples: Sequence[Example], fraction: float, seed: int) -> tuple[list, list]:
    rng = np.random.default_rng([seed, 0x7A1])
    perm = rng.permutation(len(examples))
    n_val = max(1, int(round(len(examples) * fraction)))
    return [examples[i] for i in perm[n_val:]], [examples[i] for i in perm[:n_val]]


# -- batched loss terms ---------------------------------------------------

def _per_sequence_mean(values: ad.Tensor, mask: np.ndarray) -> ad.Tensor:
    """Mean over valid positions of each row, then mean over rows."""
    lengths = np.maximum(mask.sum(axis=1, keepdims=True), 1)
    w = mask / lengths / mask.shape[0]
    return (values * w).sum()


def batch_sft(model: TransformerLM, examples: Sequence[Example], grad: bool = True) -> ad.Tensor:
    prompts = [ex.prompt for ex in examples]
    targets = [ex.response for ex in examples]
    probs, mask = batch_response_probs(model, prompts, targets, grad=grad)
    ids = np.zeros(mask.shape, dtype=np.int64)
    for b, t in enumerate(targets):
        ids[b, : len(t)] = t
    nll = -ad.log(ad.take_along_last(probs, ids))
    return _per_sequence_mean(nll, mask)


def validation_loss(model: TransformerLM, examples: Sequence[Example], chunk: int = 128) -> float:
    total = 0.0
    with ad.no_grad():
        for lo in range(0, len(examples), chunk):
            part = examples[lo: lo + chunk]
            total += batch_sft(model, part, grad=False).item() * len(part)
    return total / len(examples)


def _spans_for(sample, lexicon: dict[int, str] | None, corpus: Sequence[Example],
               stop_token: int | None) -> list[Span]:
    """Gold spans for verbatim dataset responses, chunker spans otherwise."""
    if sample.provenance and all(t == "dataset" for t in sample.provenance):
        return list(corpus[sample.source_index].spans)
    if lexicon is None:
        return []
    toks = [t for t in sample.tokens if t != stop_token]
    return chunk_heuristic(toks, lexicon)


class Distiller:
    """One configured distillation run (student + sub-network, teacher frozen)."""

    def __init__(self, config: TrainConfig, teacher: TransformerLM, student: TransformerLM,
                 stop_token: int | None, lexicon: dict[int, str] | None = None,
                 subnet: dv.SubNetwork | None = None):
        if teacher.config.vocab_size != student.config.vocab_size:
            raise ValueError(
                f"vocabulary mismatch: teacher {teacher.config.vocab_size} vs student {student.config.vocab_size}"
            )
        self.config = config
        self.teacher = teacher
        for p in teacher.parameters():
            p.requires_grad = False
        self.student = student
        self.subnet = subnet or dv.SubNetwork(student.config.vocab_size, config.subnet_hidden,
                                              seed=config.seed)
        self.lexicon = lexicon
        self.stop_token = stop_token
        self.policy = config.generation_policy
        self.buffer = ReplayBuffer(config.buffer_capacity, config.p_gen) if self.policy.off_policy else None
        self.settings = SamplerSettings(
            max_new_tokens=config.max_new_tokens,
            student_mode=DecodeMode("sample", config.gen_temperature),
            teacher_mode=DecodeMode(config.teacher_token_mode) if config.teacher_token_mode == "greedy"
            else DecodeMode("sample", config.gen_temperature),
            stop_token=stop_token,
        )

    def distill_terms(self, samples, corpus: Sequence[Example]) -> tuple[ad.Tensor, ad.Tensor]:
        c = self.config
        w = c.weights
        prompts = [s.prompt for s in samples]
        tokens = [s.tokens for s in samples]
        t_probs, mask = batch_response_probs(self.teacher, prompts, tokens)
        s_probs, _ = batch_response_probs(self.student, prompts, tokens, grad=True)
        zero = ad.Tensor(0.0)
        dac = zero
        if w.dac > 0:
            if c.loss == "dackl":
                rows = dv.dac_kl_rows(t_probs, s_probs, self.subnet, c.clip, components=c.dac_components)
            else:
                fn = dv.BASELINES[c.loss]
                kwargs = {"alpha": c.alpha} if c.loss in ("sfkl", "srkl") else {}
                if c.loss == "jsd":
                    kwargs = {"beta": c.beta}
                rows = fn(t_probs, s_probs, **kwargs)
            dac = _per_sequence_mean(rows, mask)
        span = zero
        if w.span > 0 and mask.shape[1] > 1:
            spans = [_spans_for(s, self.lexicon, corpus, self.stop_token) for s in samples]
            W = dv.span_pair_weights(spans, mask.shape[1]) / len(samples)
            if W.any():
                span = (dv.span_pair_distances(s_probs, t_probs) * W).sum()
        return dac, span


def _fit(config: TrainConfig, model: TransformerLM, train: Sequence[Example], valid: Sequence[Example],
         step_terms: Callable[[list[int], int], dict], extra_params: Sequence[ad.Tensor] = (),
         out_dir: Path | None = None, extra_state=None, on_epoch_end=None,
         rouge_eval: Callable[[TransformerLM], float] | None = None) -> TrainResult:
    weights = config.weights
    params = model.parameters() + list(extra_params)
    opt = Adam(params, config.learning_rate, (config.adam_beta1, config.adam_beta2), config.adam_eps)
    order_rng = np.random.default_rng([config.seed, 0x0DE5])
    metrics: list[MetricsRecord] = []
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    metrics_fh = open(out_dir / "metrics.jsonl", "w", encoding="utf-8") if out_dir else None
    ckpt_path = out_dir / "model.ckpt" if out_dir else None

    best_bytes = to_bytes(model)
    best_extra = extra_state() if extra_state else None
    best_score, best_epoch = math.inf, -1
    if ckpt_path is not None:
        save_checkpoint(model, None, ckpt_path)
    val_history: list[float] = []
    start = time.perf_counter()
    step = 0
    try:
        for epoch in range(config.epochs):
            perm = order_rng.permutation(len(train))
            n_batches = math.ceil(len(train) / config.batch_size)
            for bi in range(n_batches):
                idx = [int(i) for i in perm[bi * config.batch_size: (bi + 1) * config.batch_size]]
                terms = step_terms(idx, step)
                try:
                    total = dv.overall_loss(terms, weights)
                except ValueError as exc:
                    raise NaNLossError(f"step {step}: {exc}", ckpt_path) from None
                opt.zero_grad()
                ad.backward(total)
                clip_grad_norm(params, config.grad_clip)
                opt.step()
                rec = MetricsRecord(
                    step=step, epoch=epoch, loss_sft=float(terms["sft"]), loss_dac=float(terms["dac"]),
                    loss_span=float(terms["span"]), loss_total=total.item(),
                    p_gen=terms.get("p_gen"), corrected_fraction=terms.get("corrected_fraction", 0.0),
                    wallclock=time.perf_counter() - start,
                )
                if bi == n_batches - 1:
                    rec.validation_loss = validation_loss(model, valid)
                    val_history.append(rec.validation_loss)
                    if rouge_eval is not None:
                        rec.validation_rouge = rouge_eval(model)
                    if on_epoch_end is not None:
                        on_epoch_end(epoch, val_history)
                    score = -rec.validation_rouge if config.select_by == "val_rouge" else rec.validation_loss
                    if score < best_score:
                        best_score, best_epoch = score, epoch
                        best_bytes = to_bytes(model)
                        best_extra = extra_state() if extra_state else None
                        if ckpt_path is not None:
                            ckpt_path.write_bytes(best_bytes)
                metrics.append(rec)
                if metrics_fh:
                    metrics_fh.write(rec.to_json() + "\n")
                    metrics_fh.flush()
                step += 1
    finally:
        if metrics_fh:
            metrics_fh.close()
    best_model, _ = from_bytes(best_bytes)
    return TrainResult(best_model, best_extra, metrics, best_epoch, ckpt_path)


def train_teacher(config: TrainConfig, corpus: Sequence[Example], valid: Sequence[Example] | None = None,
                  out_dir: str | Path | None = None, vocab_size: int | None = None,
                  model: TransformerLM | None = None) -> TrainResult:
    """Supervised fine-tuning; keeps the checkpoint with the best validation loss."""
    out = Path(out_dir) if out_dir else None
    if vocab_size is None:
        vocab_size = model.config.vocab_size if model else 1 + max(
            max(ex.prompt + ex.response) for ex in corpus
        )
    _check_vocab(corpus, vocab_size)
    if valid is None:
        corpus, valid = split_validation(corpus, config.validation_fraction, config.seed)
    model = model or TransformerLM(config.model_config(vocab_size))

    def terms(idx, step):
        return {"sft": batch_sft(model, [corpus[i] for i in idx]), "dac": 0.0, "span": 0.0}

    return _fit(config, model, corpus, valid, terms, out_dir=out)


def _check_vocab(examples: Sequence[Example], vocab_size: int) -> None:
    for ex in examples:
        if max(ex.prompt + ex.response) >= vocab_size:
            raise ValueError(f"corpus token id exceeds vocabulary size {vocab_size}")


def distill(config: TrainConfig, teacher: TransformerLM, student: TransformerLM, corpus: Sequence[Example],
            spans: dict[int, list[Span]] | None = None, valid: Sequence[Example] | None = None,
            out_dir: str | Path | None = None, stop_token: int | None = None,
            lexicon: dict[int, str] | None = None, rouge_eval=None,
            subnet: dv.SubNetwork | None = None) -> TrainResult:
    """Distil ``teacher`` into ``student`` with the configured policy and objective.

    ``spans`` (gold annotations keyed by corpus index) override the spans
    carried by the examples; generated sequences are chunked with
    ``lexicon``. The student checkpoint is
    ``model.ckpt`` and the sub-network sits in ``subnet.ckpt``.
    """
    out = Path(out_dir) if out_dir else None
    if teacher.config.vocab_size != student.config.vocab_size:
        raise ValueError("teacher and student vocabularies differ")
    _check_vocab(corpus, student.config.vocab_size)
    if spans is not None:
        corpus = [Example(ex.prompt, ex.response, list(spans.get(i, []))) for i, ex in enumerate(corpus)]
    if valid is None:
        corpus, valid = split_validation(corpus, config.validation_fraction, config.seed)
    if lexicon is None and not any(ex.spans for ex in corpus):
        log.warning("no span annotations or lexicon; span loss will be zero")
    dist = Distiller(config, teacher, student, stop_token, lexicon, subnet)
    state = {"samples_dumped": -1}

    def terms(idx, step):
        stats: dict = {}
        samples = sample_batch(dist.policy, corpus, student, teacher, len(idx), step, indices=idx,
                               buffer=dist.buffer, settings=dist.settings, stats=stats)
        sft = batch_sft(student, [corpus[i] for i in idx])
        dac, span = dist.distill_terms(samples, corpus)
        fresh = stats.get("fresh", 0)
        if out is not None and dist.policy.kind == "scrg" and state["samples_dumped"] < step // 100:
            state["samples_dumped"] = step // 100
            dump_samples([s for s in samples if s.corrected_position is not None][:4], out / "samples.jsonl")
        return {
            "sft": sft, "dac": dac, "span": span,
            "p_gen": dist.buffer.p_gen if dist.buffer else None,
            "corrected_fraction": stats.get("corrected", 0) / fresh if fresh else 0.0,
        }

    def epoch_end(epoch, history):
        if dist.buffer is not None:
            update_schedule(dist.buffer, history, config.p_gen_delta, config.eps_plateau)

    def subnet_state():
        return {name: p.data.copy() for name, p in dist.subnet.params.items()}

    result = _fit(config, student, corpus, valid, terms, dist.subnet.parameters(), out, subnet_state,
                  epoch_end, rouge_eval)
    final_subnet = dv.SubNetwork(student.config.vocab_size, config.subnet_hidden, init="zeros")
    for name, data in (result.subnet or subnet_state()).items():
        final_subnet.params[name] = ad.parameter(data, "subnet." + name)
    result.subnet = final_subnet
    if out is not None:
        save_checkpoint(result.model, final_subnet, out / "subnet.ckpt")
    return result


def rouge_evaluator(valid: Sequence[Example], seed: int, stop_token: int | None, max_new_tokens: int,
                    temperature: float = 1.0) -> Callable[[TransformerLM], float]:
    mode = DecodeMode("sample", temperature)

    def run(model: TransformerLM) -> float:
        res = evaluate_multiseed(model, valid, [seed], mode, stop_token=stop_token, max_new_tokens=max_new_tokens)
        return res.mean.f1

    return run
