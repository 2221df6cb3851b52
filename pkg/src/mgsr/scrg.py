"""Sequence correction and re-generation, plus the sampling policies around it.

A student-generated response is compared token by token with the teacher
run on the same prefixes. Among positions where the two disagree, the one
with the largest KL(student || teacher) is replaced by the teacher's token
and everything after it is generated again by the student.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, MutableMapping, Sequence

import numpy as np

from .autodiff import LOG_FLOOR
from .lm import GREEDY, DecodeMode, TransformerLM, batch_response_probs, choose_token, generate_batch

PROVENANCE = ("student", "teacher_corrected", "dataset", "teacher")


@dataclass
class GeneratedSample:
    prompt: list[int]
    tokens: list[int]
    provenance: list[str]
    corrected_position: int | None = None
    per_token_kld: list[float] | None = None
    source_index: int | None = None
    # what the detector saw, kept for dumps
    original_tokens: list[int] | None = None
    teacher_tokens: list[int] | None = None
    detection_kld: list[float] | None = None

    def __post_init__(self):
        self.prompt = [int(t) for t in self.prompt]
        self.tokens = [int(t) for t in self.tokens]
        if len(self.provenance) != len(self.tokens):
            raise ValueError("provenance must tag every token")
        bad = set(self.provenance) - set(PROVENANCE)
        if bad:
            raise ValueError(f"unknown provenance tags {sorted(bad)}")
        n_corr = self.provenance.count("teacher_corrected")
        if n_corr > 1:
            raise ValueError("at most one token may be teacher_corrected")
        if (self.corrected_position is not None) != (n_corr == 1):
            raise ValueError("corrected_position must be set exactly when a token is teacher_corrected")
        if n_corr and self.provenance[self.corrected_position] != "teacher_corrected":
            raise ValueError("corrected_position does not point at the corrected token")
        if self.per_token_kld is not None and len(self.per_token_kld) != len(self.tokens):
            raise ValueError("per_token_kld length must equal token count")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "GeneratedSample":
        return cls(**json.loads(line))


@dataclass(frozen=True)
class GenerationPolicy:
    """How distillation sequences are obtained.

    ``kind`` is one of fixed_dataset, student, teacher, mixed or scrg;
    ``off_policy`` routes student/scrg generation through a replay buffer.
    """

    kind: str = "scrg"
    ratio: float = 1.0
    off_policy: bool = False
    rng_seed: int = 0

    KINDS = ("fixed_dataset", "student", "teacher", "mixed", "scrg")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"mixed ratio must be in [0, 1], got {self.ratio}")

    @classmethod
    def parse(cls, text: str, rng_seed: int = 0) -> "GenerationPolicy":
        """CLI spelling: fixed, student, teacher, mixed:R, scrg-on, scrg-off, off."""
        simple = {
            "fixed": ("fixed_dataset", False), "student": ("student", False), "teacher": ("teacher", False),
            "scrg-on": ("scrg", False), "scrg-off": ("scrg", True), "off": ("student", True),
        }
        if text in simple:
            kind, off = simple[text]
            return cls(kind, off_policy=off, rng_seed=rng_seed)
        if text.startswith("mixed:"):
            return cls("mixed", ratio=float(text.split(":", 1)[1]), rng_seed=rng_seed)
        raise ValueError(f"bad policy {text!r}")

    def label(self) -> str:
        if self.kind == "mixed":
            return f"mixed:{self.ratio:g}"
        if self.kind == "scrg":
            return "scrg-off" if self.off_policy else "scrg-on"
        if self.kind == "student" and self.off_policy:
            return "off"
        return {"fixed_dataset": "fixed"}.get(self.kind, self.kind)

    @property
    def uses_student(self) -> bool:
        return self.kind in ("student", "scrg", "mixed")


@dataclass
class SamplerSettings:
    max_new_tokens: int = 28
    student_mode: DecodeMode = field(default_factory=lambda: DecodeMode("sample", 1.0))
    teacher_mode: DecodeMode = GREEDY
    stop_token: int | None = None


class ReplayBuffer:
    def __init__(self, capacity: int = 1000, p_gen: float = 0.5):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        if not 0.0 <= p_gen <= 1.0:
            raise ValueError(f"p_gen must be in [0, 1], got {p_gen}")
        self.capacity = capacity
        self.p_gen = p_gen
        self._items: deque[tuple[int, GeneratedSample]] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._items)

    def add(self, sample: GeneratedSample, step: int) -> None:
        self._items.append((step, sample))

    def draw(self, rng: np.random.Generator) -> GeneratedSample:
        return self._items[int(rng.integers(len(self._items)))][1]


def update_schedule(buffer: ReplayBuffer, validation_loss_history: Sequence[float],
                    delta: float = 0.1, eps_plateau: float = 1e-3) -> float:
    """Raise ``p_gen`` by ``delta`` when validation loss stops improving."""
    if len(validation_loss_history) >= 2:
        prev, last = validation_loss_history[-2], validation_loss_history[-1]
        if prev - last < eps_plateau:
            buffer.p_gen = min(1.0, buffer.p_gen + delta)
    return buffer.p_gen


# -- detection ------------------------------------------------------------

def token_kld_profile(student_dists, teacher_dists) -> list[float]:
    s = np.asarray(student_dists, dtype=np.float64)
    t = np.asarray(teacher_dists, dtype=np.float64)
    if s.shape != t.shape:
        raise ValueError(f"profile inputs differ in shape: {s.shape} vs {t.shape}")
    if s.size == 0:
        return []
    sc, tc = np.maximum(s, LOG_FLOOR), np.maximum(t, LOG_FLOOR)
    kl = (s * (np.log(sc) - np.log(tc))).sum(axis=-1)
    return [float(max(v, 0.0)) for v in kl]


def detect_error_token(student_tokens: Sequence[int], teacher_tokens: Sequence[int],
                       kld_profile: Sequence[float]) -> int | None:
    if not len(student_tokens) == len(teacher_tokens) == len(kld_profile):
        raise ValueError(
            f"length mismatch: {len(student_tokens)} student, {len(teacher_tokens)} teacher, "
            f"{len(kld_profile)} profile"
        )
    best, best_val = None, -np.inf
    for i, (s, t, v) in enumerate(zip(student_tokens, teacher_tokens, kld_profile)):
        if s != t and v > best_val:
            best, best_val = i, v
    return best


def _rng(seed: int, step: int, index: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, index, purpose])


def _teacher_tokens(teacher_probs: np.ndarray, n: int, mode: DecodeMode,
                    rng: np.random.Generator | None) -> list[int]:
    return [choose_token(teacher_probs[i], mode, rng) for i in range(n)]


def correct_batch(student: TransformerLM, teacher: TransformerLM, samples: Sequence[GeneratedSample],
                  settings: SamplerSettings, rngs: Sequence[np.random.Generator | None],
                  teacher_rngs: Sequence[np.random.Generator | None] | None = None) -> list[GeneratedSample]:
    """Apply one correction pass to each student sample (batched)."""
    if not samples:
        return []
    prompts = [s.prompt for s in samples]
    responses = [s.tokens for s in samples]
    t_probs, _ = batch_response_probs(teacher, prompts, responses)
    s_probs, _ = batch_response_probs(student, prompts, responses)
    if teacher_rngs is None:
        teacher_rngs = [None] * len(samples)
    out: list[GeneratedSample | None] = [None] * len(samples)
    redo, redo_prefix, redo_meta = [], [], []
    for b, smp in enumerate(samples):
        n = len(smp.tokens)
        if any(tag != "student" for tag in smp.provenance):
            raise ValueError("correction expects a purely student-generated sample")
        t_tokens = _teacher_tokens(t_probs[b], n, settings.teacher_mode, teacher_rngs[b])
        profile = token_kld_profile(s_probs[b, :n], t_probs[b, :n])
        j = detect_error_token(smp.tokens, t_tokens, profile)
        if j is None:
            out[b] = smp
            continue
        redo.append(b)
        redo_prefix.append(list(smp.tokens[:j]) + [t_tokens[j]])
        redo_meta.append((j, t_tokens, profile))
    if redo:
        regen = generate_batch(
            student, [prompts[b] for b in redo], settings.max_new_tokens, settings.student_mode,
            settings.stop_token, [rngs[b] for b in redo], prefixes=redo_prefix,
        )
        for b, seq, (j, t_tokens, profile) in zip(redo, regen, redo_meta):
            tags = ["student"] * len(seq.response)
            tags[j] = "teacher_corrected"
            src = samples[b]
            out[b] = GeneratedSample(
                prompt=list(src.prompt), tokens=list(seq.response), provenance=tags, corrected_position=j,
                source_index=src.source_index, original_tokens=list(src.tokens), teacher_tokens=t_tokens,
                detection_kld=profile,
            )
    return out  # type: ignore[return-value]


def correct_and_regenerate(student: TransformerLM, teacher: TransformerLM, prompt: Sequence[int],
                           sample: GeneratedSample, mode: DecodeMode | None = None,
                           settings: SamplerSettings | None = None,
                           rng: np.random.Generator | None = None) -> GeneratedSample:
    settings = settings or SamplerSettings()
    if mode is not None:
        settings = SamplerSettings(settings.max_new_tokens, mode, settings.teacher_mode, settings.stop_token)
    if list(prompt) != list(sample.prompt):
        raise ValueError("prompt does not match the sample's prompt")
    if rng is None and settings.student_mode.kind == "sample":
        rng = np.random.default_rng(settings.student_mode.seed)
    return correct_batch(student, teacher, [sample], settings, [rng])[0]


def student_samples(student: TransformerLM, prompts: Sequence[Sequence[int]], settings: SamplerSettings,
                    rngs: Sequence[np.random.Generator | None],
                    source_indices: Sequence[int | None] | None = None) -> list[GeneratedSample]:
    seqs = generate_batch(student, prompts, settings.max_new_tokens, settings.student_mode,
                          settings.stop_token, rngs)
    if source_indices is None:
        source_indices = [None] * len(prompts)
    return [
        GeneratedSample(list(s.prompt), list(s.response), ["student"] * len(s.response), source_index=i)
        for s, i in zip(seqs, source_indices)
    ]


def sample_batch(policy: GenerationPolicy, dataset: Sequence, student: TransformerLM,
                 teacher: TransformerLM, batch_size: int, step: int, *,
                 indices: Sequence[int] | None = None, buffer: ReplayBuffer | None = None,
                 settings: SamplerSettings | None = None,
                 stats: MutableMapping[str, float] | None = None) -> list[GeneratedSample]:
    """Produce the distillation sequences for one training step.

    ``dataset`` holds objects with ``prompt`` and ``response``. When
    ``indices`` is omitted, ``batch_size`` items are drawn with a generator
    seeded by ``(policy.rng_seed, step)``. Every random choice for batch row
    ``b`` comes from its own generator derived from ``(seed, step, b)``.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    settings = settings or SamplerSettings()
    seed = policy.rng_seed
    if indices is None:
        pick = np.random.default_rng([seed, step, 0xD5])
        indices = [int(i) for i in pick.integers(len(dataset), size=batch_size)]
    items = [dataset[i] for i in indices]
    stats = stats if stats is not None else {}
    for key in ("corrected", "fresh", "replayed", "fallback"):
        stats.setdefault(key, 0)

    def from_dataset(k: int) -> GeneratedSample:
        ex = items[k]
        return GeneratedSample(list(ex.prompt), list(ex.response), ["dataset"] * len(ex.response),
                               source_index=indices[k])

    if policy.kind == "fixed_dataset":
        return [from_dataset(k) for k in range(len(items))]

    if policy.kind == "teacher":
        seqs = generate_batch(teacher, [ex.prompt for ex in items], settings.max_new_tokens,
                              settings.student_mode, settings.stop_token,
                              [_rng(seed, step, k, 1) for k in range(len(items))])
        return [
            GeneratedSample(list(s.prompt), list(s.response), ["teacher"] * len(s.response), source_index=i)
            for s, i in zip(seqs, indices)
        ]

    # decide per row: dataset / fresh student / replay
    plan: list[str] = []
    for k in range(len(items)):
        r = _rng(seed, step, k, 2)
        if policy.kind == "mixed" and not r.random() < policy.ratio:
            plan.append("dataset")
        elif policy.off_policy:
            if buffer is None:
                raise ValueError("off-policy sampling needs a replay buffer")
            if r.random() < buffer.p_gen:
                plan.append("fresh")
            elif len(buffer) == 0:
                stats["fallback"] += 1
                plan.append("fresh")
            else:
                plan.append("replay")
        else:
            plan.append("fresh")

    fresh = [k for k, p in enumerate(plan) if p == "fresh"]
    gen_rngs = {k: _rng(seed, step, k, 3) for k in fresh}
    generated = student_samples(student, [items[k].prompt for k in fresh], settings,
                                [gen_rngs[k] for k in fresh], [indices[k] for k in fresh])
    if policy.kind == "scrg" and generated:
        t_rngs = [_rng(seed, step, k, 4) if settings.teacher_mode.kind == "sample" else None for k in fresh]
        generated = correct_batch(student, teacher, generated, settings, [gen_rngs[k] for k in fresh], t_rngs)
        stats["corrected"] += sum(g.corrected_position is not None for g in generated)
    by_row = dict(zip(fresh, generated))
    stats["fresh"] += len(fresh)

    out = []
    for k, p in enumerate(plan):
        if p == "dataset":
            out.append(from_dataset(k))
        elif p == "fresh":
            out.append(by_row[k])
        else:
            out.append(buffer.draw(_rng(seed, step, k, 5)))
            stats["replayed"] += 1
    if policy.off_policy:
        for k in fresh:
            buffer.add(by_row[k], step)
    return out


def dump_samples(samples: Iterable[GeneratedSample], path: str | Path) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for s in samples:
            fh.write(s.to_json() + "\n")
