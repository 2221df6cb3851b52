"""ROUGE-L scoring, the multi-seed evaluation protocol and KDE export."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .divergences import ClipSelection
from .lm import DecodeMode, TransformerLM, generate_batch

DEFAULT_SEEDS = (10, 20, 30, 40, 50)


@dataclass(frozen=True)
class RougeScore:
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0


def lcs_length(a: Sequence, b: Sequence) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hypothesis: Sequence, reference: Sequence) -> RougeScore:
    if not hypothesis or not reference:
        return RougeScore()
    lcs = lcs_length(hypothesis, reference)
    p, r = lcs / len(hypothesis), lcs / len(reference)
    f1 = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return RougeScore(p, r, f1)


def mean_score(scores: Sequence[RougeScore]) -> RougeScore:
    if not scores:
        return RougeScore()
    return RougeScore(
        float(np.mean([s.precision for s in scores])),
        float(np.mean([s.recall for s in scores])),
        float(np.mean([s.f1 for s in scores])),
    )


@dataclass
class MultiSeedResult:
    mean: RougeScore
    per_seed: dict[int, RougeScore]
    records: list[dict]


def evaluate_multiseed(model: TransformerLM, dataset: Sequence, seeds: Sequence[int] = DEFAULT_SEEDS,
                       gen_mode: DecodeMode = DecodeMode("sample", 1.0), *, decode=None,
                       stop_token: int | None = None, max_new_tokens: int = 28,
                       batch_size: int = 128) -> MultiSeedResult:
    """Generate for every prompt under each seed and score against the reference.

    ``decode`` maps token ids to the words that get scored (default: the
    ids themselves, with ``stop_token`` removed). Row ``i`` under seed ``s``
    samples from a generator seeded with ``(s, i)``.
    """
    if not dataset:
        raise ValueError("evaluation dataset is empty")
    if not seeds:
        raise ValueError("need at least one seed")
    if decode is None:
        def decode(ids):
            return [t for t in ids if t != stop_token]
    per_seed, records = {}, []
    for seed in seeds:
        scores = []
        for lo in range(0, len(dataset), batch_size):
            chunk = dataset[lo: lo + batch_size]
            rngs = [np.random.default_rng([seed, lo + k]) for k in range(len(chunk))]
            outs = generate_batch(model, [ex.prompt for ex in chunk], max_new_tokens, gen_mode, stop_token, rngs)
            for k, (ex, out) in enumerate(zip(chunk, outs)):
                hyp, ref = decode(out.response), decode(ex.response)
                sc = rouge_l(hyp, ref)
                scores.append(sc)
                records.append({
                    "prompt_id": lo + k, "seed": seed, "hypothesis": " ".join(map(str, hyp)),
                    "reference": " ".join(map(str, ref)), "precision": sc.precision, "recall": sc.recall,
                    "f1": sc.f1,
                })
        # duplicated seeds give identical runs; keep the first
        per_seed.setdefault(seed, mean_score(scores))
    seed_means = [per_seed[s] for s in seeds]
    return MultiSeedResult(mean_score(seed_means), per_seed, records)


def write_eval_dump(result: MultiSeedResult, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in result.records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# -- density export -------------------------------------------------------

@dataclass
class DensityExport:
    grid: np.ndarray
    original: np.ndarray
    clipped: np.ndarray
    bandwidth_original: float
    bandwidth_clipped: float

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["value", "density_original", "value", "density_clipped"])
            for x, a, b in zip(self.grid, self.original, self.clipped):
                w.writerow([f"{x:.10g}", f"{a:.10g}", f"{x:.10g}", f"{b:.10g}"])


def silverman_bandwidth(values: np.ndarray) -> float | None:
    """``0.9 * min(sd, IQR/1.34) * n^(-1/5)``; None when the sample has no spread."""
    values = np.asarray(values, dtype=np.float64)
    n = values.size
    if n < 2:
        return None
    sd = values.std(ddof=1)
    q75, q25 = np.percentile(values, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    if spread <= 0:
        return None
    return float(0.9 * spread * n ** (-0.2))


def _kde(values: np.ndarray, grid: np.ndarray, h: float) -> np.ndarray:
    z = (grid[:, None] - values[None, :]) / h
    return np.exp(-0.5 * z * z).sum(axis=1) / (values.size * h * np.sqrt(2 * np.pi))


def export_density(teacher, selection: ClipSelection, grid_size: int = 256) -> DensityExport:
    """Gaussian KDE of teacher probability values: all classes vs selected.

    A curve whose sample has no spread borrows the other curve's bandwidth,
    and no bandwidth is allowed below two grid steps.
    """
    if grid_size < 16:
        raise ValueError("grid_size must be >= 16")
    values = np.asarray(teacher, dtype=np.float64)
    kept = values[selection.indices]
    if kept.size == 0:
        raise ValueError("selection is empty")
    h_all = silverman_bandwidth(values) or 1e-3
    h_kept = silverman_bandwidth(kept) or h_all
    pad = 4.0 * max(h_all, h_kept)
    lo, hi = values.min() - pad, values.max() + pad
    floor = 2.0 * (hi - lo) / (grid_size - 1)
    h_all, h_kept = max(h_all, floor), max(h_kept, floor)
    pad = 4.0 * max(h_all, h_kept)
    grid = np.linspace(values.min() - pad, values.max() + pad, grid_size)
    return DensityExport(grid, _kde(values, grid, h_all), _kde(kept, grid, h_kept), h_all, h_kept)
