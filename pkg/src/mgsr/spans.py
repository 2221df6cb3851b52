"""Phrase spans over token sequences: a template chunker and the sidecar file format."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

KINDS = ("NP", "VP", "PP", "OTHER")
TAGS = ("DET", "ADJ", "NOUN", "VERB", "ADV", "PREP", "OTHER")


@dataclass(frozen=True, order=True)
class Span:
    start: int
    length: int
    kind: str = "OTHER"

    def __post_init__(self):
        if self.start < 0:
            raise ValueError(f"span start must be >= 0, got {self.start}")
        if self.length < 1:
            raise ValueError(f"span length must be >= 1, got {self.length}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown span kind {self.kind!r}")

    @property
    def end(self) -> int:
        return self.start + self.length


def validate_spans(spans: Sequence[Span], seq_len: int | None = None) -> None:
    prev_end = 0
    for i, sp in enumerate(spans):
        if i and sp.start < prev_end:
            raise ValueError(f"spans overlap or are unsorted at {sp}")
        if seq_len is not None and sp.end > seq_len:
            raise ValueError(f"span {sp} exceeds sequence length {seq_len}")
        prev_end = sp.end


def _np_end(tags: Sequence[str], i: int) -> int | None:
    """End index of a maximal ``DET? ADJ* NOUN+`` run starting at ``i``."""
    n = len(tags)
    j = i
    if j < n and tags[j] == "DET":
        j += 1
    while j < n and tags[j] == "ADJ":
        j += 1
    k = j
    while k < n and tags[k] == "NOUN":
        k += 1
    return k if k > j else None


def chunk_heuristic(tokens: Sequence[int], lexicon: Mapping[int, str]) -> list[Span]:
    """Greedy left-to-right chunking into NP / VP / PP spans.

    Templates: ``DET? ADJ* NOUN+`` is NP, ``VERB ADV?`` is VP and
    ``PREP NP`` is PP. Tokens missing from the lexicon count as OTHER.
    """
    tags = [lexicon.get(t, "OTHER") for t in tokens]
    spans: list[Span] = []
    i, n = 0, len(tags)
    while i < n:
        tag = tags[i]
        if tag == "PREP":
            end = _np_end(tags, i + 1)
            if end is not None:
                spans.append(Span(i, end - i, "PP"))
                i = end
                continue
        elif tag in ("DET", "ADJ", "NOUN"):
            end = _np_end(tags, i)
            if end is not None:
                spans.append(Span(i, end - i, "NP"))
                i = end
                continue
        elif tag == "VERB":
            end = i + 2 if i + 1 < n and tags[i + 1] == "ADV" else i + 1
            spans.append(Span(i, end - i, "VP"))
            i = end
            continue
        i += 1
    return spans


def load_lexicon(path: str | Path) -> dict[int, str]:
    lexicon: dict[int, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 2 or parts[1] not in TAGS:
                raise ValueError(f"{path}:{lineno}: expected 'token_id TAG', got {line.strip()!r}")
            lexicon[int(parts[0])] = parts[1]
    return lexicon


def write_lexicon(lexicon: Mapping[int, str], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tid in sorted(lexicon):
            fh.write(f"{tid} {lexicon[tid]}\n")


def load_annotations(path: str | Path) -> dict[int, list[Span]]:
    """Read a ``sample_id start length kind`` sidecar into sorted span lists."""
    found: dict[int, list[Span]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            try:
                if len(parts) != 4:
                    raise ValueError("expected 4 fields")
                sid, start, length = int(parts[0]), int(parts[1]), int(parts[2])
                span = Span(start, length, parts[3])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed span line {line.strip()!r} ({exc})") from None
            found.setdefault(sid, []).append(span)
    for sid, spans in found.items():
        spans.sort()
        try:
            validate_spans(spans)
        except ValueError as exc:
            raise ValueError(f"sample {sid}: {exc}") from None
    return found


def write_annotations(annotations: Mapping[int, Sequence[Span]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sid in sorted(annotations):
            for sp in annotations[sid]:
                fh.write(f"{sid} {sp.start} {sp.length} {sp.kind}\n")
