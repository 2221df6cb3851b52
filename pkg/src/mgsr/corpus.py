"""Vocabulary, corpus files and the seeded synthetic instruction grammar."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .spans import Span, write_annotations, write_lexicon

PAD, BOS, SEP, EOS = "<pad>", "<bos>", "<sep>", "<eos>"
SPECIALS = (PAD, BOS, SEP, EOS)

DETS = ["the", "a", "every"]
ADJS = ["red", "quiet", "old", "bright", "small", "brave", "cold", "green", "heavy", "soft", "tall", "swift",
        "dark", "kind", "loud", "round", "sharp", "warm", "young", "bitter", "calm", "proud", "wild", "pale"]
NOUNS = ["fox", "river", "teacher", "garden", "engine", "poet", "castle", "storm", "baker", "forest",
         "window", "doctor", "island", "lantern", "farmer", "bridge", "violin", "sailor", "mountain", "child",
         "robot", "village", "painter", "letter", "horse", "market", "pilot", "candle", "tower", "student",
         "ocean", "miner", "clock", "valley", "singer", "wagon", "library", "hunter", "mirror", "king",
         "desert", "nurse", "ship", "meadow", "judge", "kettle", "owl", "harbor"]
VERBS = ["watches", "builds", "carries", "finds", "paints", "follows", "repairs", "visits", "guards", "opens",
         "crosses", "writes", "cleans", "sells", "hears", "lifts", "draws", "pulls", "greets", "hides",
         "feeds", "chases", "climbs", "studies", "fixes", "leaves", "warns", "wakes", "counts", "keeps",
         "marks", "sends"]
ADVS = ["slowly", "gladly", "often", "rarely", "boldly", "softly", "early", "twice", "gently", "quickly"]
PREPS = ["near", "under", "behind", "beyond", "across", "inside", "above", "with"]
INSTRUCTIONS = ["describe", "explain", "tell", "write"]
MODIFIERS = ["briefly"]
PUNCT = ["."]


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("vocabulary has duplicate tokens")
        for sp in SPECIALS:
            if sp not in self.index:
                raise ValueError(f"vocabulary lacks special token {sp}")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad(self) -> int:
        return self.index[PAD]

    @property
    def bos(self) -> int:
        return self.index[BOS]

    @property
    def sep(self) -> int:
        return self.index[SEP]

    @property
    def eos(self) -> int:
        return self.index[EOS]

    def encode(self, words: Sequence[str]) -> list[int]:
        try:
            return [self.index[w] for w in words]
        except KeyError as exc:
            raise ValueError(f"token {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Sequence[int], strip_special: bool = True) -> list[str]:
        words = [self.tokens[i] for i in ids]
        if strip_special:
            words = [w for w in words if w not in SPECIALS]
        return words

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.strip()])

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.writelines(t + "\n" for t in self.tokens)


@dataclass
class Example:
    prompt: list[int]
    response: list[int]
    spans: list[Span] = field(default_factory=list)


def encode_example(vocab: Vocab, prompt_words: Sequence[str], response_words: Sequence[str]) -> Example:
    prompt = [vocab.bos] + vocab.encode(prompt_words) + [vocab.sep]
    return Example(prompt, vocab.encode(response_words) + [vocab.eos])


def load_corpus(path: str | Path, vocab: Vocab, spans: dict[int, list[Span]] | None = None) -> list[Example]:
    """Read ``prompt<TAB>response`` lines; sample ids are 0-based line numbers."""
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise ValueError(f"{path}:{lineno + 1}: expected 'prompt<TAB>response'")
            prompt, response = line.split("\t", 1)
            try:
                ex = encode_example(vocab, prompt.split(), response.split())
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno + 1}: {exc}") from None
            if spans is not None:
                ex.spans = list(spans.get(len(examples), []))
            examples.append(ex)
    return examples


def build_vocab() -> tuple[Vocab, dict[int, str]]:
    groups = [
        (list(SPECIALS) + PUNCT + INSTRUCTIONS + MODIFIERS, "OTHER"),
        (DETS, "DET"), (ADJS, "ADJ"), (NOUNS, "NOUN"), (VERBS, "VERB"), (ADVS, "ADV"), (PREPS, "PREP"),
    ]
    tokens, lexicon = [], {}
    for words, tag in groups:
        for w in words:
            lexicon[len(tokens)] = tag
            tokens.append(w)
    return Vocab(tokens), lexicon


@dataclass(frozen=True)
class GrammarConfig:
    """Shape of the synthetic world. ``world_seed`` fixes word associations."""

    world_seed: int = 1234
    verbs_per_noun: int = 3
    objects_per_verb: int = 3
    nouns_per_prep: int = 3
    p_adverb: float = 0.5
    p_object_adj: float = 0.5
    p_pp: float = 0.6


class Grammar:
    def __init__(self, config: GrammarConfig = GrammarConfig()):
        self.config = config
        rng = np.random.default_rng(config.world_seed)
        c = config

        def pick(pool, k):
            return [pool[i] for i in rng.choice(len(pool), size=k, replace=False)]

        self.noun_verbs = {n: pick(VERBS, c.verbs_per_noun) for n in NOUNS}
        self.noun_adjs = {n: pick(ADJS, 2) for n in NOUNS}
        self.verb_objects = {v: pick(NOUNS, c.objects_per_verb) for v in VERBS}
        self.verb_adv = {v: ADVS[rng.integers(len(ADVS))] for v in VERBS}
        self.verb_preps = {v: pick(PREPS, 2) for v in VERBS}
        self.prep_nouns = {p: pick(NOUNS, c.nouns_per_prep) for p in PREPS}
        # skewed preference over the ranked choices
        self.rank_probs = {k: _rank_probs(k) for k in (2, 3, 4)}

    def _choose(self, rng: np.random.Generator, options: Sequence[str]) -> str:
        probs = self.rank_probs.get(len(options))
        if probs is None:
            probs = np.full(len(options), 1.0 / len(options))
        return options[int(rng.choice(len(options), p=probs))]

    def sentence(self, rng: np.random.Generator, adj: str, noun: str) -> tuple[list[str], list[Span], str]:
        c = self.config
        words: list[str] = ["the", adj, noun]
        spans = [Span(0, 3, "NP")]
        verb = self._choose(rng, self.noun_verbs[noun])
        vp = [verb]
        if rng.random() < c.p_adverb:
            vp.append(self.verb_adv[verb])
        spans.append(Span(len(words), len(vp), "VP"))
        words += vp
        obj = self._choose(rng, self.verb_objects[verb])
        np_words = ["a" if rng.random() < 0.7 else "the"]
        if rng.random() < c.p_object_adj:
            np_words.append(self.noun_adjs[obj][0])
        np_words.append(obj)
        spans.append(Span(len(words), len(np_words), "NP"))
        words += np_words
        if rng.random() < c.p_pp:
            prep = self._choose(rng, self.verb_preps[verb])
            pp = [prep, "the", self._choose(rng, self.prep_nouns[prep])]
            spans.append(Span(len(words), 3, "PP"))
            words += pp
        words.append(".")
        return words, spans, obj

    def sample(self, rng: np.random.Generator) -> tuple[list[str], list[str], list[Span]]:
        instr = INSTRUCTIONS[rng.integers(len(INSTRUCTIONS))]
        brief = rng.random() < 0.3
        noun = NOUNS[rng.integers(len(NOUNS))]
        adj = ADJS[rng.integers(len(ADJS))]
        prompt = [instr] + (["briefly"] if brief else []) + [adj, noun]
        n_sent = 2 if instr in ("explain", "write") and not brief else 1
        response: list[str] = []
        spans: list[Span] = []
        for _ in range(n_sent):
            words, sent_spans, obj = self.sentence(rng, adj, noun)
            spans += [Span(s.start + len(response), s.length, s.kind) for s in sent_spans]
            response += words
            adj, noun = self.noun_adjs[obj][1], obj
        return prompt, response, spans


def _rank_probs(k: int) -> np.ndarray:
    w = 0.5 ** np.arange(k)
    return w / w.sum()


def gen_synthetic_corpus(out_dir: str | Path, seed: int, size: int,
                         grammar_config: GrammarConfig = GrammarConfig(),
                         splits: Sequence[tuple[str, int]] | None = None) -> dict[str, Path]:
    """Write vocab, lexicon, corpus TSV(s) and gold span sidecar(s).

    Without ``splits`` a single ``corpus.tsv``/``spans.txt`` pair holds all
    ``size`` samples; with ``splits`` (name, count) the samples are written to
    ``<name>.tsv``/``<name>.spans`` in order.
    """
    if size < 1:
        raise ValueError("size must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab, lexicon = build_vocab()
    grammar = Grammar(grammar_config)
    rng = np.random.default_rng(seed)
    samples = [grammar.sample(rng) for _ in range(size)]

    paths = {"vocab": out / "vocab.txt", "lexicon": out / "lexicon.txt"}
    vocab.save(paths["vocab"])
    write_lexicon(lexicon, paths["lexicon"])
    if splits is None:
        splits = [("corpus", size)]
        names = {"corpus": ("corpus.tsv", "spans.txt")}
    else:
        if sum(n for _, n in splits) != size:
            raise ValueError("split sizes must add up to size")
        names = {name: (f"{name}.tsv", f"{name}.spans") for name, _ in splits}
    offset = 0
    for name, count in splits:
        tsv, sidecar = names[name]
        chunk = samples[offset: offset + count]
        offset += count
        with open(out / tsv, "w", encoding="utf-8") as fh:
            for prompt, response, _ in chunk:
                fh.write(" ".join(prompt) + "\t" + " ".join(response) + "\n")
        write_annotations({i: s for i, (_, _, s) in enumerate(chunk)}, out / sidecar)
        paths[name] = out / tsv
        paths[name + "_spans"] = out / sidecar
    return paths
