"""Small pre-norm decoder-only transformer usable as teacher or student."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NEG_INF = -1e30


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    context_len: int = 40
    n_layers: int = 1
    n_heads: int = 2
    d_model: int = 32
    d_ff: int = 128
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "context_len", "n_layers", "n_heads", "d_model", "d_ff"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.vocab_size < 4:
            raise ValueError("vocab_size must be at least 4")
        if self.context_len < 8:
            raise ValueError("context_len must be at least 8")

    def to_dict(self) -> dict:
        return asdict(self)


def teacher_config(vocab_size: int, context_len: int = 40, seed: int = 0) -> ModelConfig:
    return ModelConfig(vocab_size, context_len, n_layers=2, n_heads=4, d_model=128, d_ff=512, seed=seed)


def student_config(vocab_size: int, context_len: int = 40, seed: int = 0) -> ModelConfig:
    return ModelConfig(vocab_size, context_len, n_layers=1, n_heads=2, d_model=32, d_ff=128, seed=seed)


@dataclass
class TokenSequence:
    prompt: list[int]
    response: list[int] = field(default_factory=list)

    @property
    def ids(self) -> list[int]:
        return list(self.prompt) + list(self.response)


@dataclass(frozen=True)
class DecodeMode:
    """``greedy`` or ``sample``; sampling is seeded and temperature-scaled."""

    kind: str = "greedy"
    temperature: float = 1.0
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in ("greedy", "sample"):
            raise ValueError(f"unknown decode mode {self.kind!r}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")


GREEDY = DecodeMode()


class TransformerLM:
    def __init__(self, config: ModelConfig, init: bool = True):
        self.config = config
        self.params: dict[str, Tensor] = {}
        if init:
            self._init_params()

    # parameter names are stable; checkpoints rely on this order
    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        c = self.config
        d, f, M = c.d_model, c.d_ff, c.vocab_size
        shapes = [("tok_emb", (M, d)), ("pos_emb", (c.context_len, d))]
        for i in range(c.n_layers):
            p = f"blocks.{i}."
            shapes += [
                (p + "ln1.g", (d,)), (p + "ln1.b", (d,)),
                (p + "attn.w_qkv", (d, 3 * d)), (p + "attn.b_qkv", (3 * d,)),
                (p + "attn.w_out", (d, d)), (p + "attn.b_out", (d,)),
                (p + "ln2.g", (d,)), (p + "ln2.b", (d,)),
                (p + "mlp.w_in", (d, f)), (p + "mlp.b_in", (f,)),
                (p + "mlp.w_out", (f, d)), (p + "mlp.b_out", (d,)),
            ]
        shapes += [("ln_f.g", (d,)), ("ln_f.b", (d,)), ("head.w", (d, M)), ("head.b", (M,))]
        return shapes

    def _init_params(self) -> None:
        rng = np.random.default_rng(self.config.seed)
        for name, shape in self.param_shapes():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "g":
                data = np.ones(shape)
            elif leaf.startswith("b"):
                data = np.zeros(shape)
            else:
                data = rng.normal(0.0, 0.02, size=shape)
            self.params[name] = ad.parameter(data, name)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- forward ----------------------------------------------------------
    def logits(self, ids: np.ndarray) -> Tensor:
        """Next-token logits for a ``[B, T]`` batch of ids (right-padded is fine)."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        c = self.config
        B, T = ids.shape
        if T > c.context_len:
            raise ValueError(f"sequence length {T} exceeds context {c.context_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= c.vocab_size):
            raise ValueError(f"token id out of range [0, {c.vocab_size})")
        P = self.params
        x = ad.take_rows(P["tok_emb"], ids) + P["pos_emb"][:T]
        mask = np.triu(np.ones((T, T), dtype=bool), k=1)
        for i in range(c.n_layers):
            p = f"blocks.{i}."
            h = ad.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"])
            x = x + self._attention(h, p, mask)
            h = ad.layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"])
            h = ad.gelu(h @ P[p + "mlp.w_in"] + P[p + "mlp.b_in"])
            x = x + (h @ P[p + "mlp.w_out"] + P[p + "mlp.b_out"])
        x = ad.layer_norm(x, P["ln_f.g"], P["ln_f.b"])
        return x @ P["head.w"] + P["head.b"]

    def _attention(self, h: Tensor, prefix: str, mask: np.ndarray) -> Tensor:
        c = self.config
        B, T, d = h.shape
        nh, hd = c.n_heads, d // c.n_heads
        P = self.params
        qkv = h @ P[prefix + "attn.w_qkv"] + P[prefix + "attn.b_qkv"]
        qkv = ad.transpose(qkv.reshape(B, T, 3, nh, hd), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(hd))
        scores = ad.where(mask, NEG_INF, scores)
        att = ad.softmax(scores, axis=-1) @ v
        att = ad.transpose(att, (0, 2, 1, 3)).reshape(B, T, d)
        return att @ P[prefix + "attn.w_out"] + P[prefix + "attn.b_out"]

    def probs(self, ids: np.ndarray) -> Tensor:
        return ad.softmax(self.logits(ids), axis=-1)


def _check_ids(model: TransformerLM, ids: Sequence[int]) -> None:
    M = model.config.vocab_size
    for t in ids:
        if not 0 <= t < M:
            raise ValueError(f"token id {t} out of range [0, {M})")
    if len(ids) > model.config.context_len:
        raise ValueError(f"sequence length {len(ids)} exceeds context {model.config.context_len}")


def forward(model: TransformerLM, tokens: TokenSequence) -> np.ndarray:
    """Distributions over each response token: row i predicts ``response[i]``.

    Returns an ``[len(response), M]`` array; row i depends only on the prompt
    and ``response[:i]``.
    """
    ids = tokens.ids
    _check_ids(model, ids)
    if not tokens.prompt:
        raise ValueError("prompt must be non-empty")
    n = len(tokens.response)
    if n == 0:
        return np.zeros((0, model.config.vocab_size))
    with ad.no_grad():
        out = model.probs(np.array(ids[:-1])[None, :]).data[0]
    start = len(tokens.prompt) - 1
    return out[start:start + n]


def choose_token(dist: np.ndarray, mode: DecodeMode, rng: np.random.Generator | None = None) -> int:
    """Pick a token from one distribution. Greedy ties go to the smallest id."""
    if mode.kind == "greedy":
        return int(np.argmax(dist))
    if rng is None:
        rng = np.random.default_rng(mode.seed)
    if mode.temperature != 1.0:
        logp = np.log(np.maximum(dist, 1e-300)) / mode.temperature
        logp -= logp.max()
        dist = np.exp(logp)
    cdf = np.cumsum(dist)
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(idx, len(dist) - 1)


def next_token(model: TransformerLM, prefix: Sequence[int], mode: DecodeMode = GREEDY,
               rng: np.random.Generator | None = None) -> int:
    _check_ids(model, prefix)
    with ad.no_grad():
        dist = model.probs(np.array(prefix)[None, :]).data[0, -1]
    return choose_token(dist, mode, rng)


def generate(model: TransformerLM, prompt: Sequence[int], max_len: int, mode: DecodeMode = GREEDY,
             stop_token: int | None = None, rng: np.random.Generator | None = None) -> TokenSequence:
    if rng is None and mode.kind == "sample":
        rng = np.random.default_rng(mode.seed)
    out = generate_batch(model, [list(prompt)], max_len, mode, stop_token, [rng])
    return out[0]


def generate_batch(model: TransformerLM, prompts: Sequence[Sequence[int]], max_len: int,
                   mode: DecodeMode = GREEDY, stop_token: int | None = None,
                   rngs: Sequence[np.random.Generator | None] | None = None,
                   prefixes: Sequence[Sequence[int]] | None = None) -> list[TokenSequence]:
    """Autoregressive generation for a batch, one forward pass per step.

    ``prefixes`` optionally seeds each response with forced tokens; those
    count toward ``max_len``. Each row has its own generator so results do
    not depend on batch composition.
    """
    B = len(prompts)
    ctx = model.config.context_len
    if rngs is None:
        rngs = [np.random.default_rng(mode.seed) if mode.kind == "sample" else None for _ in range(B)]
    responses = [list(p) for p in prefixes] if prefixes is not None else [[] for _ in range(B)]
    limits = [min(max_len, ctx - len(p)) for p in prompts]
    for p in prompts:
        _check_ids(model, p)
        if not p:
            raise ValueError("prompt must be non-empty")
    done = [
        len(r) >= lim or (stop_token is not None and bool(r) and r[-1] == stop_token)
        for r, lim in zip(responses, limits)
    ]
    while not all(done):
        active = [b for b in range(B) if not done[b]]
        seqs = [list(prompts[b]) + responses[b] for b in active]
        T = max(len(s) for s in seqs)
        ids = np.zeros((len(active), T), dtype=np.int64)
        for r, s in enumerate(seqs):
            ids[r, : len(s)] = s
        with ad.no_grad():
            logits = model.logits(ids).data
        for r, b in enumerate(active):
            row = logits[r, len(seqs[r]) - 1]
            row = np.exp(row - row.max())
            tok = choose_token(row / row.sum(), mode, rngs[b])
            responses[b].append(tok)
            if len(responses[b]) >= limits[b] or (stop_token is not None and tok == stop_token):
                done[b] = True
    return [TokenSequence(list(p), r) for p, r in zip(prompts, responses)]


def batch_response_probs(model: TransformerLM, prompts: Sequence[Sequence[int]],
                         responses: Sequence[Sequence[int]], grad: bool = False):
    """Distributions over response tokens for a batch.

    Returns ``(probs, mask)`` where ``probs`` is ``[B, L, M]`` (Tensor when
    ``grad`` else ndarray) aligned so row ``[b, i]`` predicts
    ``responses[b][i]``, and ``mask`` marks real positions.
    """
    B = len(prompts)
    L = max((len(r) for r in responses), default=0)
    L = max(L, 1)
    P = max(len(p) for p in prompts)
    T = P + L - 1
    ids = np.zeros((B, T), dtype=np.int64)
    gather = np.zeros((B, L), dtype=np.int64)
    mask = np.zeros((B, L), dtype=bool)
    for b, (p, r) in enumerate(zip(prompts, responses)):
        seq = list(p) + list(r)
        seq = seq[: len(p) + len(r) - 1]
        ids[b, : len(seq)] = seq
        n = len(r)
        gather[b, :n] = np.arange(len(p) - 1, len(p) - 1 + n)
        gather[b, n:] = len(p) - 1
        mask[b, :n] = True
    if grad:
        probs = model.probs(ids)
        rows = np.arange(B)[:, None]
        return probs[rows, gather], mask
    with ad.no_grad():
        probs = model.probs(ids).data
    return probs[np.arange(B)[:, None], gather], mask
