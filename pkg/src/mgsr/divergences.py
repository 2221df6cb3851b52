"""Distillation objectives.

Every divergence takes the teacher distribution ``p`` first and the student
``q`` second, reduces over the last axis, and returns a :class:`Tensor` so
that it can sit inside a training graph. Plain arrays are validated against
the simplex; tensors that already carry a graph are trusted.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

log = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-6
DEFAULT_ALPHA = 0.1
DEFAULT_BETA = 0.5


def check_simplex(p, tol: float = SIMPLEX_TOL) -> None:
    data = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
    if data.size == 0:
        return
    if np.isnan(data).any():
        raise ValueError("distribution contains NaN")
    if data.min() < -tol:
        raise ValueError(f"distribution has negative entry {data.min():.3g}")
    err = np.abs(data.sum(axis=-1) - 1.0).max()
    if err > tol:
        raise ValueError(f"distribution does not sum to 1 (off by {err:.3g})")


def _pair(p, q) -> tuple[Tensor, Tensor]:
    p, q = ad.as_tensor(p), ad.as_tensor(q)
    if p.shape != q.shape:
        raise ValueError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    check_simplex(p)
    check_simplex(q)
    return p, q


def _kl(p: Tensor, q: Tensor) -> Tensor:
    return (p * (ad.log(p) - ad.log(q))).sum(axis=-1)


def _unit_interval(name: str, value: float) -> None:
    if not 0.0 < value < 1.0:
        raise ValueError(f"{name} must lie in (0, 1), got {value}")


def forward_kl(p, q) -> Tensor:
    p, q = _pair(p, q)
    return _kl(p, q)


def reverse_kl(p, q) -> Tensor:
    p, q = _pair(p, q)
    return _kl(q, p)


def symmetric_kl(p, q) -> Tensor:
    p, q = _pair(p, q)
    return 0.5 * (_kl(p, q) + _kl(q, p))


def jsd(p, q, beta: float = DEFAULT_BETA) -> Tensor:
    _unit_interval("beta", beta)
    p, q = _pair(p, q)
    m = beta * p + (1.0 - beta) * q
    return beta * _kl(p, m) + (1.0 - beta) * _kl(q, m)


def tvd(p, q) -> Tensor:
    p, q = _pair(p, q)
    return 0.5 * ad.absolute(p - q).sum(axis=-1)


def skew_forward_kl(p, q, alpha: float = DEFAULT_ALPHA) -> Tensor:
    _unit_interval("alpha", alpha)
    p, q = _pair(p, q)
    return _kl(p, alpha * p + (1.0 - alpha) * q)


def skew_reverse_kl(p, q, alpha: float = DEFAULT_ALPHA) -> Tensor:
    _unit_interval("alpha", alpha)
    p, q = _pair(p, q)
    return _kl(q, alpha * q + (1.0 - alpha) * p)


BASELINES: dict[str, Callable[[object, object], Tensor]] = {
    "fkl": forward_kl,
    "rkl": reverse_kl,
    "skl": symmetric_kl,
    "jsd": jsd,
    "tvd": tvd,
    "sfkl": skew_forward_kl,
    "srkl": skew_reverse_kl,
}
LOSS_NAMES = ("fkl", "rkl", "skl", "jsd", "tvd", "sfkl", "srkl", "dackl")


# -- DAC-KL ---------------------------------------------------------------

@dataclass(frozen=True)
class QuantilePair:
    upper: float
    lower: float

    def __post_init__(self):
        if not 0.0 <= self.lower <= self.upper <= 1.0:
            raise ValueError(f"need 0 <= l <= u <= 1, got u={self.upper}, l={self.lower}")


@dataclass(frozen=True)
class ClipMode:
    kind: str = "soft"
    tau: float = 0.01

    def __post_init__(self):
        if self.kind not in ("hard", "soft"):
            raise ValueError(f"clip mode must be hard or soft, got {self.kind!r}")
        if self.kind == "soft" and self.tau <= 0:
            raise ValueError(f"soft clip temperature must be > 0, got {self.tau}")

    @classmethod
    def parse(cls, text: str) -> "ClipMode":
        """``hard``, ``soft`` or ``soft:TAU``."""
        if text == "hard":
            return cls("hard")
        if text == "soft":
            return cls("soft")
        if text.startswith("soft:"):
            return cls("soft", float(text.split(":", 1)[1]))
        raise ValueError(f"bad clip mode {text!r}")

    def __str__(self) -> str:
        return "hard" if self.kind == "hard" else f"soft:{self.tau:g}"


HARD = ClipMode("hard")

# which classes survive clipping (ablation switch)
COMPONENTS = ("both", "target", "high_density")


@dataclass
class ClipSelection:
    indices: np.ndarray
    weights: np.ndarray
    mode: ClipMode


class SubNetwork:
    """MLP ``3M -> 64 -> 64 -> 2`` predicting the clipping thresholds."""

    def __init__(self, vocab_size: int, hidden: int = 64, seed: int = 0, init: str = "normal",
                 init_upper: float = 0.99, init_lower: float = 1e-3):
        self.vocab_size = vocab_size
        self.hidden = hidden
        shapes = [
            ("w1", (3 * vocab_size, hidden)), ("b1", (hidden,)),
            ("w2", (hidden, hidden)), ("b2", (hidden,)),
            ("w3", (hidden, 2)), ("b3", (2,)),
        ]
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        for name, shape in shapes:
            if init == "zeros" or name.startswith("b"):
                data = np.zeros(shape)
            else:
                data = rng.normal(0.0, 0.02, size=shape)
            self.params[name] = ad.parameter(data, "subnet." + name)
        if init != "zeros":
            # start from a permissive window: keep everything but the far tail
            self.params["b3"].data[:] = [_logit(init_upper), _logit(init_lower)]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def __call__(self, features: Tensor) -> Tensor:
        P = self.params
        h = ad.tanh(features @ P["w1"] + P["b1"])
        h = ad.tanh(h @ P["w2"] + P["b2"])
        return h @ P["w3"] + P["b3"]


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def predict_quantiles(subnet: SubNetwork, teacher, student) -> tuple[Tensor, Tensor]:
    """Thresholds ``(u, l)`` per row; ``l`` is clamped into ``[0, u]``.

    The input is ``teacher | sorted(teacher) | student`` along the last axis.
    """
    t = ad.as_tensor(teacher).detach()
    s = ad.as_tensor(student)
    width = 3 * t.shape[-1]
    if t.shape != s.shape or width != 3 * subnet.vocab_size:
        raise ValueError(
            f"sub-network expects width {3 * subnet.vocab_size}, got teacher {t.shape} / student {s.shape}"
        )
    features = ad.concat([t, ad.sort_descending(t), s], axis=-1)
    if features.ndim == 1:
        out = ad.sigmoid(subnet(features.reshape(1, -1)))[0]
    else:
        out = ad.sigmoid(subnet(features))
    upper = out[..., 0]
    lower = ad.minimum(out[..., 1], upper)
    return upper, lower


def clip_weights(teacher: np.ndarray, upper, lower, mode: ClipMode = HARD,
                 components: str = "both") -> Tensor:
    """Per-class retention weights for each teacher row.

    Hard mode gives a 0/1 indicator of ``l <= v <= u``; soft mode multiplies
    two sigmoids of width ``tau``. The teacher argmax is forced to 1 unless
    ``components == "high_density"``; ``"target"`` keeps only the argmax.
    """
    if components not in COMPONENTS:
        raise ValueError(f"components must be one of {COMPONENTS}, got {components!r}")
    teacher = np.asarray(teacher, dtype=np.float64)
    upper, lower = ad.as_tensor(upper), ad.as_tensor(lower)
    top = np.zeros(teacher.shape, dtype=bool)
    np.put_along_axis(top, np.argmax(teacher, axis=-1)[..., None], True, axis=-1)
    if components == "target":
        return ad.Tensor(top.astype(np.float64))
    u = upper.reshape(*upper.shape, 1)
    lo = lower.reshape(*lower.shape, 1)
    if mode.kind == "hard":
        w = ad.Tensor(((teacher >= lo.data) & (teacher <= u.data)).astype(np.float64))
    else:
        w = ad.sigmoid((teacher - lo) * (1.0 / mode.tau)) * ad.sigmoid((u - teacher) * (1.0 / mode.tau))
    if components == "both":
        w = ad.where(top, 1.0, w)
    return w


def dac_clip(teacher, quantiles: QuantilePair, mode: ClipMode = HARD, components: str = "both") -> ClipSelection:
    teacher = np.asarray(teacher, dtype=np.float64)
    check_simplex(teacher)
    w = clip_weights(teacher, quantiles.upper, quantiles.lower, mode, components).data
    if mode.kind == "hard" or components == "target":
        idx = np.flatnonzero(w > 0.5)
    else:
        idx = np.flatnonzero(w >= 0.5)
    return ClipSelection(indices=idx, weights=w, mode=mode)


def _renormalize(x: Tensor) -> Tensor:
    total = x.sum(axis=-1, keepdims=True)
    safe = ad.where(total.data > 0, total, 1.0)
    return x / safe


def dac_kl_rows(teacher, student, subnet: SubNetwork | None = None, mode: ClipMode = HARD,
                quantiles: tuple | QuantilePair | None = None, components: str = "both") -> Tensor:
    """DAC-KL value per row of ``[..., M]`` teacher/student distributions.

    Both vectors are masked by the clip weights and renormalised before a
    forward KL. Thresholds come from ``quantiles`` when given, else from
    ``subnet``.
    """
    teacher = np.asarray(teacher.data if isinstance(teacher, Tensor) else teacher, dtype=np.float64)
    student = ad.as_tensor(student)
    if teacher.shape != student.shape:
        raise ValueError(f"distribution shapes differ: {teacher.shape} vs {student.shape}")
    if isinstance(quantiles, QuantilePair):
        upper = np.full(teacher.shape[:-1], quantiles.upper)
        lower = np.full(teacher.shape[:-1], quantiles.lower)
    elif quantiles is not None:
        upper, lower = quantiles
    elif subnet is not None:
        upper, lower = predict_quantiles(subnet, teacher, student)
    else:
        raise ValueError("need either quantiles or a sub-network")
    w = clip_weights(teacher, upper, lower, mode, components)
    t_star = _renormalize(w * teacher)
    s_star = _renormalize(w * student)
    return _kl(t_star, s_star)


def dac_kl_loss(teacher, student, subnet: SubNetwork | None = None, mode: ClipMode = HARD,
                quantiles: QuantilePair | None = None, components: str = "both") -> Tensor:
    check_simplex(teacher)
    check_simplex(student)
    return dac_kl_rows(teacher, student, subnet, mode, quantiles, components)


def dac_kl_sequence(teacher_dists, student_dists, subnet: SubNetwork | None = None,
                    mode: ClipMode = HARD, quantiles: QuantilePair | None = None,
                    components: str = "both") -> Tensor:
    if len(teacher_dists) != len(student_dists):
        raise ValueError(f"sequence lengths differ: {len(teacher_dists)} vs {len(student_dists)}")
    if len(teacher_dists) == 0:
        log.warning("dac_kl_sequence called on an empty sequence; returning 0")
        return ad.Tensor(0.0)
    rows = dac_kl_loss(teacher_dists, student_dists, subnet, mode, quantiles, components)
    return rows.mean()


# -- span correlation -----------------------------------------------------

def span_pair_weights(spans_per_seq: Sequence[Sequence], length: int) -> np.ndarray:
    """``[B, length-1]`` weights so that span loss = sum(weights * pair distances).

    Pair ``(j, j+1)`` inside span ``s_i`` gets ``1 / (n_s * n_{s_i})``.
    """
    W = np.zeros((len(spans_per_seq), max(length - 1, 0)))
    for b, spans in enumerate(spans_per_seq):
        if not spans:
            continue
        n_s = len(spans)
        for sp in spans:
            if sp.start < 0 or sp.start + sp.length > length:
                raise ValueError(f"span {sp} out of bounds for length {length}")
            if sp.length > 1:
                W[b, sp.start: sp.start + sp.length - 1] = 1.0 / (n_s * sp.length)
    return W


def span_pair_distances(student: Tensor, teacher) -> Tensor:
    """L2 distance between adjacent-token Hadamard products, ``[..., L-1]``."""
    student = ad.as_tensor(student)
    teacher = ad.as_tensor(teacher)
    s_corr = student[..., :-1, :] * student[..., 1:, :]
    t_corr = teacher[..., :-1, :] * teacher[..., 1:, :]
    return ad.l2norm(s_corr - t_corr, axis=-1)


def span_correlation_loss(student_dists, teacher_dists, spans: Sequence) -> Tensor:
    student = ad.as_tensor(student_dists)
    teacher = ad.as_tensor(teacher_dists)
    if student.shape != teacher.shape:
        raise ValueError(f"distribution shapes differ: {student.shape} vs {teacher.shape}")
    L = student.shape[0]
    W = span_pair_weights([spans], L)
    if not spans or L < 2 or not W.any():
        return ad.Tensor(0.0)
    return (span_pair_distances(student, teacher) * W[0]).sum()


# -- supervised and combined ----------------------------------------------

def sft_loss(model_dists, target_tokens: Sequence[int]) -> Tensor:
    dists = ad.as_tensor(model_dists)
    targets = np.asarray(target_tokens, dtype=np.int64)
    if dists.shape[0] != len(targets):
        raise ValueError(f"{dists.shape[0]} distributions but {len(targets)} targets")
    M = dists.shape[-1]
    if len(targets) and (targets.min() < 0 or targets.max() >= M):
        raise ValueError(f"target id out of range [0, {M})")
    return -ad.log(ad.take_along_last(dists, targets)).mean()


@dataclass(frozen=True)
class LossWeights:
    sft: float = 1.0
    dac: float = 1.0
    span: float = 1.0

    def __post_init__(self):
        for name in ("sft", "dac", "span"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")

    @classmethod
    def parse(cls, text: str) -> "LossWeights":
        parts = [float(x) for x in text.split(",")]
        if len(parts) != 3:
            raise ValueError(f"expected three comma-separated weights, got {text!r}")
        return cls(*parts)


def overall_loss(parts: Mapping[str, object], weights: LossWeights = LossWeights()) -> Tensor:
    """``w_sft * sft + w_dac * dac + w_span * span``."""
    total = None
    for name in ("sft", "dac", "span"):
        term = ad.as_tensor(parts.get(name, 0.0))
        if not np.all(np.isfinite(term.data)):
            raise ValueError(f"loss term {name!r} is not finite")
        scaled = term * getattr(weights, name)
        total = scaled if total is None else total + scaled
    return total
