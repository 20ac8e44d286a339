"""Watermark transforms: how vote scores reshape the next-token law.

Variants:

* ``red_green``: exponential tilt q(u) proportional to p(u) * exp(delta * score(u));
* ``soft_ppl``: deterministic argmax of score(u) + lambda * log p(u), with
  lambda solved per step so the expected log-probability drop equals a
  target epsilon;
* ``soft_ppl_unconstrained``: same argmax rule with lambda fixed directly;
* ``synthid``: iterated tournament-style reweighting that is exactly
  distortion-free in expectation over the scores.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .core import Distribution, Message, ValidationError
from .prf import ContextSeed

SOLVER_LAMBDA_MAX = 100.0
SOLVER_MC_SAMPLES = 128
SOLVER_ITERATIONS = 60
SYNTHID_DEFAULT_LAYERS = 100

VARIANTS = ("none", "red_green", "soft_ppl", "soft_ppl_unconstrained", "synthid")


@dataclass(frozen=True)
class SchemeConfig:
    """One watermarking scheme plus its strength parameter."""

    variant: str
    delta: float = 0.0
    epsilon: float = 0.0
    lam: float = 1.0
    n_layer: int = SYNTHID_DEFAULT_LAYERS
    solver_seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown scheme variant {self.variant!r}")
        if self.delta < 0 or self.epsilon < 0:
            raise ValidationError("delta and epsilon must be >= 0")
        if self.lam <= 0:
            raise ValidationError("lambda must be > 0")
        if self.n_layer < 1:
            raise ValidationError("layer count must be >= 1")

    @classmethod
    def none(cls) -> "SchemeConfig":
        """No watermark; generation samples the shaped distribution as-is."""
        return cls(variant="none")

    @classmethod
    def red_green(cls, delta: float) -> "SchemeConfig":
        return cls(variant="red_green", delta=delta)

    @classmethod
    def soft_ppl(cls, epsilon: float, solver_seed: int = 0) -> "SchemeConfig":
        return cls(variant="soft_ppl", epsilon=epsilon, solver_seed=solver_seed)

    @classmethod
    def soft_ppl_unconstrained(cls, lam: float) -> "SchemeConfig":
        return cls(variant="soft_ppl_unconstrained", lam=lam)

    @classmethod
    def synthid(cls, n_layer: int = SYNTHID_DEFAULT_LAYERS) -> "SchemeConfig":
        return cls(variant="synthid", n_layer=n_layer)

    def to_json_dict(self) -> dict:
        out = {"variant": self.variant}
        if self.variant == "red_green":
            out["delta"] = self.delta
        elif self.variant == "soft_ppl":
            out["epsilon"] = self.epsilon
            out["solver_seed"] = self.solver_seed
        elif self.variant == "soft_ppl_unconstrained":
            out["lam"] = self.lam
        elif self.variant == "synthid":
            out["n_layer"] = self.n_layer
        return out

    @classmethod
    def from_json_dict(cls, data: dict) -> "SchemeConfig":
        kwargs = {k: v for k, v in data.items() if k != "variant"}
        return cls(variant=data["variant"], **kwargs)


def red_green_transform(
    p: Distribution, scores: np.ndarray, delta: float
) -> Distribution:
    """Exponential tilt toward high-scoring tokens."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != p.probs.shape:
        raise ValidationError("scores and distribution must have equal length")
    if delta < 0:
        raise ValidationError("delta must be >= 0")
    weights = np.exp(delta * (scores - scores.max()))
    q = p.probs * weights
    total = q.sum()
    return Distribution(q / total)


def soft_ppl_transform(
    p: Distribution,
    scores: np.ndarray,
    lam: float,
    tie_rng: np.random.Generator,
) -> int:
    """Deterministic choice: argmax of score + lambda * log p over the support.

    Tokens with zero probability are excluded; exact ties are broken
    uniformly with ``tie_rng``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != p.probs.shape:
        raise ValidationError("scores and distribution must have equal length")
    if lam <= 0:
        raise ValidationError("lambda must be > 0")
    support = p.support
    if support.size == 0:
        raise ValidationError("distribution has empty support")
    vals = scores[support] + lam * np.log(p.probs[support])
    best = vals.max()
    winners = support[vals == best]
    if winners.size == 1:
        return int(winners[0])
    return int(winners[tie_rng.integers(0, winners.size)])


@dataclass(frozen=True)
class SolveResult:
    """Outcome of the per-step lambda solve."""

    lam: float
    status: str  # "ok", "degenerate", or "infeasible"
    target: float
    achieved: float


def solve_lambda(
    p: Distribution,
    m: int,
    epsilon: float,
    mc_samples: int = SOLVER_MC_SAMPLES,
    iterations: int = SOLVER_ITERATIONS,
    rng: np.random.Generator | None = None,
    weights: np.ndarray | None = None,
    offset: float = 0.0,
) -> SolveResult:
    """Solve for lambda so the expected log-probability drop equals epsilon.

    The expectation over fresh score draws is estimated once with a fixed
    batch of ``mc_samples`` draws (common random numbers), which makes the
    bracketing function monotone in lambda and the solve deterministic given
    the rng. Bisection runs exactly ``iterations`` halvings on
    (0, SOLVER_LAMBDA_MAX).

    ``weights``/``offset`` describe the per-bit vote weighting (uniform
    weights when omitted, i.e. plain binomial scores).

    Degenerate distributions (single-token support) satisfy any constraint;
    they return the upper bracket with status "degenerate". If even the
    smallest lambda cannot distort quality by epsilon, the lower bracket is
    returned with status "infeasible".
    """
    if m < 1:
        raise ValidationError("m must be >= 1")
    if epsilon < 0:
        raise ValidationError("epsilon must be >= 0")
    if mc_samples < 1 or iterations < 1:
        raise ValidationError("mc_samples and iterations must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    if weights is None:
        weights = np.ones(m, dtype=np.float64)
        offset = 0.0
    weights = np.ascontiguousarray(weights, dtype=np.float64)

    support = p.support
    logp_full = np.log(p.probs[support])
    target = float((p.probs[support] * logp_full).sum()) - epsilon
    if support.size == 1:
        return SolveResult(
            lam=SOLVER_LAMBDA_MAX, status="degenerate", target=target, achieved=target
        )

    nbytes = (support.size + 7) // 8
    raw = np.frombuffer(rng.bytes(mc_samples * m * nbytes), dtype=np.uint8)
    bits = np.unpackbits(raw.reshape(mc_samples, m, nbytes), axis=2)
    bits = np.ascontiguousarray(bits[:, :, : support.size])
    msg_ones = np.ones(m, dtype=np.uint8)
    table = kernels.mc_score_table(bits, msg_ones, weights, offset)
    logp = np.ascontiguousarray(logp_full)

    lo, hi = kernels.softppl_bisect(table, logp, target, iterations, SOLVER_LAMBDA_MAX)
    lam = 0.5 * (lo + hi)
    achieved = float(kernels.softppl_objective(table, logp, lam))
    status = "infeasible" if lo == 0.0 else "ok"
    return SolveResult(lam=lam, status=status, target=target, achieved=achieved)


def synthid_layer(p: Distribution, scores: np.ndarray) -> Distribution:
    """One distortion-free tournament layer.

    q(u) = p(u) * [1 + sigma * (score(u) - E_p[score])] with
    sigma = 1 / (max score - min score); when all scores are equal the
    transform is the identity (continuous extension).
    """
    g = np.asarray(scores, dtype=np.float64)
    if g.shape != p.probs.shape:
        raise ValidationError("scores and distribution must have equal length")
    g_max, g_min = float(g.max()), float(g.min())
    if g_max == g_min:
        return p
    sigma = 1.0 / (g_max - g_min)
    mean = float(np.dot(p.probs, g))
    q = p.probs * (1.0 + sigma * (g - mean))
    return Distribution(np.maximum(q, 0.0))


def synthid_multibit_transform(
    p: Distribution,
    seed: ContextSeed,
    message: Message,
    n_layer: int,
) -> Distribution:
    """Iterated tournament layers, one fresh score set per layer.

    Runs the layer recursion on raw arrays; identical arithmetic to calling
    :func:`synthid_layer` n_layer times (the test suite checks this).
    """
    if n_layer < 1:
        raise ValidationError("layer count must be >= 1")
    m = len(message)
    msg = message.as_array()
    ones = np.ones(m, dtype=np.float64)
    q = p.probs.copy()
    n = len(q)
    for layer in range(n_layer):
        g = kernels.fused_scores(seed.stream_key, layer, msg, ones, 0.0, n)
        g_max, g_min = float(g.max()), float(g.min())
        if g_max == g_min:
            continue
        sigma = 1.0 / (g_max - g_min)
        mean = float(np.dot(q, g))
        q = q * (1.0 + sigma * (g - mean))
        np.maximum(q, 0.0, out=q)
    return Distribution(q)


def synthid_layer_weights(n_layer: int) -> np.ndarray:
    """Linearly decaying decode weights (10 down to 1), summing to n_layer."""
    if n_layer < 1:
        raise ValidationError("layer count must be >= 1")
    raw = np.linspace(10.0, 1.0, n_layer) if n_layer > 1 else np.array([10.0])
    return raw * (n_layer / raw.sum())


def synthid_weighted_decode(layer_scores: np.ndarray) -> tuple:
    """Per-token vote contributions and the grand-mean decoded message.

    ``layer_scores`` has shape (n_tokens, n_layer, m) and holds the raw
    per-layer score bits of each realized token. Contributions are the
    weighted layer means, one value in [0, 1] per (token, bit); the decoded
    bit is 1 when the grand mean over tokens is >= 1/2.
    """
    arr = np.asarray(layer_scores, dtype=np.float64)
    if arr.ndim != 3:
        raise ValidationError("layer scores must have shape (tokens, layers, bits)")
    n_tokens, n_layer, m = arr.shape
    if n_tokens == 0:
        raise ValidationError("need at least one token")
    w = synthid_layer_weights(n_layer)
    contributions = np.einsum("tkm,k->tm", arr, w) / n_layer
    grand = contributions.mean(axis=0)
    decoded = Message.from_bits(int(x >= 0.5) for x in grand)
    return contributions, decoded
