"""Watermarking scores built from raw Bernoulli scores and the message.

Three encoders are provided:

* stateless binomial vote scores: per token, the number of bit positions
  whose complemented score matches the message;
* stateful scores: each bit's vote is weighted by how much one more
  matching token would improve that bit's expected recovery probability,
  so encoding pressure concentrates on bits that are still at risk;
* segment allocation: an ablation that encodes only one pseudorandomly
  selected segment of the message per position.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from .core import Message, ValidationError
from .prf import ContextSeed, ScoreBlock, segment_draw

DEFAULT_HORIZONS = (200, 300, 500, 1000, 2000)


class LengthError(ValidationError):
    def __init__(self, got: int, want: int):
        super().__init__(f"expected {want} score bits, got {got}")


def complement_score(g: int, bit: int) -> int:
    """XNOR of a raw score with a message bit: g if bit == 1 else 1 - g."""
    if g not in (0, 1) or bit not in (0, 1):
        raise ValidationError("inputs must be 0 or 1")
    return int(g == bit)


def binomial_score(score_bits: Sequence[int], message: Message) -> int:
    """Number of bit positions where a token's scores align with the message."""
    bits = np.asarray(score_bits, dtype=np.uint8)
    if bits.shape != (len(message),):
        raise LengthError(len(bits), len(message))
    return int((bits == message.as_array()).sum())


def stateless_scores(block: ScoreBlock, message: Message) -> np.ndarray:
    """Per-token binomial vote scores, shape (vocab_size,) float64."""
    if block.m != len(message):
        raise LengthError(block.m, len(message))
    matches = block.values == message.as_array()[:, None]
    return matches.sum(axis=0).astype(np.float64)


@dataclass(frozen=True)
class EncoderState:
    """Running signed vote margins d_i for each bit after t emitted tokens."""

    d: tuple
    t: int = 0
    horizons: tuple = DEFAULT_HORIZONS

    def __post_init__(self):
        object.__setattr__(self, "d", tuple(int(x) for x in self.d))
        object.__setattr__(self, "horizons", tuple(int(h) for h in self.horizons))
        if any(h < 1 for h in self.horizons) or not self.horizons:
            raise ValidationError("horizons must be positive and non-empty")
        if any(abs(x) > self.t for x in self.d):
            raise ValidationError("margins cannot exceed the step count")
        if any((x - self.t) % 2 != 0 for x in self.d):
            raise ValidationError("margin parity must match the step count")

    @classmethod
    def fresh(cls, m: int, horizons: Sequence[int] = DEFAULT_HORIZONS) -> "EncoderState":
        return cls(d=(0,) * m, t=0, horizons=tuple(horizons))

    @property
    def m(self) -> int:
        return len(self.d)


def update_state(state: EncoderState, realized_bits: Sequence[int]) -> EncoderState:
    """Fold one emitted token's complemented scores into the margins."""
    bits = [int(b) for b in realized_bits]
    if len(bits) != state.m:
        raise LengthError(len(bits), state.m)
    if any(b not in (0, 1) for b in bits):
        raise ValidationError("realized scores must be 0 or 1")
    new_d = tuple(d + 2 * b - 1 for d, b in zip(state.d, bits))
    return replace(state, d=new_d, t=state.t + 1)


def lemma1_probability(d: int, remaining: int) -> float:
    """Probability that a margin of d survives `remaining` unbiased steps.

    Normal approximation to P[d + random walk >= 0]; the random-walk oracle
    in the test suite checks it against simulation.
    """
    if remaining < 1:
        raise ValidationError("remaining steps must be >= 1")
    return float(ndtr(d / np.sqrt(remaining)))


def stateful_weights(state: EncoderState) -> tuple:
    """Per-bit vote weights and the constant offset of the stateful scores.

    For each bit the score contribution is Phi((d_i +- 1) / sqrt(T)) averaged
    over the horizon set, depending on whether the token's complemented score
    matches. That is affine in the match indicator:

        score(u) = offset + sum_i w_i * match_i(u)

    with w_i = phi_plus_i - phi_minus_i >= 0 and offset = sum_i phi_minus_i.
    Returns (offset, weights) for the fused kernels.
    """
    d = np.asarray(state.d, dtype=np.float64)[:, None]
    sqrt_t = np.sqrt(np.asarray(state.horizons, dtype=np.float64))[None, :]
    phi_plus = ndtr((d + 1.0) / sqrt_t).mean(axis=1)
    phi_minus = ndtr((d - 1.0) / sqrt_t).mean(axis=1)
    weights = phi_plus - phi_minus
    offset = float(phi_minus.sum())
    return offset, weights


def stateful_scores(
    state: EncoderState, block: ScoreBlock, message: Message
) -> np.ndarray:
    """Per-token stateful scores, shape (vocab_size,) float64."""
    if block.m != len(message) or state.m != len(message):
        raise LengthError(block.m, len(message))
    offset, weights = stateful_weights(state)
    matches = block.values == message.as_array()[:, None]
    out = np.full(block.vocab_size, offset, dtype=np.float64)
    for i in range(len(message)):  # ascending-bit order, same as the kernels
        out += weights[i] * matches[i]
    return out


@dataclass(frozen=True)
class AllocationConfig:
    """Segment-allocation ablation: encode one message segment per position."""

    segments: int
    enabled: bool = True

    def __post_init__(self):
        if self.segments < 1:
            raise ValidationError("segment count must be >= 1")

    def validate_for(self, m: int) -> None:
        if self.segments > m or m % self.segments != 0:
            raise ValidationError(
                f"{self.segments} segments do not evenly divide {m} bits"
            )

    def segment_bits(self, m: int, segment: int) -> range:
        width = m // self.segments
        return range(segment * width, (segment + 1) * width)


def allocate_segment(seed: ContextSeed, cfg: AllocationConfig) -> int:
    """Deterministic uniform segment index for this context seed."""
    if not cfg.enabled or cfg.segments == 1:
        return 0
    return segment_draw(seed, cfg.segments)
