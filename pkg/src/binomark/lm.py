"""Synthetic language model and the watermarked generation loop.

The toy model stands in for a real LM at desk scale: a seeded first-order
Markov chain whose rows are Dirichlet draws, plus uniform and fixed-table
variants for exact tests. Generation shapes the next-token law with
temperature and top-k first, then applies the watermark transform, then
samples; that order is fixed and recorded with each run.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from . import kernels
from .core import (
    BinomarkError,
    Distribution,
    GenerationRecord,
    Message,
    TokenSequence,
    ValidationError,
    Vocabulary,
    WatermarkKey,
)
from .encoder import (
    DEFAULT_HORIZONS,
    AllocationConfig,
    EncoderState,
    allocate_segment,
    stateful_weights,
    update_state,
)
from .prf import derive_seed, token_score_bits
from .schemes import (
    SchemeConfig,
    red_green_transform,
    soft_ppl_transform,
    solve_lambda,
    synthid_multibit_transform,
)

PROMPT_LENGTH = 3

ENCODER_MODES = ("stateless", "stateful", "allocation")


class IllegalCombinationError(BinomarkError):
    """Scheme and encoder mode cannot be combined."""


class ZeroProbabilityTokenError(BinomarkError):
    """A sequence contains a token the model assigns zero probability."""


@dataclass(frozen=True)
class ToyLM:
    """Seeded synthetic next-token model over integer tokens."""

    variant: str  # "markov1", "uniform", or "fixed_table"
    vocab: Vocabulary
    alpha: float = 0.3
    seed: int = 0
    table: np.ndarray | None = None

    def __post_init__(self):
        # Read-mostly cache of shaped rows, shared across generations.
        object.__setattr__(self, "_shape_cache", {})
        if self.variant not in ("markov1", "uniform", "fixed_table"):
            raise ValidationError(f"unknown LM variant {self.variant!r}")
        if self.variant == "markov1" and self.alpha <= 0:
            raise ValidationError("Dirichlet concentration must be > 0")
        if self.variant == "fixed_table":
            if self.table is None:
                raise ValidationError("fixed_table variant needs a table")
            table = np.ascontiguousarray(self.table, dtype=np.float64)
            if table.shape != (self.vocab.size, self.vocab.size):
                raise ValidationError("table must be square over the vocabulary")
            if np.any(table < 0) or np.any(np.abs(table.sum(axis=1) - 1.0) > 1e-9):
                raise ValidationError("table rows must be probability vectors")
            table.setflags(write=False)
            object.__setattr__(self, "table", table)

    @classmethod
    def markov1(cls, vocab_size: int = 1024, alpha: float = 0.3, seed: int = 0) -> "ToyLM":
        return cls(variant="markov1", vocab=Vocabulary(vocab_size), alpha=alpha, seed=seed)

    @classmethod
    def uniform(cls, vocab_size: int) -> "ToyLM":
        return cls(variant="uniform", vocab=Vocabulary(vocab_size))

    @classmethod
    def fixed_table(cls, table: np.ndarray) -> "ToyLM":
        table = np.asarray(table, dtype=np.float64)
        return cls(variant="fixed_table", vocab=Vocabulary(table.shape[0]), table=table)

    @cached_property
    def _rows(self) -> np.ndarray:
        n = self.vocab.size
        if self.variant == "uniform":
            rows = np.full((1, n), 1.0 / n)
        elif self.variant == "fixed_table":
            rows = self.table
        else:
            rng = np.random.default_rng(np.random.SeedSequence((self.seed, n)))
            gammas = rng.gamma(self.alpha, size=(n, n))
            rows = gammas / gammas.sum(axis=1, keepdims=True)
        rows = np.ascontiguousarray(rows)
        rows.setflags(write=False)
        return rows

    def prompt(self) -> tuple:
        """Fixed prompt derived from the model seed."""
        rng = np.random.default_rng(np.random.SeedSequence((self.seed, 0x9A0F)))
        return tuple(int(t) for t in rng.integers(0, self.vocab.size, PROMPT_LENGTH))

    def to_json_dict(self) -> dict:
        if self.variant == "fixed_table":
            raise ValidationError("fixed_table models are not serializable")
        return {
            "variant": self.variant,
            "vocab_size": self.vocab.size,
            "alpha": self.alpha,
            "seed": self.seed,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "ToyLM":
        return cls(
            variant=data["variant"],
            vocab=Vocabulary(data["vocab_size"]),
            alpha=data.get("alpha", 0.3),
            seed=data.get("seed", 0),
        )


def next_distribution(lm: ToyLM, context: Sequence[int]) -> Distribution:
    """Next-token law given a context; Markov variants use the last token."""
    rows = lm._rows
    if lm.variant == "uniform":
        return Distribution(rows[0])
    if len(context) == 0:
        n = lm.vocab.size
        return Distribution(np.full(n, 1.0 / n))
    return Distribution(rows[int(context[-1])])


@dataclass(frozen=True)
class SamplerConfig:
    """Temperature/top-k shaping and the completion length bounds."""

    temperature: float = 0.7
    top_k: int = 50
    min_tokens: int = 250
    max_tokens: int = 350

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValidationError("temperature must be > 0")
        if self.top_k < 1:
            raise ValidationError("top_k must be >= 1")
        if not 1 <= self.min_tokens <= self.max_tokens:
            raise ValidationError("need 1 <= min_tokens <= max_tokens")

    def to_json_dict(self) -> dict:
        return {
            "temperature": self.temperature,
            "top_k": self.top_k,
            "min_tokens": self.min_tokens,
            "max_tokens": self.max_tokens,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "SamplerConfig":
        return cls(**data)


def shape_distribution(p: Distribution, cfg: SamplerConfig) -> Distribution:
    """Apply temperature then top-k (ties by token id), renormalizing."""
    probs = p.probs
    if cfg.temperature != 1.0:
        with np.errstate(divide="ignore"):
            logp = np.where(probs > 0, np.log(probs), -np.inf)
        scaled = (logp - logp.max()) / cfg.temperature
        probs = np.exp(scaled)
        probs = probs / probs.sum()
    if cfg.top_k < len(probs):
        order = np.argsort(-probs, kind="stable")  # stable: ties by token id
        keep = order[: cfg.top_k]
        shaped = np.zeros_like(probs)
        shaped[keep] = probs[keep]
        probs = shaped / shaped.sum()
    return Distribution(probs)


@dataclass(frozen=True)
class EncoderConfig:
    """Which scores drive the watermark transform."""

    mode: str = "stateless"
    segments: int = 1
    horizons: tuple = DEFAULT_HORIZONS

    def __post_init__(self):
        if self.mode not in ENCODER_MODES:
            raise ValidationError(f"unknown encoder mode {self.mode!r}")
        if self.segments < 1:
            raise ValidationError("segment count must be >= 1")
        object.__setattr__(self, "horizons", tuple(int(h) for h in self.horizons))

    def allocation(self) -> AllocationConfig | None:
        if self.mode == "allocation" and self.segments > 1:
            return AllocationConfig(segments=self.segments)
        return None

    def to_json_dict(self) -> dict:
        out = {"mode": self.mode}
        if self.mode == "allocation":
            out["segments"] = self.segments
        if self.mode == "stateful":
            out["horizons"] = list(self.horizons)
        return out

    @classmethod
    def from_json_dict(cls, data: dict) -> "EncoderConfig":
        return cls(
            mode=data["mode"],
            segments=data.get("segments", 1),
            horizons=tuple(data.get("horizons", DEFAULT_HORIZONS)),
        )


def _check_combination(
    scheme: SchemeConfig, encoder: EncoderConfig, permit_stateful_synthid: bool
) -> None:
    if encoder.mode == "stateful" and encoder.segments > 1:
        raise IllegalCombinationError("stateful encoding excludes segment allocation")
    if encoder.mode == "allocation" and scheme.variant == "synthid":
        raise IllegalCombinationError("tournament scheme does not support allocation")
    if (
        encoder.mode == "stateful"
        and scheme.variant == "synthid"
        and not permit_stateful_synthid
    ):
        raise IllegalCombinationError(
            "stateful encoding is off for the tournament scheme by default; "
            "pass permit_stateful_synthid=True to force it"
        )


def _sample(q: Distribution, rng: np.random.Generator) -> int:
    # One uniform draw per position: keeps generation prefix-stable.
    cdf = np.cumsum(q.probs)
    idx = int(np.searchsorted(cdf, rng.random(), side="right"))
    return min(idx, len(q.probs) - 1)


def _shaped_next(lm: ToyLM, context: list, cfg: SamplerConfig) -> Distribution:
    """Shaped next-token law, cached per (sampler, last token)."""
    last = int(context[-1]) if context else -1
    key = (cfg.temperature, cfg.top_k, last)
    cached = lm._shape_cache.get(key)
    if cached is None:
        cached = shape_distribution(next_distribution(lm, context), cfg)
        lm._shape_cache[key] = cached
    return cached


def generate(
    lm: ToyLM,
    key: WatermarkKey,
    message: Message,
    scheme: SchemeConfig,
    encoder: EncoderConfig = EncoderConfig(),
    sampler: SamplerConfig = SamplerConfig(),
    n_tokens: int | None = None,
    seed: int = 0,
    prompt: Sequence[int] | None = None,
    permit_stateful_synthid: bool = False,
) -> GenerationRecord:
    """Sample a watermarked completion and record everything needed later.

    Per step: shape the LM law, derive the context seed, build watermark
    scores for the configured encoder, transform, sample one token, and
    fold the realized complemented scores into the encoder state.
    """
    _check_combination(scheme, encoder, permit_stateful_synthid)
    m = len(message)
    alloc = encoder.allocation()
    if alloc is not None:
        alloc.validate_for(m)

    root = np.random.SeedSequence((seed, 0xB1A0))
    sample_ss, tie_ss, solver_ss, length_ss = root.spawn(4)
    sample_rng = np.random.default_rng(sample_ss)
    tie_rng = np.random.default_rng(tie_ss)
    solver_rng = np.random.default_rng(solver_ss)
    if n_tokens is None:
        length_rng = np.random.default_rng(length_ss)
        n_tokens = int(
            length_rng.integers(sampler.min_tokens, sampler.max_tokens + 1)
        )
    if n_tokens < 1:
        raise ValidationError("n_tokens must be >= 1")

    prompt = lm.prompt() if prompt is None else tuple(int(t) for t in prompt)
    sentinel = lm.vocab.sentinel
    k = key.context_window
    msg_arr = message.as_array()
    ones = np.ones(m, dtype=np.float64)
    state = EncoderState.fresh(m, encoder.horizons)
    context = list(prompt)
    emitted = []

    for _ in range(n_tokens):
        window = context[-k:]
        if len(window) < k:
            window = [sentinel] * (k - len(window)) + window
        ctx_seed = derive_seed(key, window)
        p = _shaped_next(lm, context, sampler)

        if scheme.variant == "none":
            token = _sample(p, sample_rng)
        elif scheme.variant == "synthid":
            q = synthid_multibit_transform(p, ctx_seed, message, scheme.n_layer)
            token = _sample(q, sample_rng)
        else:
            if encoder.mode == "stateful":
                offset, weights = stateful_weights(state)
            elif alloc is not None:
                seg = allocate_segment(ctx_seed, alloc)
                weights = np.zeros(m, dtype=np.float64)
                weights[list(alloc.segment_bits(m, seg))] = 1.0
                offset = 0.0
            else:
                offset, weights = 0.0, ones
            scores = kernels.fused_scores(
                ctx_seed.stream_key, 0, msg_arr, weights, offset, lm.vocab.size
            )
            if scheme.variant == "red_green":
                q = red_green_transform(p, scores, scheme.delta)
                token = _sample(q, sample_rng)
            else:
                if scheme.variant == "soft_ppl":
                    lam = solve_lambda(
                        p,
                        m,
                        scheme.epsilon,
                        rng=solver_rng,
                        weights=weights,
                        offset=offset,
                    ).lam
                else:
                    lam = scheme.lam
                token = soft_ppl_transform(p, scores, lam, tie_rng)

        realized = token_score_bits(ctx_seed, token, m)
        if encoder.mode == "stateful":
            state = update_state(state, (realized == msg_arr).astype(int))
        context.append(token)
        emitted.append(token)

    return GenerationRecord(
        prompt=prompt,
        tokens=tuple(emitted),
        message=message,
        scheme=scheme.to_json_dict(),
        encoder=encoder.to_json_dict(),
        vocab_size=lm.vocab.size,
        lm=lm.to_json_dict() if lm.variant != "fixed_table" else None,
        seed=seed,
    )


def perplexity(lm: ToyLM, seq: TokenSequence) -> float:
    """exp of the mean negative log-likelihood under the unshaped model."""
    if len(seq) == 0:
        raise ValidationError("sequence must be non-empty")
    total = 0.0
    context = list(seq.prefix)
    for token in seq.tokens:
        p = next_distribution(lm, context)
        prob = float(p.probs[token])
        if prob <= 0.0:
            raise ZeroProbabilityTokenError(f"token {token} has probability 0")
        total += np.log(prob)
        context.append(token)
    return float(np.exp(-total / len(seq)))


def log_perplexity(lm: ToyLM, seq: TokenSequence) -> float:
    """Mean negative log-likelihood; the quality axis used in sweeps."""
    return float(np.log(perplexity(lm, seq)))
