"""Message extraction and confidence from a token sequence.

The decoder recomputes the pseudorandom scores of each realized token,
de-duplicates (context, token) pairs for statistical validity, majority-votes
each bit, and attaches:

* an exact two-sided binomial p-value per bit, and
* a whole-text log-likelihood-ratio statistic whose null distribution is
  estimated by Monte Carlo, giving a calibrated zero-bit p-value.

Nothing here needs the language model; a sequence plus the key suffices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, ndtr, xlogy

from .core import (
    BinomarkError,
    DetectionReport,
    Message,
    TokenSequence,
    ValidationError,
    WatermarkKey,
)
from .encoder import AllocationConfig, allocate_segment
from .prf import derive_seed, token_score_bits
from .schemes import synthid_weighted_decode

DEFAULT_MC_SAMPLES = 20_000
# Exact log-space tail sums up to this n; normal approximation beyond.
EXACT_TAIL_MAX_N = 100_000


class EmptyAfterDedupError(BinomarkError):
    """No scorable positions remain after de-duplication."""


@dataclass(frozen=True)
class VoteTable:
    """Per-bit match counts over the de-duplicated positions."""

    counts: tuple
    totals: tuple
    n_eff: int

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        totals = tuple(int(n) for n in self.totals)
        if len(counts) != len(totals):
            raise ValidationError("counts and totals must have equal length")
        if any(not 0 <= c <= n for c, n in zip(counts, totals)):
            raise ValidationError("counts must lie in [0, total]")
        if any(n > self.n_eff for n in totals):
            raise ValidationError("per-bit totals cannot exceed n_eff")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "totals", totals)

    @property
    def m(self) -> int:
        return len(self.counts)


def dedup_positions(seq: TokenSequence, k: int) -> list:
    """First occurrence of each distinct (k-token context, token) pair."""
    seen = set()
    kept = []
    for t in range(len(seq)):
        pair = (seq.context_at(t, k), seq.tokens[t])
        if pair not in seen:
            seen.add(pair)
            kept.append(t)
    return kept


def _majority(counts, totals, tie_rng: np.random.Generator) -> Message:
    bits = []
    for c, n in zip(counts, totals):
        if 2 * c > n:
            bits.append(1)
        elif 2 * c < n:
            bits.append(0)
        else:
            bits.append(int(tie_rng.integers(0, 2)))
    return Message.from_bits(bits)


def decode_message(
    seq: TokenSequence,
    key: WatermarkKey,
    m: int,
    tie_rng: np.random.Generator,
    allocation: AllocationConfig | None = None,
    layer: int = 0,
) -> tuple:
    """Majority-vote decode; returns (message, vote table).

    With an allocation config, each position votes only on the bits of its
    pseudorandomly assigned segment, so per-bit totals differ.
    """
    if m < 1:
        raise ValidationError("m must be >= 1")
    if allocation is not None:
        allocation.validate_for(m)
    positions = dedup_positions(seq, key.context_window)
    if not positions:
        raise EmptyAfterDedupError("sequence is empty after de-duplication")
    counts = np.zeros(m, dtype=np.int64)
    totals = np.zeros(m, dtype=np.int64)
    allocated = allocation is not None and allocation.enabled and allocation.segments > 1
    for t in positions:
        seed = derive_seed(key, seq.context_at(t, key.context_window))
        bits = token_score_bits(seed, seq.tokens[t], m, layer)
        if allocated:
            idx = allocation.segment_bits(m, allocate_segment(seed, allocation))
            counts[idx] += bits[idx]
            totals[idx] += 1
        else:
            counts += bits
            totals += 1
    table = VoteTable(tuple(counts), tuple(totals), n_eff=len(positions))
    return _majority(counts, totals, tie_rng), table


def decode_message_synthid(
    seq: TokenSequence,
    key: WatermarkKey,
    m: int,
    n_layer: int,
    tie_rng: np.random.Generator,
) -> tuple:
    """Decode a tournament-scheme sequence; returns (message, vote table).

    The reported message is the weighted grand mean over layers (early
    layers count more). The vote table uses hard per-position votes
    (weighted layer mean above one half), which stay Bernoulli(0.5) under
    the null and so keep the binomial tests valid; near 50/50 margins the
    two decodes can differ.
    """
    positions = dedup_positions(seq, key.context_window)
    if not positions:
        raise EmptyAfterDedupError("sequence is empty after de-duplication")
    layer_scores = np.empty((len(positions), n_layer, m), dtype=np.float64)
    for j, t in enumerate(positions):
        seed = derive_seed(key, seq.context_at(t, key.context_window))
        for layer in range(n_layer):
            layer_scores[j, layer] = token_score_bits(seed, seq.tokens[t], m, layer)
    contributions, decoded = synthid_weighted_decode(layer_scores)
    votes = np.where(
        contributions > 0.5,
        1,
        np.where(contributions < 0.5, 0, tie_rng.integers(0, 2, contributions.shape)),
    )
    counts = votes.sum(axis=0)
    totals = np.full(m, len(positions), dtype=np.int64)
    table = VoteTable(tuple(counts), tuple(totals), n_eff=len(positions))
    return decoded, table


# Linear-space ratio recursion stays normalized (terms >= 2^-n) up to here.
_RATIO_RECURSION_MAX_N = 1000


def _half_binom_lower_tail(s: int, n: int) -> float:
    """P[X <= s] for X ~ Binomial(n, 1/2); called with s <= n/2.

    For n up to 1000 the probabilities are summed directly with the term
    ratio recursion C(n,k+1) = C(n,k)(n-k)/(k+1) starting from the exact
    2^-n, which keeps the relative error near 2n machine epsilons. Larger
    n uses a log-space sum of gammaln terms.
    """
    if s < 0:
        return 0.0
    if n <= _RATIO_RECURSION_MAX_N:
        term = math.ldexp(1.0, -n)
        total = term
        for k in range(s):
            term *= (n - k) / (k + 1.0)
            total += term
        return total
    k = np.arange(0, s + 1, dtype=np.float64)
    terms = (
        gammaln(n + 1.0)
        - gammaln(k + 1.0)
        - gammaln(n - k + 1.0)
        - n * math.log(2.0)
    )
    peak = terms.max()
    return float(math.exp(peak) * np.exp(terms - peak).sum())


def binom_upper_tail(successes: int, n: int) -> float:
    """P[X >= successes] for X ~ Binomial(n, 1/2); exact for moderate n."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    if not 0 <= successes <= n:
        raise ValidationError("successes must lie in [0, n]")
    return _half_binom_lower_tail(n - successes, n)


def binom_two_sided_pvalue(successes: int, n: int) -> float:
    """Exact two-sided p-value against Binomial(n, 1/2).

    p = min(1, 2 * min(P[X <= S], P[X >= S])) with exact tail sums up to
    EXACT_TAIL_MAX_N; a continuity-corrected normal approximation takes
    over beyond that.
    """
    if n < 1:
        raise ValidationError("n must be >= 1")
    if not 0 <= successes <= n:
        raise ValidationError("successes must lie in [0, n]")
    lo = min(successes, n - successes)
    if n <= EXACT_TAIL_MAX_N:
        tail = _half_binom_lower_tail(lo, n)
    else:
        tail = float(ndtr((lo + 0.5 - 0.5 * n) / math.sqrt(0.25 * n)))
    return min(1.0, 2.0 * tail)


def _lambda_terms(counts: np.ndarray, totals: np.ndarray) -> np.ndarray:
    # S log(S / (n/2)) + (n - S) log((n - S) / (n/2)), with 0 log 0 = 0.
    s = np.asarray(counts, dtype=np.float64)
    n = np.asarray(totals, dtype=np.float64)
    terms = xlogy(s, s) + xlogy(n - s, n - s) - xlogy(n, 0.5 * n)
    return np.maximum(terms, 0.0)


def zero_bit_statistic(table: VoteTable) -> float:
    """Log-likelihood ratio of the vote table against the fair-coin null."""
    if table.n_eff < 1:
        raise ValidationError("vote table must cover at least one position")
    counts = np.asarray(table.counts)
    totals = np.asarray(table.totals)
    return float(_lambda_terms(counts, totals).sum())


def null_lambda_samples(
    totals, mc_samples: int, rng: np.random.Generator
) -> np.ndarray:
    """Monte-Carlo draws of the statistic under the fair-coin null, sorted."""
    totals = np.asarray(totals, dtype=np.int64)
    draws = rng.binomial(totals, 0.5, size=(mc_samples, len(totals)))
    values = _lambda_terms(draws, totals).sum(axis=1)
    values.sort()
    return values


def zero_bit_pvalue(
    lambda_obs: float,
    n: int,
    m: int,
    mc_samples: int,
    mc_rng: np.random.Generator,
) -> float:
    """Add-one-corrected upper-tail Monte-Carlo p-value.

    p = (1 + #{null draws >= lambda_obs}) / (mc_samples + 1), so p > 0 and
    the test remains valid at finite sample size.
    """
    if mc_samples < 1000:
        raise ValidationError("mc_samples must be >= 1000")
    nulls = null_lambda_samples(np.full(m, n), mc_samples, mc_rng)
    return _pvalue_from_sorted_nulls(lambda_obs, nulls)


def _pvalue_from_sorted_nulls(lambda_obs: float, sorted_nulls: np.ndarray) -> float:
    exceed = len(sorted_nulls) - int(
        np.searchsorted(sorted_nulls, lambda_obs, side="left")
    )
    return (1 + exceed) / (len(sorted_nulls) + 1)


class NullLambdaCache:
    """Read-mostly cache of sorted null statistic draws, keyed by shape.

    Reuses one table per distinct (per-bit totals, mc_samples); the draw is
    seeded from the cache seed plus the key, so results are reproducible
    regardless of call order.
    """

    def __init__(self, seed: int = 0, mc_samples: int = DEFAULT_MC_SAMPLES):
        self.seed = seed
        self.mc_samples = mc_samples
        self._tables: dict = {}

    def pvalue(self, lambda_obs: float, totals) -> float:
        key = tuple(int(n) for n in totals)
        table = self._tables.get(key)
        if table is None:
            rng = np.random.default_rng(
                np.random.SeedSequence((self.seed, self.mc_samples) + key)
            )
            table = null_lambda_samples(key, self.mc_samples, rng)
            self._tables[key] = table
        return _pvalue_from_sorted_nulls(lambda_obs, table)


def analyze(
    seq: TokenSequence,
    key: WatermarkKey,
    m: int,
    tie_rng: np.random.Generator,
    allocation: AllocationConfig | None = None,
    synthid_layers: int | None = None,
    null_cache: NullLambdaCache | None = None,
) -> DetectionReport:
    """Full detection report for one sequence.

    ``synthid_layers`` switches to the tournament-scheme decoder; otherwise
    the plain binomial decoder runs (optionally with segment allocation).
    """
    if synthid_layers is not None:
        decoded, table = decode_message_synthid(seq, key, m, synthid_layers, tie_rng)
    else:
        decoded, table = decode_message(seq, key, m, tie_rng, allocation=allocation)
    pvalues = tuple(
        binom_two_sided_pvalue(c, n) if n >= 1 else 1.0
        for c, n in zip(table.counts, table.totals)
    )
    lam = zero_bit_statistic(table)
    cache = null_cache if null_cache is not None else NullLambdaCache()
    zp = cache.pvalue(lam, table.totals)
    return DetectionReport(
        decoded=decoded,
        per_bit_pvalues=pvalues,
        per_bit_counts=table.counts,
        per_bit_totals=table.totals,
        effective_length=table.n_eff,
        zero_bit_statistic=lam,
        zero_bit_pvalue=zp,
    )
