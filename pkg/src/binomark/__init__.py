"""Multibit text watermarking via binomial score encoding.

Embeds an m-bit payload into token sequences by summing message-complemented
Bernoulli scores per token, decodes it with per-bit binomial confidence, and
evaluates detectability, capacity, and robustness against a synthetic
language model.
"""

from .core import (
    DetectionReport,
    Distribution,
    GenerationRecord,
    Message,
    TokenSequence,
    Vocabulary,
    WatermarkKey,
    message_from_hex,
    message_to_hex,
    validate_distribution,
)
from .decoder import (
    NullLambdaCache,
    VoteTable,
    analyze,
    binom_two_sided_pvalue,
    decode_message,
    dedup_positions,
    zero_bit_pvalue,
    zero_bit_statistic,
)
from .encoder import (
    AllocationConfig,
    EncoderState,
    allocate_segment,
    binomial_score,
    complement_score,
    lemma1_probability,
    stateful_scores,
    stateless_scores,
    update_state,
)
from .kernels import active_backend
from .lm import (
    EncoderConfig,
    SamplerConfig,
    ToyLM,
    generate,
    next_distribution,
    perplexity,
    shape_distribution,
)
from .prf import ContextSeed, ScoreBlock, bernoulli_score, derive_seed, score_matrix
from .schemes import (
    SchemeConfig,
    red_green_transform,
    soft_ppl_transform,
    solve_lambda,
    synthid_layer,
    synthid_multibit_transform,
    synthid_weighted_decode,
)
from .attacks import AttackConfig, apply_attack, delete_tokens, substitute_tokens

__version__ = "0.1.0"
