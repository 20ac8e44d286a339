"""Token-level robustness perturbations: deletion and random substitution.

Both attacks draw their randomness in a fraction-independent order (one
permutation plus one replacement draw per position), so sweeping the edit
fraction under a shared seed yields nested edits: everything changed at 10%
is also changed at 20%, and so on. Decoding an attacked sequence uses that
sequence's own contexts; positions are never realigned to the original.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    GenerationRecord,
    TokenSequence,
    ValidationError,
    Vocabulary,
)

ATTACK_KINDS = ("delete", "substitute")


@dataclass(frozen=True)
class AttackConfig:
    """One perturbation: what to do, how much of the text, and the seed."""

    kind: str
    fraction: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValidationError(f"unknown attack kind {self.kind!r}")
        if not 0.0 <= self.fraction <= 1.0:
            raise ValidationError("fraction must lie in [0, 1]")

    def to_json_dict(self) -> dict:
        return {"kind": self.kind, "fraction": self.fraction, "seed": self.seed}

    @classmethod
    def from_json_dict(cls, data: dict) -> "AttackConfig":
        return cls(**data)


def delete_tokens(
    seq: TokenSequence, fraction: float, rng: np.random.Generator
) -> TokenSequence:
    """Remove floor(fraction * n) uniformly chosen positions, keeping order."""
    if not 0.0 <= fraction <= 1.0:
        raise ValidationError("fraction must lie in [0, 1]")
    n = len(seq)
    n_delete = int(fraction * n)
    drop = set(rng.permutation(n)[:n_delete].tolist())
    kept = tuple(tok for t, tok in enumerate(seq.tokens) if t not in drop)
    return TokenSequence(tokens=kept, vocab=seq.vocab, prefix=seq.prefix)


def substitute_tokens(
    seq: TokenSequence,
    fraction: float,
    vocab: Vocabulary,
    rng: np.random.Generator,
) -> TokenSequence:
    """Replace floor(fraction * n) positions with a different random token."""
    if not 0.0 <= fraction <= 1.0:
        raise ValidationError("fraction must lie in [0, 1]")
    n = len(seq)
    n_sub = int(fraction * n)
    order = rng.permutation(n)
    # Drawn for every position so sweeps over the fraction stay nested.
    draws = rng.integers(0, vocab.size - 1, size=n)
    tokens = list(seq.tokens)
    for t, raw in zip(order[:n_sub], draws[:n_sub]):
        old = tokens[t]
        new = int(raw)
        if new >= old:
            new += 1
        tokens[t] = new
    return TokenSequence(tokens=tuple(tokens), vocab=vocab, prefix=seq.prefix)


def apply_attack(record: GenerationRecord, cfg: AttackConfig) -> GenerationRecord:
    """Attack a record's completion; the result carries an attack annotation."""
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xA77C)))
    seq = record.sequence()
    if cfg.kind == "delete":
        attacked = delete_tokens(seq, cfg.fraction, rng)
    else:
        attacked = substitute_tokens(seq, cfg.fraction, seq.vocab, rng)
    if len(attacked) == 0:
        raise ValidationError("attack removed every token; nothing to record")
    return GenerationRecord(
        prompt=record.prompt,
        tokens=attacked.tokens,
        message=record.message,
        scheme=record.scheme,
        encoder=record.encoder,
        vocab_size=record.vocab_size,
        lm=record.lm,
        seed=record.seed,
        attack=cfg.to_json_dict(),
    )
