"""Domain types and validation shared by every other module.

Tokens are plain integers in ``0..vocab_size-1``; no tokenizer is shipped.
Messages are fixed-length bit vectors with MSB-first hex serialization.
All types here are immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

import secrets
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

INGEST_SUM_TOL = 1e-6
INTERNAL_SUM_TOL = 1e-9

SCHEMA_VERSION = 1


class BinomarkError(Exception):
    """Base class for all package errors."""


class ValidationError(BinomarkError, ValueError):
    """Invalid value for a domain type or operation."""


class NegativeEntryError(ValidationError):
    """Probability vector contains a negative entry."""


class SumNotOneError(ValidationError):
    """Probability vector does not sum to one within tolerance."""


class BadHexError(ValidationError):
    """String is not valid hexadecimal."""


class TooShortError(ValidationError):
    """Hex string encodes fewer bits than requested."""


class LengthMismatchError(ValidationError):
    """Paired sequences have different lengths."""


@dataclass(frozen=True)
class Message:
    """An m-bit payload, stored MSB-first relative to its hex form."""

    bits: tuple

    def __post_init__(self):
        if len(self.bits) < 1:
            raise ValidationError("message must have at least one bit")
        if any(b not in (0, 1) for b in self.bits):
            raise ValidationError("message bits must be 0 or 1")
        object.__setattr__(self, "bits", tuple(int(b) for b in self.bits))

    def __len__(self) -> int:
        return len(self.bits)

    def as_array(self) -> np.ndarray:
        return np.array(self.bits, dtype=np.uint8)

    def to_hex(self) -> str:
        return message_to_hex(self)

    @classmethod
    def from_bits(cls, bits: Iterable[int]) -> "Message":
        return cls(tuple(bits))

    @classmethod
    def from_hex(cls, hex_string: str, m: int) -> "Message":
        return message_from_hex(hex_string, m)

    @classmethod
    def random(cls, m: int, rng: np.random.Generator) -> "Message":
        return cls(tuple(int(b) for b in rng.integers(0, 2, size=m)))


def message_from_hex(hex_string: str, m: int) -> Message:
    """First m bits of a hex string, MSB-first."""
    if m < 1:
        raise ValidationError("message length must be >= 1")
    text = hex_string.strip().lower()
    try:
        value = int(text, 16)
    except ValueError:
        raise BadHexError(f"not a hex string: {hex_string!r}") from None
    nbits = 4 * len(text)
    if nbits < m:
        raise TooShortError(f"hex string encodes {nbits} bits, need {m}")
    bits = tuple((value >> (nbits - 1 - j)) & 1 for j in range(m))
    return Message(bits)


def message_to_hex(message: Message) -> str:
    """Hex form of a message, MSB-first, zero-padded to whole hex digits."""
    m = len(message)
    ndigits = (m + 3) // 4
    value = 0
    for b in message.bits:
        value = (value << 1) | b
    value <<= 4 * ndigits - m
    return format(value, f"0{ndigits}x")


@dataclass(frozen=True)
class Vocabulary:
    """A finite token alphabet; tokens are the integers 0..size-1."""

    size: int

    def __post_init__(self):
        if self.size < 2:
            raise ValidationError("vocabulary size must be >= 2")

    @property
    def sentinel(self) -> int:
        """Reserved id used to pad contexts at sequence start."""
        return self.size


@dataclass(frozen=True)
class Distribution:
    """A probability vector over a finite vocabulary."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        probs = np.ascontiguousarray(probs)
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    def __len__(self) -> int:
        return len(self.probs)

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.probs > 0.0)

    def entropy(self) -> float:
        p = self.probs[self.probs > 0.0]
        return float(-(p * np.log(p)).sum())


def validate_distribution(probs: Sequence[float]) -> Distribution:
    """Validate and normalize a probability vector.

    Entries must be non-negative and sum to 1 within 1e-6; beyond that the
    caller must renormalize explicitly. Vectors already within 1e-9 of unit
    mass are passed through untouched, which makes validation idempotent.
    """
    arr = np.asarray(probs, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValidationError("probability vector must be non-empty and 1-D")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("probability vector contains non-finite entries")
    if np.any(arr < 0.0):
        raise NegativeEntryError("probability vector contains negative entries")
    total = float(arr.sum())
    if abs(total - 1.0) > INGEST_SUM_TOL:
        raise SumNotOneError(f"probabilities sum to {total!r}, not 1")
    if abs(total - 1.0) > INTERNAL_SUM_TOL:
        arr = arr / total
    return Distribution(arr)


@dataclass(frozen=True)
class TokenSequence:
    """An ordered token sequence plus the context that precedes it.

    ``prefix`` holds tokens generated or supplied before position 0 (for
    example a prompt); it is never scored itself but feeds the context
    windows of the first positions. Contexts shorter than the window are
    left-padded with the vocabulary's sentinel id.
    """

    tokens: tuple
    vocab: Vocabulary
    prefix: tuple = ()

    def __post_init__(self):
        tokens = tuple(int(t) for t in self.tokens)
        prefix = tuple(int(t) for t in self.prefix)
        for t in tokens + prefix:
            if not 0 <= t < self.vocab.size:
                raise ValidationError(f"token id {t} outside vocabulary")
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "prefix", prefix)

    def __len__(self) -> int:
        return len(self.tokens)

    def context_at(self, t: int, k: int) -> tuple:
        """The k token ids preceding position t, sentinel-padded on the left."""
        full = self.prefix + self.tokens[:t]
        window = full[-k:] if k <= len(full) else full
        pad = k - len(window)
        return (self.vocab.sentinel,) * pad + window


@dataclass(frozen=True)
class WatermarkKey:
    """A 256-bit secret plus the context window length used for seeding."""

    key: bytes
    context_window: int = 3

    def __post_init__(self):
        if len(self.key) != 32:
            raise ValidationError("watermark key must be exactly 32 bytes")
        if self.context_window < 1:
            raise ValidationError("context window must be >= 1")

    def __repr__(self) -> str:  # never expose key material
        return f"WatermarkKey(key=<32 bytes>, context_window={self.context_window})"

    @classmethod
    def from_hex(cls, hex_string: str, context_window: int = 3) -> "WatermarkKey":
        text = hex_string.strip().lower()
        try:
            raw = bytes.fromhex(text)
        except ValueError:
            raise BadHexError("key is not a hex string") from None
        return cls(raw, context_window)

    @classmethod
    def generate(cls, context_window: int = 3) -> "WatermarkKey":
        return cls(secrets.token_bytes(32), context_window)


@dataclass(frozen=True)
class GenerationRecord:
    """One generated sample: everything needed to evaluate it later.

    The watermark key is deliberately not stored; decoding takes it
    separately.
    """

    prompt: tuple
    tokens: tuple
    message: Message
    scheme: dict
    encoder: dict
    vocab_size: int
    lm: dict | None = None
    seed: int | None = None
    attack: dict | None = None
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        object.__setattr__(self, "prompt", tuple(int(t) for t in self.prompt))
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if len(self.tokens) == 0:
            raise ValidationError("record must contain a non-empty completion")

    def sequence(self) -> TokenSequence:
        return TokenSequence(
            tokens=self.tokens, vocab=Vocabulary(self.vocab_size), prefix=self.prompt
        )

    def to_json_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "prompt": list(self.prompt),
            "tokens": list(self.tokens),
            "message_hex": self.message.to_hex(),
            "message_bits": len(self.message),
            "scheme": dict(self.scheme),
            "encoder": dict(self.encoder),
            "vocab_size": self.vocab_size,
            "lm": dict(self.lm) if self.lm is not None else None,
            "seed": self.seed,
            "attack": dict(self.attack) if self.attack is not None else None,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "GenerationRecord":
        return cls(
            prompt=tuple(data["prompt"]),
            tokens=tuple(data["tokens"]),
            message=message_from_hex(data["message_hex"], data["message_bits"]),
            scheme=data["scheme"],
            encoder=data["encoder"],
            vocab_size=data["vocab_size"],
            lm=data.get("lm"),
            seed=data.get("seed"),
            attack=data.get("attack"),
            schema_version=data.get("schema_version", SCHEMA_VERSION),
        )


@dataclass(frozen=True)
class DetectionReport:
    """Decoded message plus per-bit and whole-text confidence."""

    decoded: Message
    per_bit_pvalues: tuple
    per_bit_counts: tuple
    per_bit_totals: tuple
    effective_length: int
    zero_bit_statistic: float
    zero_bit_pvalue: float

    def __post_init__(self):
        m = len(self.decoded)
        pvals = tuple(float(p) for p in self.per_bit_pvalues)
        counts = tuple(int(c) for c in self.per_bit_counts)
        totals = tuple(int(n) for n in self.per_bit_totals)
        if not (len(pvals) == len(counts) == len(totals) == m):
            raise ValidationError("per-bit fields must all have length m")
        if any(not 0.0 <= p <= 1.0 for p in pvals):
            raise ValidationError("p-values must lie in [0, 1]")
        if any(not 0 <= c <= n for c, n in zip(counts, totals)):
            raise ValidationError("per-bit counts must lie in [0, total]")
        if self.zero_bit_statistic < 0.0:
            raise ValidationError("zero-bit statistic must be >= 0")
        if not 0.0 < self.zero_bit_pvalue <= 1.0:
            raise ValidationError("zero-bit p-value must lie in (0, 1]")
        object.__setattr__(self, "per_bit_pvalues", pvals)
        object.__setattr__(self, "per_bit_counts", counts)
        object.__setattr__(self, "per_bit_totals", totals)

    def to_json_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "decoded_hex": self.decoded.to_hex(),
            "decoded_bits": len(self.decoded),
            "per_bit_pvalues": list(self.per_bit_pvalues),
            "per_bit_counts": list(self.per_bit_counts),
            "per_bit_totals": list(self.per_bit_totals),
            "effective_length": self.effective_length,
            "zero_bit_statistic": self.zero_bit_statistic,
            "zero_bit_pvalue": self.zero_bit_pvalue,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "DetectionReport":
        return cls(
            decoded=message_from_hex(data["decoded_hex"], data["decoded_bits"]),
            per_bit_pvalues=tuple(data["per_bit_pvalues"]),
            per_bit_counts=tuple(data["per_bit_counts"]),
            per_bit_totals=tuple(data["per_bit_totals"]),
            effective_length=data["effective_length"],
            zero_bit_statistic=data["zero_bit_statistic"],
            zero_bit_pvalue=data["zero_bit_pvalue"],
        )
