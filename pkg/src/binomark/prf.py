"""Deterministic keyed pseudorandom scoring.

The same construction runs at encode and decode time, so it is frozen as an
interface guarantee:

* context seed: keyed BLAKE2b (16-byte digest, personalization
  ``binomark.ctx``) over the last k token ids packed as little-endian
  32-bit integers, keyed with the 32-byte watermark key;
* stream key: unkeyed BLAKE2b (32-byte digest, personalization
  ``binomark.strm``) of the context seed;
* per-entry scores: ChaCha20 keystream bits as described in
  :mod:`binomark.kernels`.

Everything here is a pure function of its arguments; no call-order state.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from . import kernels
from .core import ValidationError, Vocabulary, WatermarkKey

_CTX_PERSON = b"binomark.ctx"
_STREAM_PERSON = b"binomark.strm"
_SEGMENT_PERSON = b"binomark.seg"


@dataclass(frozen=True)
class ContextSeed:
    """128-bit seed derived from (key, context window)."""

    seed: bytes

    def __post_init__(self):
        if len(self.seed) != 16:
            raise ValidationError("context seed must be exactly 16 bytes")

    @cached_property
    def stream_key(self) -> bytes:
        """32-byte ChaCha20 key expanded from the seed."""
        return hashlib.blake2b(
            self.seed, digest_size=32, person=_STREAM_PERSON
        ).digest()


def derive_seed(
    key: WatermarkKey, context: Sequence[int], pad_id: int | None = None
) -> ContextSeed:
    """Seed for a context window of up to k token ids.

    Windows shorter than k (sequence start) are left-padded with ``pad_id``,
    normally the vocabulary's sentinel id.
    """
    k = key.context_window
    ids = [int(t) for t in context]
    if len(ids) > k:
        raise ValidationError(f"context has {len(ids)} ids, window is {k}")
    if len(ids) < k:
        if pad_id is None:
            raise ValidationError("short context requires an explicit pad id")
        ids = [int(pad_id)] * (k - len(ids)) + ids
    data = struct.pack(f"<{k}I", *ids)
    digest = hashlib.blake2b(
        data, key=key.key, digest_size=16, person=_CTX_PERSON
    ).digest()
    return ContextSeed(digest)


@dataclass(frozen=True)
class ScoreBlock:
    """Per-token, per-bit Bernoulli scores for one context seed and layer."""

    values: np.ndarray  # (m, vocab_size) uint8
    layer: int = 0

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.uint8)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.values.shape[1]


def bernoulli_score(seed: ContextSeed, token: int, bit: int, layer: int = 0) -> int:
    """Single Bernoulli(0.5) score; pure function of its arguments."""
    if token < 0 or bit < 0 or layer < 0:
        raise ValidationError("token, bit, and layer indices must be >= 0")
    return int(kernels.score_bit(seed.stream_key, layer, bit, token))


def score_matrix(
    seed: ContextSeed, vocab: Vocabulary, m: int, layer: int = 0
) -> ScoreBlock:
    """Full (m, vocab_size) score block; entry (i, u) == bernoulli_score(u, i)."""
    if m < 1:
        raise ValidationError("score matrix needs m >= 1")
    values = kernels.score_bits(seed.stream_key, layer, m, vocab.size)
    return ScoreBlock(values=values, layer=layer)


def token_score_bits(
    seed: ContextSeed, token: int, m: int, layer: int = 0
) -> np.ndarray:
    """Scores of one token across all m bit indices, shape (m,) uint8."""
    return kernels.token_bits(seed.stream_key, layer, m, token)


def segment_draw(seed: ContextSeed, n_segments: int) -> int:
    """Uniform pseudorandom segment index in {0..n_segments-1}."""
    if n_segments < 1:
        raise ValidationError("need at least one segment")
    if n_segments == 1:
        return 0
    digest = hashlib.blake2b(
        seed.seed, digest_size=8, person=_SEGMENT_PERSON
    ).digest()
    u = struct.unpack("<Q", digest)[0]
    return (n_segments * u) >> 64
