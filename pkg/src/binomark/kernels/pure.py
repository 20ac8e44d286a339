"""Pure NumPy/OpenSSL implementations of the hot-loop kernels.

This module is the reference backend. The compiled backend
(:mod:`binomark.kernels._fast`) reimplements every function here and must
produce bit-identical results, so summation orders are pinned:

* weighted vote scores accumulate bit contributions in ascending bit order,
* the sampling objective averages with a plain left-to-right sum.

Keystream layout (frozen, an interface guarantee):

* one ChaCha20 stream per (bit index, layer index), under a 32-byte stream
  key derived upstream from the context seed;
* the 16-byte ChaCha20 IV is ``pack('<QII', block_counter, bit, layer)``
  with the block counter starting at 0 (OpenSSL convention: the first 8
  IV bytes are the little-endian 64-bit block counter);
* the Bernoulli score of token ``u`` is the least significant bit of
  keystream byte ``u``.
"""

from __future__ import annotations

import struct

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms

NAME = "pure"

_CHACHA_BLOCK = 64


def _keystream(key32: bytes, bit: int, layer: int, start: int, nbytes: int) -> bytes:
    """ChaCha20 keystream bytes [start, start + nbytes) of stream (bit, layer)."""
    block, intra = divmod(start, _CHACHA_BLOCK)
    nonce = struct.pack("<QII", block, bit, layer)
    enc = Cipher(algorithms.ChaCha20(key32, nonce), mode=None).encryptor()
    return enc.update(bytes(intra + nbytes))[intra:]


def score_bits(key32: bytes, layer: int, m: int, n: int) -> np.ndarray:
    """Raw Bernoulli(0.5) score bits, shape (m, n) uint8."""
    out = np.empty((m, n), dtype=np.uint8)
    for i in range(m):
        buf = _keystream(key32, i, layer, 0, n)
        out[i] = np.frombuffer(buf, dtype=np.uint8) & 1
    return out


def token_bits(key32: bytes, layer: int, m: int, token: int) -> np.ndarray:
    """Score bits of a single token across all m bit indices, shape (m,) uint8."""
    out = np.empty(m, dtype=np.uint8)
    for i in range(m):
        out[i] = _keystream(key32, i, layer, token, 1)[0] & 1
    return out


def score_bit(key32: bytes, layer: int, bit: int, token: int) -> int:
    """Single Bernoulli score bit for (token, bit, layer)."""
    return _keystream(key32, bit, layer, token, 1)[0] & 1


def fused_scores(
    key32: bytes,
    layer: int,
    msg: np.ndarray,
    weights: np.ndarray,
    offset: float,
    n: int,
) -> np.ndarray:
    """Per-token weighted vote scores, shape (n,) float64.

    score(u) = offset + sum_i weights[i] * [bit_i(u) == msg[i]], accumulated
    in ascending bit order.
    """
    m = len(msg)
    out = np.full(n, offset, dtype=np.float64)
    for i in range(m):
        buf = _keystream(key32, i, layer, 0, n)
        match = ((np.frombuffer(buf, dtype=np.uint8) & 1) == msg[i])
        out += weights[i] * match
    return out


def mc_score_table(
    bits: np.ndarray,
    msg: np.ndarray,
    weights: np.ndarray,
    offset: float,
) -> np.ndarray:
    """Weighted vote scores for a (B, m, V) batch of sampled bits -> (B, V)."""
    nbatch, m, nvocab = bits.shape
    out = np.full((nbatch, nvocab), offset, dtype=np.float64)
    for i in range(m):
        out += weights[i] * (bits[:, i, :] == msg[i])
    return out


def softppl_objective(table: np.ndarray, logp: np.ndarray, lam: float) -> float:
    """Mean log-probability of the argmax(score + lam * logp) choice.

    Ties go to the lowest token index. The mean is a left-to-right sum so
    the compiled backend can reproduce it exactly.
    """
    lamlp = lam * logp
    picked = logp[np.argmax(table + lamlp, axis=1)]
    total = 0.0
    for x in picked.tolist():
        total += x
    return total / len(picked)


def softppl_bisect(
    table: np.ndarray,
    logp: np.ndarray,
    target: float,
    iterations: int,
    hi: float,
) -> tuple:
    """Bisection on (0, hi) for the smallest lam with objective >= target.

    Returns (lo, hi) after exactly `iterations` halvings; both backends run
    the identical float sequence.
    """
    lo = 0.0
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if softppl_objective(table, logp, mid) >= target:
            hi = mid
        else:
            lo = mid
    return lo, hi
