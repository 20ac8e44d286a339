"""Compiled hot-loop kernels: ChaCha20 score streams fused with reductions.

Bit-identical to :mod:`binomark.kernels.pure`; see that module for the
frozen keystream layout and the pinned summation orders. The ChaCha20
block function below follows the OpenSSL convention (16-byte IV, first 8
bytes = little-endian 64-bit block counter) and is checked against the
OpenSSL keystream in the test suite.
"""

from libc.stdint cimport uint8_t, uint32_t, uint64_t

import numpy as np

NAME = "fast"


cdef inline uint32_t _rotl(uint32_t x, int n) noexcept nogil:
    return (x << n) | (x >> (32 - n))


cdef inline void _quarter(uint32_t *s, int a, int b, int c, int d) noexcept nogil:
    s[a] = s[a] + s[b]; s[d] ^= s[a]; s[d] = _rotl(s[d], 16)
    s[c] = s[c] + s[d]; s[b] ^= s[c]; s[b] = _rotl(s[b], 12)
    s[a] = s[a] + s[b]; s[d] ^= s[a]; s[d] = _rotl(s[d], 8)
    s[c] = s[c] + s[d]; s[b] ^= s[c]; s[b] = _rotl(s[b], 7)


cdef void _chacha_block(const uint32_t *key, uint64_t counter,
                        uint32_t n14, uint32_t n15, uint8_t *out) noexcept nogil:
    cdef uint32_t init[16]
    cdef uint32_t x[16]
    cdef uint32_t w
    cdef int i, r
    init[0] = 0x61707865u; init[1] = 0x3320646eu
    init[2] = 0x79622d32u; init[3] = 0x6b206574u
    for i in range(8):
        init[4 + i] = key[i]
    init[12] = <uint32_t>(counter & 0xffffffffu)
    init[13] = <uint32_t>(counter >> 32)
    init[14] = n14
    init[15] = n15
    for i in range(16):
        x[i] = init[i]
    for r in range(10):
        _quarter(x, 0, 4, 8, 12); _quarter(x, 1, 5, 9, 13)
        _quarter(x, 2, 6, 10, 14); _quarter(x, 3, 7, 11, 15)
        _quarter(x, 0, 5, 10, 15); _quarter(x, 1, 6, 11, 12)
        _quarter(x, 2, 7, 8, 13); _quarter(x, 3, 4, 9, 14)
    for i in range(16):
        w = x[i] + init[i]
        out[4 * i] = <uint8_t>(w & 0xffu)
        out[4 * i + 1] = <uint8_t>((w >> 8) & 0xffu)
        out[4 * i + 2] = <uint8_t>((w >> 16) & 0xffu)
        out[4 * i + 3] = <uint8_t>((w >> 24) & 0xffu)


cdef void _load_key(const uint8_t *raw, uint32_t *key) noexcept nogil:
    cdef int i
    for i in range(8):
        key[i] = ((<uint32_t>raw[4 * i])
                  | (<uint32_t>raw[4 * i + 1] << 8)
                  | (<uint32_t>raw[4 * i + 2] << 16)
                  | (<uint32_t>raw[4 * i + 3] << 24))


cdef void _fill_row_bits(const uint32_t *key, uint32_t bit, uint32_t layer,
                         uint8_t *row, Py_ssize_t n) noexcept nogil:
    cdef uint8_t buf[64]
    cdef uint64_t blk = 0
    cdef Py_ssize_t pos = 0, j, take
    while pos < n:
        _chacha_block(key, blk, bit, layer, buf)
        take = n - pos
        if take > 64:
            take = 64
        for j in range(take):
            row[pos + j] = buf[j] & 1u
        pos += take
        blk += 1


cdef inline void _check_key(bytes key32):
    if len(key32) != 32:
        raise ValueError("stream key must be exactly 32 bytes")


def keystream(bytes key32, unsigned int bit, unsigned int layer, Py_ssize_t n):
    """Raw keystream bytes of stream (bit, layer); used for parity tests."""
    _check_key(key32)
    cdef const uint8_t[::1] kv = key32
    cdef uint32_t key[8]
    _load_key(&kv[0], key)
    out = np.empty(n, dtype=np.uint8)
    cdef uint8_t[::1] ov = out
    cdef uint8_t buf[64]
    cdef uint64_t blk = 0
    cdef Py_ssize_t pos = 0, j, take
    with nogil:
        while pos < n:
            _chacha_block(key, blk, bit, layer, buf)
            take = n - pos
            if take > 64:
                take = 64
            for j in range(take):
                ov[pos + j] = buf[j]
            pos += take
            blk += 1
    return out.tobytes()


def score_bits(bytes key32, unsigned int layer, Py_ssize_t m, Py_ssize_t n):
    """Raw Bernoulli(0.5) score bits, shape (m, n) uint8."""
    _check_key(key32)
    cdef const uint8_t[::1] kv = key32
    cdef uint32_t key[8]
    _load_key(&kv[0], key)
    out = np.empty((m, n), dtype=np.uint8)
    cdef uint8_t[:, ::1] ov = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(m):
            _fill_row_bits(key, <uint32_t>i, layer, &ov[i, 0], n)
    return out


def token_bits(bytes key32, unsigned int layer, Py_ssize_t m, Py_ssize_t token):
    """Score bits of one token across all m bit indices, shape (m,) uint8."""
    _check_key(key32)
    cdef const uint8_t[::1] kv = key32
    cdef uint32_t key[8]
    _load_key(&kv[0], key)
    out = np.empty(m, dtype=np.uint8)
    cdef uint8_t[::1] ov = out
    cdef uint8_t buf[64]
    cdef uint64_t blk = <uint64_t>(token >> 6)
    cdef Py_ssize_t off = token & 63, i
    with nogil:
        for i in range(m):
            _chacha_block(key, blk, <uint32_t>i, layer, buf)
            ov[i] = buf[off] & 1u
    return out


def score_bit(bytes key32, unsigned int layer, unsigned int bit, Py_ssize_t token):
    """Single Bernoulli score bit for (token, bit, layer)."""
    _check_key(key32)
    cdef const uint8_t[::1] kv = key32
    cdef uint32_t key[8]
    _load_key(&kv[0], key)
    cdef uint8_t buf[64]
    _chacha_block(key, <uint64_t>(token >> 6), bit, layer, buf)
    return buf[token & 63] & 1


def fused_scores(bytes key32, unsigned int layer, const uint8_t[::1] msg,
                 const double[::1] weights, double offset, Py_ssize_t n):
    """Per-token weighted vote scores, shape (n,) float64."""
    _check_key(key32)
    if msg.shape[0] != weights.shape[0]:
        raise ValueError("msg and weights must have the same length")
    cdef const uint8_t[::1] kv = key32
    cdef uint32_t key[8]
    _load_key(&kv[0], key)
    out = np.full(n, offset, dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t m = msg.shape[0]
    cdef uint8_t buf[64]
    cdef uint8_t target
    cdef uint64_t blk
    cdef Py_ssize_t i, pos, j, take
    cdef double w
    with nogil:
        for i in range(m):
            w = weights[i]
            target = msg[i]
            blk = 0
            pos = 0
            while pos < n:
                _chacha_block(key, blk, <uint32_t>i, layer, buf)
                take = n - pos
                if take > 64:
                    take = 64
                for j in range(take):
                    ov[pos + j] += w * <double>((buf[j] & 1u) == target)
                pos += take
                blk += 1
    return out


def mc_score_table(const uint8_t[:, :, ::1] bits, const uint8_t[::1] msg,
                   const double[::1] weights, double offset):
    """Weighted vote scores for a (B, m, V) batch of sampled bits -> (B, V)."""
    cdef Py_ssize_t nbatch = bits.shape[0], m = bits.shape[1], nvocab = bits.shape[2]
    if msg.shape[0] != m or weights.shape[0] != m:
        raise ValueError("msg and weights must match the bit dimension")
    out = np.empty((nbatch, nvocab), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef const uint8_t *bptr = &bits[0, 0, 0]
    cdef const uint8_t *mptr = &msg[0]
    cdef const double *wptr = &weights[0]
    cdef const uint8_t *row
    cdef double *optr
    cdef double w
    cdef uint8_t target
    cdef Py_ssize_t b, i, v
    # Per-batch tile stays in L1; the v loop vectorizes while per-element
    # accumulation keeps ascending bit order (bit parity with the fallback).
    with nogil:
        for b in range(nbatch):
            optr = &ov[b, 0]
            for v in range(nvocab):
                optr[v] = offset
            for i in range(m):
                row = bptr + (b * m + i) * nvocab
                w = wptr[i]
                target = mptr[i]
                for v in range(nvocab):
                    optr[v] += w * <double>(row[v] == target)
    return out


cdef double _objective(const double[:, ::1] table, const double[::1] logp,
                       double lam, double *scratch) noexcept nogil:
    cdef Py_ssize_t nbatch = table.shape[0], nvocab = table.shape[1]
    cdef Py_ssize_t b, v, bi
    cdef double best, val, total = 0.0
    for v in range(nvocab):
        scratch[v] = lam * logp[v]
    for b in range(nbatch):
        best = table[b, 0] + scratch[0]
        bi = 0
        for v in range(1, nvocab):
            val = table[b, v] + scratch[v]
            if val > best:
                best = val
                bi = v
        total += logp[bi]
    return total / nbatch


def softppl_objective(const double[:, ::1] table, const double[::1] logp, double lam):
    """Mean log-probability of the argmax(score + lam * logp) choice."""
    cdef Py_ssize_t nbatch = table.shape[0], nvocab = table.shape[1]
    if logp.shape[0] != nvocab:
        raise ValueError("logp length must match the score table width")
    if nbatch == 0 or nvocab == 0:
        raise ValueError("score table must be non-empty")
    tmp = np.empty(nvocab, dtype=np.float64)
    cdef double[::1] tv = tmp
    cdef double out
    with nogil:
        out = _objective(table, logp, lam, &tv[0])
    return out


def softppl_bisect(const double[:, ::1] table, const double[::1] logp,
                   double target, Py_ssize_t iterations, double hi):
    """Bisection on (0, hi) for the smallest lam with objective >= target."""
    cdef Py_ssize_t nbatch = table.shape[0], nvocab = table.shape[1]
    if logp.shape[0] != nvocab:
        raise ValueError("logp length must match the score table width")
    if nbatch == 0 or nvocab == 0:
        raise ValueError("score table must be non-empty")
    tmp = np.empty(nvocab, dtype=np.float64)
    cdef double[::1] tv = tmp
    cdef double lo = 0.0, mid
    cdef Py_ssize_t it
    with nogil:
        for it in range(iterations):
            mid = 0.5 * (lo + hi)
            if _objective(table, logp, mid, &tv[0]) >= target:
                hi = mid
            else:
                lo = mid
    return lo, hi
