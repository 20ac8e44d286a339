"""Metrics and experiment sweeps.

Detection quality is summarized per record set as bit accuracy, exact
message accuracy, confidence-gated bit accuracy (a bit scores only when it
is both correct and individually significant), zero-bit true-positive rate,
and mean log-perplexity under the generating model. Trend claims are gated
with paired sign tests across shared seeds rather than raw mean
comparisons.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import spearmanr

from .attacks import AttackConfig, apply_attack
from .core import (
    LengthMismatchError,
    Message,
    ValidationError,
    WatermarkKey,
)
from .decoder import NullLambdaCache, analyze, binom_upper_tail
from .lm import EncoderConfig, SamplerConfig, ToyLM, generate, log_perplexity
from .schemes import SchemeConfig

DEFAULT_ALPHAS = (0.01, 0.05)


def bit_accuracy(truth: Message, decoded: Message) -> float:
    """Fraction of matching bits."""
    if len(truth) != len(decoded):
        raise LengthMismatchError(
            f"messages have lengths {len(truth)} and {len(decoded)}"
        )
    return float(np.mean(truth.as_array() == decoded.as_array()))


def message_accuracy(pairs: Iterable) -> float:
    """Fraction of (truth, decoded) pairs that match exactly."""
    pairs = list(pairs)
    if not pairs:
        raise ValidationError("need at least one record")
    return float(np.mean([t.bits == d.bits for t, d in pairs]))


def ba_at_fpr(outcomes: Iterable, alpha: float) -> float:
    """Confidence-gated bit accuracy.

    ``outcomes`` yields (truth, decoded, per_bit_pvalues) triples; every
    (record, bit) pair scores 1 iff the bit is correct and its p-value is
    strictly below alpha.
    """
    if not 0.0 < alpha < 1.0:
        raise ValidationError("alpha must lie in (0, 1)")
    hits = 0
    total = 0
    for truth, decoded, pvalues in outcomes:
        ta, da = truth.as_array(), decoded.as_array()
        pa = np.asarray(pvalues)
        hits += int(((ta == da) & (pa < alpha)).sum())
        total += len(truth)
    if total == 0:
        raise ValidationError("need at least one record")
    return hits / total


def tpr_at_fpr(zero_bit_pvalues: Sequence[float], alpha: float) -> float:
    """Fraction of records whose zero-bit p-value is below alpha."""
    if not 0.0 < alpha < 1.0:
        raise ValidationError("alpha must lie in (0, 1)")
    pvals = np.asarray(list(zero_bit_pvalues), dtype=np.float64)
    if pvals.size == 0:
        raise ValidationError("need at least one record")
    return float(np.mean(pvals < alpha))


def _wilson_interval(successes: int, n: int, z: float = 1.96) -> tuple:
    if n == 0:
        return 0.0, 1.0
    phat = successes / n
    denom = 1.0 + z * z / n
    center = (phat + z * z / (2 * n)) / denom
    half = z * np.sqrt(phat * (1 - phat) / n + z * z / (4 * n * n)) / denom
    return max(0.0, center - half), min(1.0, center + half)


def calibration_curve(null_pvalues: Sequence[float], alphas: Sequence[float]) -> list:
    """Empirical false-positive rate per nominal level, with 95% Wilson CIs.

    A record is flagged at level alpha when its p-value is <= alpha, so the
    top of the grid (alpha = 1) always flags everything. Returns rows of
    (alpha, empirical_fpr, ci_low, ci_high).
    """
    alphas = list(alphas)
    if alphas != sorted(alphas):
        raise ValidationError("alpha grid must be sorted ascending")
    pvals = np.asarray(list(null_pvalues), dtype=np.float64)
    if pvals.size < 100:
        raise ValidationError("need at least 100 null records")
    rows = []
    for alpha in alphas:
        flagged = int((pvals <= alpha).sum())
        fpr = flagged / pvals.size
        lo, hi = _wilson_interval(flagged, pvals.size)
        rows.append((float(alpha), fpr, lo, hi))
    return rows


def paired_sign_test(wins: int, losses: int) -> float:
    """One-sided exact sign test p-value for H1: wins are more likely.

    Ties are dropped by the caller; returns P[Binomial(wins+losses, 1/2)
    >= wins].
    """
    n = wins + losses
    if n == 0:
        return 1.0
    return min(1.0, binom_upper_tail(wins, n))


def sign_test_from_diffs(diffs: Sequence[float]) -> tuple:
    """(wins, losses, one-sided p) for H1: the differences are positive."""
    arr = np.asarray(list(diffs), dtype=np.float64)
    wins = int((arr > 0).sum())
    losses = int((arr < 0).sum())
    return wins, losses, paired_sign_test(wins, losses)


def spearman_trend(x: Sequence[float], y: Sequence[float]) -> tuple:
    """(rho, one-sided p) for H1: y increases with x."""
    rho, p_two = spearmanr(x, y)
    p_one = p_two / 2 if rho > 0 else 1.0 - p_two / 2
    return float(rho), float(p_one)


@dataclass(frozen=True)
class CellSpec:
    """One sweep cell: a full run configuration plus its sample budget."""

    key_hex: str
    m: int
    scheme: dict
    encoder: dict
    lm: dict
    sampler: dict
    n_samples: int
    n_tokens: int | None = None
    attack: dict | None = None
    context_window: int = 3
    alphas: tuple = DEFAULT_ALPHAS
    seed: int = 0
    mc_samples: int = 20_000

    def fingerprint(self) -> str:
        blob = json.dumps(
            {
                "m": self.m,
                "scheme": self.scheme,
                "encoder": self.encoder,
                "lm": self.lm,
                "sampler": self.sampler,
                "n_samples": self.n_samples,
                "n_tokens": self.n_tokens,
                "attack": self.attack,
                "context_window": self.context_window,
                "seed": self.seed,
            },
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def to_json_dict(self) -> dict:
        return {
            "key_hex": self.key_hex,
            "m": self.m,
            "scheme": dict(self.scheme),
            "encoder": dict(self.encoder),
            "lm": dict(self.lm),
            "sampler": dict(self.sampler),
            "n_samples": self.n_samples,
            "n_tokens": self.n_tokens,
            "attack": dict(self.attack) if self.attack else None,
            "context_window": self.context_window,
            "alphas": list(self.alphas),
            "seed": self.seed,
            "mc_samples": self.mc_samples,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "CellSpec":
        data = dict(data)
        data["alphas"] = tuple(data.get("alphas", DEFAULT_ALPHAS))
        return cls(**data)


@dataclass(frozen=True)
class MetricRow:
    """One sweep cell's aggregated metrics."""

    fingerprint: str
    kind: str  # "watermarked" or "null"
    n_samples: int
    scheme: str
    scheme_param: float | None
    m: int
    n_tokens: int | None
    encoder: str
    segments: int
    attack: str | None
    attack_fraction: float | None
    bit_accuracy: float | None = None
    message_accuracy: float | None = None
    ba_at_fpr: dict = field(default_factory=dict)
    tpr_at_fpr: dict = field(default_factory=dict)
    mean_log_perplexity: float | None = None
    error: str | None = None

    @staticmethod
    def csv_columns(alphas: Sequence[float]) -> list:
        cols = [
            "fingerprint",
            "kind",
            "n_samples",
            "scheme",
            "scheme_param",
            "m",
            "n_tokens",
            "encoder",
            "segments",
            "attack",
            "attack_fraction",
            "bit_accuracy",
            "message_accuracy",
        ]
        cols += [f"ba_at_{a:g}" for a in alphas]
        cols += [f"tpr_at_{a:g}" for a in alphas]
        cols += ["mean_log_perplexity", "error"]
        return cols

    def csv_values(self, alphas: Sequence[float]) -> list:
        def fmt(x):
            return "" if x is None else x

        vals = [
            self.fingerprint,
            self.kind,
            self.n_samples,
            self.scheme,
            fmt(self.scheme_param),
            self.m,
            fmt(self.n_tokens),
            self.encoder,
            self.segments,
            fmt(self.attack),
            fmt(self.attack_fraction),
            fmt(self.bit_accuracy),
            fmt(self.message_accuracy),
        ]
        vals += [fmt(self.ba_at_fpr.get(a)) for a in alphas]
        vals += [fmt(self.tpr_at_fpr.get(a)) for a in alphas]
        vals += [fmt(self.mean_log_perplexity), fmt(self.error)]
        return vals


def record_seed(master_seed: int, cell_index: int, record_index: int) -> int:
    """Stable 64-bit per-record seed, independent of execution order."""
    ss = np.random.SeedSequence((master_seed, cell_index, record_index))
    return int(ss.generate_state(2, np.uint64)[0])


def _scheme_param(scheme: dict) -> float | None:
    for name in ("delta", "epsilon", "lam", "n_layer"):
        if name in scheme:
            return float(scheme[name])
    return None


def run_cell(spec: CellSpec, cell_index: int = 0) -> MetricRow:
    """Generate, optionally attack, and decode one cell's records."""
    key = WatermarkKey.from_hex(spec.key_hex, spec.context_window)
    scheme = SchemeConfig.from_json_dict(spec.scheme)
    encoder = EncoderConfig.from_json_dict(spec.encoder)
    lm = ToyLM.from_json_dict(spec.lm)
    sampler = SamplerConfig.from_json_dict(spec.sampler)
    attack = AttackConfig.from_json_dict(spec.attack) if spec.attack else None
    allocation = encoder.allocation()
    synthid_layers = scheme.n_layer if scheme.variant == "synthid" else None
    null_cache = NullLambdaCache(seed=spec.seed, mc_samples=spec.mc_samples)

    outcomes = []
    zero_pvals = []
    log_ppls = []
    pairs = []
    for r in range(spec.n_samples):
        rseed = record_seed(spec.seed, cell_index, r)
        msg_rng = np.random.default_rng(np.random.SeedSequence((rseed, 0x4D)))
        message = Message.random(spec.m, msg_rng)
        record = generate(
            lm,
            key,
            message,
            scheme,
            encoder=encoder,
            sampler=sampler,
            n_tokens=spec.n_tokens,
            seed=rseed,
        )
        if attack is not None and attack.fraction > 0:
            record = apply_attack(
                record, AttackConfig(attack.kind, attack.fraction, seed=rseed)
            )
        seq = record.sequence()
        tie_rng = np.random.default_rng(np.random.SeedSequence((rseed, 0x7E)))
        report = analyze(
            seq,
            key,
            spec.m,
            tie_rng,
            allocation=allocation,
            synthid_layers=synthid_layers,
            null_cache=null_cache,
        )
        outcomes.append((message, report.decoded, report.per_bit_pvalues))
        zero_pvals.append(report.zero_bit_pvalue)
        pairs.append((message, report.decoded))
        log_ppls.append(log_perplexity(lm, seq))

    bit_acc = float(np.mean([bit_accuracy(t, d) for t, d in pairs]))
    return MetricRow(
        fingerprint=spec.fingerprint(),
        kind="null" if scheme.variant == "none" else "watermarked",
        n_samples=spec.n_samples,
        scheme=scheme.variant,
        scheme_param=_scheme_param(spec.scheme),
        m=spec.m,
        n_tokens=spec.n_tokens,
        encoder=encoder.mode,
        segments=encoder.segments,
        attack=attack.kind if attack else None,
        attack_fraction=attack.fraction if attack else None,
        bit_accuracy=bit_acc,
        message_accuracy=message_accuracy(pairs),
        ba_at_fpr={a: ba_at_fpr(outcomes, a) for a in spec.alphas},
        tpr_at_fpr={a: tpr_at_fpr(zero_pvals, a) for a in spec.alphas},
        mean_log_perplexity=float(np.mean(log_ppls)),
    )


def _run_cell_safe(args: tuple) -> MetricRow:
    spec_dict, cell_index = args
    spec = CellSpec.from_json_dict(spec_dict)
    try:
        return run_cell(spec, cell_index)
    except Exception as exc:  # per-cell failures recorded, sweep continues
        traceback.print_exc()
        return MetricRow(
            fingerprint=spec.fingerprint(),
            kind="error",
            n_samples=spec.n_samples,
            scheme=spec.scheme.get("variant", "?"),
            scheme_param=_scheme_param(spec.scheme),
            m=spec.m,
            n_tokens=spec.n_tokens,
            encoder=spec.encoder.get("mode", "?"),
            segments=spec.encoder.get("segments", 1),
            attack=(spec.attack or {}).get("kind"),
            attack_fraction=(spec.attack or {}).get("fraction"),
            error=f"{type(exc).__name__}: {exc}",
        )


# Axis expansion order is fixed so cell indices (and hence seeds) are
# reproducible regardless of dict insertion order.
SWEEP_AXES = ("scheme", "encoder", "m", "n_tokens", "attack")


def expand_grid(base: CellSpec, axes: dict) -> list:
    """Cartesian product of axis values over a base cell, in a fixed order."""
    unknown = set(axes) - set(SWEEP_AXES)
    if unknown:
        raise ValidationError(f"unknown sweep axes: {sorted(unknown)}")
    names = [a for a in SWEEP_AXES if a in axes]
    if not all(axes[a] for a in names):
        raise ValidationError("sweep axes must be non-empty")
    cells = []
    for combo in itertools.product(*(axes[a] for a in names)):
        overrides = dict(zip(names, combo))
        cells.append(
            CellSpec.from_json_dict({**base.to_json_dict(), **overrides})
        )
    return cells


def run_sweep(base: CellSpec, axes: dict, jobs: int = 1, on_row=None) -> list:
    """Run every cell of a grid; failures become error rows.

    Rows come back in cell order and are reproducible bit-for-bit from
    (grid, master seed) regardless of the parallelism level. ``on_row`` is
    called with each finished row, in order, for incremental writing.
    """
    cells = expand_grid(base, axes) if axes else [base]
    tasks = [(cell.to_json_dict(), idx) for idx, cell in enumerate(cells)]
    rows = []
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for row in pool.map(_run_cell_safe, tasks):
                rows.append(row)
                if on_row:
                    on_row(row)
    else:
        for task in tasks:
            row = _run_cell_safe(task)
            rows.append(row)
            if on_row:
                on_row(row)
    return rows
