"""Command-line toolkit: generate, decode, detect, attack, eval, calibrate.

Runs are driven by a JSON config file with strict validation; command-line
flags override config values. Exit codes: 0 success, 1 runtime failure,
2 usage or config error. Key material is accepted as 64 hex characters or
a path to a file containing them, and is never echoed.
"""

from __future__ import annotations

import json
import os
import sys
from dataclasses import dataclass

import click
import numpy as np

from .attacks import AttackConfig, apply_attack
from .core import (
    BinomarkError,
    GenerationRecord,
    Message,
    TokenSequence,
    ValidationError,
    Vocabulary,
    WatermarkKey,
)
from .decoder import NullLambdaCache, analyze
from .evaluation import (
    DEFAULT_ALPHAS,
    CellSpec,
    MetricRow,
    ba_at_fpr,
    bit_accuracy,
    calibration_curve,
    message_accuracy,
    record_seed,
    run_sweep,
    tpr_at_fpr,
)
from .jsonio import read_jsonl, write_csv, write_jsonl
from .lm import EncoderConfig, SamplerConfig, ToyLM, generate, log_perplexity
from .schemes import SchemeConfig

EXIT_RUNTIME = 1
EXIT_USAGE = 2

_CONFIG_FIELDS = {
    "key",
    "context_window",
    "m",
    "scheme",
    "encoder",
    "sampler",
    "lm",
    "n_tokens",
    "seed",
    "mc_samples",
    "alphas",
}


class ConfigError(BinomarkError):
    """Bad or missing run configuration."""


def _load_key_material(value: str) -> str:
    if os.path.exists(value):
        with open(value) as fp:
            value = fp.read().strip()
    if len(value) != 64:
        raise ConfigError("field 'key': expected 64 hex characters or a key file")
    try:
        bytes.fromhex(value)
    except ValueError:
        raise ConfigError("field 'key': not valid hexadecimal") from None
    return value.lower()


@dataclass(frozen=True)
class RunConfig:
    """Validated run configuration shared by the subcommands."""

    key_hex: str
    context_window: int
    m: int
    scheme: SchemeConfig
    encoder: EncoderConfig
    sampler: SamplerConfig
    lm: ToyLM
    n_tokens: int | None
    seed: int
    mc_samples: int
    alphas: tuple

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        unknown = set(data) - _CONFIG_FIELDS
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        if "key" not in data:
            raise ConfigError("missing required config field: key")
        if "m" not in data:
            raise ConfigError("missing required config field: m")
        try:
            return cls(
                key_hex=_load_key_material(str(data["key"])),
                context_window=int(data.get("context_window", 3)),
                m=int(data["m"]),
                scheme=SchemeConfig.from_json_dict(
                    data.get("scheme", {"variant": "red_green", "delta": 2.0})
                ),
                encoder=EncoderConfig.from_json_dict(
                    data.get("encoder", {"mode": "stateless"})
                ),
                sampler=SamplerConfig.from_json_dict(
                    data.get("sampler", SamplerConfig().to_json_dict())
                ),
                lm=ToyLM.from_json_dict(
                    data.get("lm", {"variant": "markov1", "vocab_size": 1024,
                                    "alpha": 0.3, "seed": 0})
                ),
                n_tokens=(int(data["n_tokens"]) if data.get("n_tokens") else None),
                seed=int(data.get("seed", 0)),
                mc_samples=int(data.get("mc_samples", 20_000)),
                alphas=tuple(data.get("alphas", DEFAULT_ALPHAS)),
            )
        except ConfigError:
            raise
        except (BinomarkError, TypeError, KeyError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    def key(self) -> WatermarkKey:
        return WatermarkKey.from_hex(self.key_hex, self.context_window)


def _read_config(path: str | None, overrides: dict) -> RunConfig:
    data = {}
    if path:
        try:
            with open(path) as fp:
                data = json.load(fp)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    data.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_dict(data)


def _fail(exc: Exception, code: int) -> None:
    click.echo(f"error: {exc}", err=True)
    sys.exit(code)


def _progress(i: int, total: int, label: str) -> None:
    if total >= 10 and (i + 1) % max(1, total // 10) == 0:
        click.echo(f"{label}: {i + 1}/{total}", err=True)


@click.group()
def main():
    """Binomial multibit watermarking toolkit."""


_config_opt = click.option("--config", "config_path", type=click.Path(), default=None,
                           help="JSON run config; flags override its values.")
_key_opt = click.option("--key", default=None,
                        help="64 hex chars or a path to a key file.")
_seed_opt = click.option("--seed", type=int, default=None, help="Master seed override.")
_out_opt = click.option("--out", "out_path", type=click.Path(), default=None,
                        help="Output file (default: stdout).")


def _open_out(path: str | None):
    return open(path, "w") if path else sys.stdout


@main.command("generate")
@_config_opt
@_key_opt
@_seed_opt
@_out_opt
@click.option("--count", type=int, default=1, show_default=True,
              help="Number of records to generate.")
@click.option("--m", "m_override", type=int, default=None, help="Payload bits.")
@click.option("--n-tokens", type=int, default=None, help="Completion length.")
def cmd_generate(config_path, key, seed, out_path, count, m_override, n_tokens):
    """Generate watermarked records as JSONL."""
    try:
        cfg = _read_config(config_path, {"key": key, "seed": seed,
                                         "m": m_override, "n_tokens": n_tokens})
        if count < 0:
            raise ConfigError("--count must be >= 0")
    except (ConfigError, BinomarkError) as exc:
        _fail(exc, EXIT_USAGE)
    try:
        wkey = cfg.key()

        def _records():
            for r in range(count):
                rseed = record_seed(cfg.seed, 0, r)
                msg_rng = np.random.default_rng(np.random.SeedSequence((rseed, 0x4D)))
                message = Message.random(cfg.m, msg_rng)
                record = generate(
                    cfg.lm, wkey, message, cfg.scheme, encoder=cfg.encoder,
                    sampler=cfg.sampler, n_tokens=cfg.n_tokens, seed=rseed,
                )
                _progress(r, count, "generate")
                yield record.to_json_dict()

        with _open_out(out_path) as fp:
            write_jsonl(fp, _records(), kind="records")
    except BinomarkError as exc:
        _fail(exc, EXIT_RUNTIME)


def _decode_one(cfg: RunConfig, wkey: WatermarkKey, obj: dict,
                cache: NullLambdaCache) -> dict:
    record = GenerationRecord.from_json_dict(obj)
    scheme = SchemeConfig.from_json_dict(record.scheme)
    encoder = EncoderConfig.from_json_dict(record.encoder)
    m = len(record.message)
    rseed = record.seed if record.seed is not None else cfg.seed
    tie_rng = np.random.default_rng(np.random.SeedSequence((rseed, 0x7E)))
    report = analyze(
        record.sequence(), wkey, m, tie_rng,
        allocation=encoder.allocation(),
        synthid_layers=scheme.n_layer if scheme.variant == "synthid" else None,
        null_cache=cache,
    )
    out = report.to_json_dict()
    out["message_hex"] = record.message.to_hex()
    out["bit_accuracy"] = bit_accuracy(record.message, report.decoded)
    return out


@main.command("decode")
@_config_opt
@_key_opt
@_seed_opt
@_out_opt
@click.option("--in", "in_path", type=click.Path(exists=True), required=True,
              help="Input records JSONL, or a raw token file with --raw.")
@click.option("--raw", is_flag=True, help="Input is whitespace-separated token ids.")
@click.option("--m", "m_override", type=int, default=None, help="Payload bits.")
@click.option("--vocab-size", type=int, default=None,
              help="Vocabulary size (raw mode).")
def cmd_decode(config_path, key, seed, out_path, in_path, raw, m_override, vocab_size):
    """Decode records (or raw tokens) into detection reports."""
    try:
        cfg = _read_config(config_path, {"key": key, "seed": seed, "m": m_override})
    except (ConfigError, BinomarkError) as exc:
        _fail(exc, EXIT_USAGE)
    wkey = cfg.key()
    cache = NullLambdaCache(seed=cfg.seed, mc_samples=cfg.mc_samples)
    outputs = []
    failures = 0
    total = 0
    if raw:
        vocab = Vocabulary(vocab_size or cfg.lm.vocab.size)
        with open(in_path) as fp:
            tokens = [int(x) for x in fp.read().split()]
        total = 1
        if tokens:
            seq = TokenSequence(tokens=tuple(tokens), vocab=vocab)
            tie_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x7E)))
            report = analyze(seq, wkey, cfg.m, tie_rng, null_cache=cache)
            outputs.append(report.to_json_dict())
        else:
            total = 0
    else:
        with open(in_path) as fp:
            for lineno, obj in read_jsonl(fp):
                total += 1
                if obj is None:
                    failures += 1
                    outputs.append({"line": lineno, "error": "unparseable line"})
                    continue
                try:
                    outputs.append(_decode_one(cfg, wkey, obj, cache))
                except (BinomarkError, KeyError) as exc:
                    failures += 1
                    outputs.append({"line": lineno,
                                    "error": f"{type(exc).__name__}: {exc}"})
    with _open_out(out_path) as fp:
        write_jsonl(fp, iter(outputs), kind="reports")
    if total > 0 and failures == total:
        _fail(BinomarkError("all input lines failed to decode"), EXIT_RUNTIME)


@main.command("detect")
@_config_opt
@_key_opt
@_seed_opt
@_out_opt
@click.option("--in", "in_path", type=click.Path(exists=True), required=True)
def cmd_detect(config_path, key, seed, out_path, in_path):
    """Zero-bit view of decode: was this text watermarked at all?"""
    try:
        cfg = _read_config(config_path, {"key": key, "seed": seed})
    except (ConfigError, BinomarkError) as exc:
        _fail(exc, EXIT_USAGE)
    wkey = cfg.key()
    cache = NullLambdaCache(seed=cfg.seed, mc_samples=cfg.mc_samples)
    outputs = []
    failures = 0
    total = 0
    with open(in_path) as fp:
        for lineno, obj in read_jsonl(fp):
            total += 1
            if obj is None:
                failures += 1
                outputs.append({"line": lineno, "error": "unparseable line"})
                continue
            try:
                full = _decode_one(cfg, wkey, obj, cache)
                outputs.append({
                    "schema_version": full["schema_version"],
                    "effective_length": full["effective_length"],
                    "zero_bit_statistic": full["zero_bit_statistic"],
                    "zero_bit_pvalue": full["zero_bit_pvalue"],
                })
            except (BinomarkError, KeyError) as exc:
                failures += 1
                outputs.append({"line": lineno,
                                "error": f"{type(exc).__name__}: {exc}"})
    with _open_out(out_path) as fp:
        write_jsonl(fp, iter(outputs), kind="detections")
    if total > 0 and failures == total:
        _fail(BinomarkError("all input lines failed to decode"), EXIT_RUNTIME)


@main.command("attack")
@_out_opt
@click.option("--in", "in_path", type=click.Path(exists=True), required=True)
@click.option("--kind", type=click.Choice(["delete", "substitute"]), required=True)
@click.option("--fraction", type=float, required=True)
@click.option("--seed", type=int, default=0, show_default=True)
def cmd_attack(out_path, in_path, kind, fraction, seed):
    """Perturb record completions; attacked records re-serialize as records."""
    try:
        cfg = AttackConfig(kind=kind, fraction=fraction, seed=seed)
    except BinomarkError as exc:
        _fail(exc, EXIT_USAGE)
    outputs = []
    try:
        with open(in_path) as fp:
            for lineno, obj in read_jsonl(fp):
                if obj is None:
                    continue
                record = GenerationRecord.from_json_dict(obj)
                rseed = record.seed if record.seed is not None else seed
                attacked = apply_attack(
                    record, AttackConfig(kind=kind, fraction=fraction, seed=rseed)
                )
                outputs.append(attacked.to_json_dict())
        with _open_out(out_path) as fp:
            write_jsonl(fp, iter(outputs), kind="records")
    except BinomarkError as exc:
        _fail(exc, EXIT_RUNTIME)


@main.command("eval")
@_config_opt
@_key_opt
@_seed_opt
@_out_opt
@click.option("--in", "in_path", type=click.Path(exists=True), default=None,
              help="Evaluate existing records instead of running a sweep.")
@click.option("--sweep", "sweep_path", type=click.Path(exists=True), default=None,
              help="JSON sweep spec: {base: config, axes: {...}, n_samples: N}.")
@click.option("--jobs", type=int, default=None,
              help="Parallel sweep workers (default: all cores).")
def cmd_eval(config_path, key, seed, out_path, in_path, sweep_path, jobs):
    """Compute metric rows from records, or run a config sweep."""
    if (in_path is None) == (sweep_path is None):
        _fail(ConfigError("pass exactly one of --in or --sweep"), EXIT_USAGE)
    if sweep_path:
        _eval_sweep(config_path, key, seed, out_path, sweep_path, jobs)
    else:
        _eval_records(config_path, key, seed, out_path, in_path)


def _eval_sweep(config_path, key, seed, out_path, sweep_path, jobs):
    try:
        with open(sweep_path) as fp:
            sweep = json.load(fp)
        unknown = set(sweep) - {"base", "axes", "n_samples"}
        if unknown:
            raise ConfigError(f"unknown sweep fields: {sorted(unknown)}")
        base_cfg = _read_config(None, {**sweep.get("base", {}),
                                       **({"key": key} if key else {}),
                                       **({"seed": seed} if seed is not None else {})})
        base = CellSpec(
            key_hex=base_cfg.key_hex,
            m=base_cfg.m,
            scheme=base_cfg.scheme.to_json_dict(),
            encoder=base_cfg.encoder.to_json_dict(),
            lm=base_cfg.lm.to_json_dict(),
            sampler=base_cfg.sampler.to_json_dict(),
            n_samples=int(sweep.get("n_samples", 50)),
            n_tokens=base_cfg.n_tokens,
            context_window=base_cfg.context_window,
            alphas=base_cfg.alphas,
            seed=base_cfg.seed,
            mc_samples=base_cfg.mc_samples,
        )
        axes = sweep.get("axes", {})
    except (ConfigError, BinomarkError, json.JSONDecodeError) as exc:
        _fail(exc, EXIT_USAGE)
    try:
        jobs = jobs if jobs is not None else (os.cpu_count() or 1)
        rows = run_sweep(base, axes, jobs=jobs)
        columns = MetricRow.csv_columns(base.alphas)
        with _open_out(out_path) as fp:
            write_csv(fp, columns, (r.csv_values(base.alphas) for r in rows))
    except BinomarkError as exc:
        _fail(exc, EXIT_RUNTIME)


def _eval_records(config_path, key, seed, out_path, in_path):
    try:
        cfg = _read_config(config_path, {"key": key, "seed": seed})
    except (ConfigError, BinomarkError) as exc:
        _fail(exc, EXIT_USAGE)
    try:
        wkey = cfg.key()
        cache = NullLambdaCache(seed=cfg.seed, mc_samples=cfg.mc_samples)
        groups: dict = {}
        with open(in_path) as fp:
            for _, obj in read_jsonl(fp):
                if obj is None:
                    continue
                record = GenerationRecord.from_json_dict(obj)
                decoded = _decode_one(cfg, wkey, obj, cache)
                gkey = json.dumps(
                    {"scheme": record.scheme, "encoder": record.encoder,
                     "attack": record.attack, "m": len(record.message)},
                    sort_keys=True,
                )
                groups.setdefault(gkey, []).append((record, decoded))
        rows = []
        lm = cfg.lm
        for gkey, items in sorted(groups.items()):
            meta = json.loads(gkey)
            truths = [r.message for r, _ in items]
            decodeds = [Message.from_hex(d["decoded_hex"], d["decoded_bits"])
                        for _, d in items]
            outcomes = [(t, d, items[i][1]["per_bit_pvalues"])
                        for i, (t, d) in enumerate(zip(truths, decodeds))]
            zero_ps = [d["zero_bit_pvalue"] for _, d in items]
            ppls = [log_perplexity(lm, r.sequence()) for r, _ in items]
            variant = meta["scheme"].get("variant", "?")
            attack = meta.get("attack") or {}
            rows.append(MetricRow(
                fingerprint=hash_fingerprint(gkey),
                kind="null" if variant == "none" else "watermarked",
                n_samples=len(items),
                scheme=variant,
                scheme_param=_first_param(meta["scheme"]),
                m=meta["m"],
                n_tokens=None,
                encoder=meta["encoder"].get("mode", "?"),
                segments=meta["encoder"].get("segments", 1),
                attack=attack.get("kind"),
                attack_fraction=attack.get("fraction"),
                bit_accuracy=float(np.mean([bit_accuracy(t, d)
                                            for t, d in zip(truths, decodeds)])),
                message_accuracy=message_accuracy(zip(truths, decodeds)),
                ba_at_fpr={a: ba_at_fpr(outcomes, a) for a in cfg.alphas},
                tpr_at_fpr={a: tpr_at_fpr(zero_ps, a) for a in cfg.alphas},
                mean_log_perplexity=float(np.mean(ppls)),
            ))
        columns = MetricRow.csv_columns(cfg.alphas)
        with _open_out(out_path) as fp:
            write_csv(fp, columns, (r.csv_values(cfg.alphas) for r in rows))
    except BinomarkError as exc:
        _fail(exc, EXIT_RUNTIME)


def hash_fingerprint(blob: str) -> str:
    import hashlib

    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _first_param(scheme: dict):
    for name in ("delta", "epsilon", "lam", "n_layer"):
        if name in scheme:
            return float(scheme[name])
    return None


@main.command("calibrate")
@_config_opt
@_key_opt
@_seed_opt
@_out_opt
@click.option("--n", "n_null", type=int, default=1000, show_default=True,
              help="Number of null sequences (>= 100).")
@click.option("--tokens", type=int, default=200, show_default=True)
@click.option("--alpha-grid", default="0.001,0.01,0.05,0.1,0.5,1.0",
              show_default=True, help="Comma-separated ascending levels.")
@click.option("--detector", type=click.Choice(["per-bit", "zero-bit"]),
              default="zero-bit", show_default=True)
@click.option("--null-source", type=click.Choice(["lm", "uniform"]),
              default="lm", show_default=True)
def cmd_calibrate(config_path, key, seed, out_path, n_null, tokens, alpha_grid,
                  detector, null_source):
    """Empirical FPR of a detector on unwatermarked text, per nominal level."""
    try:
        cfg = _read_config(config_path, {"key": key, "seed": seed})
        if n_null < 100:
            raise ConfigError("--n must be >= 100 for a meaningful curve")
        alphas = sorted(float(a) for a in alpha_grid.split(","))
    except (ConfigError, BinomarkError, ValueError) as exc:
        _fail(exc, EXIT_USAGE)
    try:
        wkey = cfg.key()
        cache = NullLambdaCache(seed=cfg.seed, mc_samples=cfg.mc_samples)
        lm = cfg.lm if null_source == "lm" else ToyLM.uniform(cfg.lm.vocab.size)
        pvals = []
        for r in range(n_null):
            rseed = record_seed(cfg.seed, 0xCA1, r)
            msg_rng = np.random.default_rng(np.random.SeedSequence((rseed, 0x4D)))
            record = generate(
                lm, wkey, Message.random(cfg.m, msg_rng), SchemeConfig.none(),
                sampler=cfg.sampler, n_tokens=tokens, seed=rseed,
            )
            tie_rng = np.random.default_rng(np.random.SeedSequence((rseed, 0x7E)))
            report = analyze(record.sequence(), wkey, cfg.m, tie_rng,
                             null_cache=cache)
            if detector == "zero-bit":
                pvals.append(report.zero_bit_pvalue)
            else:
                pvals.extend(report.per_bit_pvalues)
            _progress(r, n_null, "calibrate")
        rows = calibration_curve(pvals, alphas)
        with _open_out(out_path) as fp:
            write_csv(fp, ["alpha", "empirical_fpr", "ci_low", "ci_high"],
                      ([f"{a:g}", f"{f:.6f}", f"{lo:.6f}", f"{hi:.6f}"]
                       for a, f, lo, hi in rows))
    except BinomarkError as exc:
        _fail(exc, EXIT_RUNTIME)


if __name__ == "__main__":
    main()
