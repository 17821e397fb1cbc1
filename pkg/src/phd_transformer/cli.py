"""Command line entry point: ``phd {train,eval,generate,bench,mask-dump,compare}``."""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import cost, engine
from .attnmask import Layout, MaskSpec, SpecError, build_mask, validate_spec, write_pgm, write_stats_csv, STATS_COLUMNS
from .checkpoint import CheckpointError, load_checkpoint
from .corpus import CorpusError, load_corpus, split_bytes, stdlib_corpus
from .model import ConfigError, ModelConfig, init_weights
from .train import METRICS_COLUMNS, RunConfig, evaluate, run_training

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

FOOTPRINT_COLUMNS = ("step", "token", "main_entries_per_layer", "hidden_entries_per_layer", "total_bytes")
CURVE_COLUMNS_HEAD = ("step",)
FINAL_COLUMNS = ("run", "variant", "K", "W", "C", "final_train_loss", "final_ema_loss", "final_val_loss")

CSV_HELP = f"""\
CSV schemas (fixed header, fixed column order):
  metrics.csv        {", ".join(METRICS_COLUMNS)}
  footprint CSV      {", ".join(FOOTPRINT_COLUMNS)}
  cost CSV           {", ".join(cost.COLUMNS)} [, measured_s]
  mask stats CSV     {", ".join(STATS_COLUMNS)}
  compare curves     step, <run name>... (EMA train loss per run)
  compare finals     {", ".join(FINAL_COLUMNS)}
An unbounded window or chunk is written as an empty cell and omitted from JSON.

Exit codes: 0 ok, 1 usage, 2 config invalid, 3 runtime failure.
PHD_THREADS caps BLAS threads and compare worker processes.
"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _threads() -> int | None:
    raw = os.environ.get("PHD_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"PHD_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("PHD_THREADS must be ≥ 1")
    return n


def _thread_limit():
    n = _threads()
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(n)


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(d: dict, pairs: list[str]) -> dict:
    """Apply ``dotted.key=value`` overrides to a nested config dict (values parsed as JSON)."""
    for pair in pairs:
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot set {key}: {p} is not a mapping")
        value = _parse_value(raw)
        if parts[-1] in ("C",) and value in (None, "inf", "∞"):
            node.pop("C", None)  # unbounded chunk is an absent field
        else:
            node[parts[-1]] = value
    return d


def load_run_config(args) -> RunConfig:
    d = RunConfig().to_dict()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        model = dict(d["model"])
        model.update(loaded.get("model", {}))
        if "mask" in loaded.get("model", {}):
            model["mask"] = loaded["model"]["mask"]
        d.update(loaded)
        d["model"] = model
    apply_overrides(d, list(getattr(args, "set", None) or []))
    if getattr(args, "mask", None):
        d["model"]["mask"] = _mask(args.mask).to_dict()
    for flag, field in (("steps", "steps"), ("seed", "seed"), ("out", "out_dir"), ("corpus", "corpus")):
        v = getattr(args, flag, None)
        if v is not None:
            d[field] = v
    try:
        rc = RunConfig.from_dict(d)
    except (TypeError, KeyError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    rc.validate()
    return rc


def _mask(name: str) -> MaskSpec:
    try:
        spec = MaskSpec.parse(name)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    validate_spec(spec)
    return spec


# --------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    rc = load_run_config(args)
    res = run_training(rc, log=lambda m: print(m, file=sys.stderr))
    print(f"final_ema_loss={res.final_ema!r} val_loss={res.val_loss!r} checkpoint={res.checkpoint_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    weights, _ = load_checkpoint(args.checkpoint)
    spec = _mask(args.mask) if args.mask else None
    if spec is not None:
        weights = weights.with_config(weights.config.with_mask(spec))
    seq_len = args.seq_len or min(128, weights.config.max_t)
    if args.corpus:
        corpus = load_corpus(args.corpus, args.val_fraction, seq_len)
    else:
        corpus = split_bytes(stdlib_corpus(args.corpus_bytes), args.val_fraction, seq_len)
    loss = evaluate(weights, corpus, seq_len, args.max_windows)
    print(f"val_loss={loss!r}")
    return EXIT_OK


def cmd_generate(args) -> int:
    weights, _ = load_checkpoint(args.checkpoint)
    spec = _mask(args.mask) if args.mask else None
    prompt = list(args.prompt.encode("utf-8"))
    if not prompt:
        raise UsageError("prompt must be non-empty")
    trace: list = []
    out = engine.generate(weights, prompt, args.n, args.mode, args.top_k, args.seed, spec, trace)
    if args.footprint_csv:
        with open(args.footprint_csv, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(FOOTPRINT_COLUMNS)
            for (step, fp), tok in zip(trace, out):
                w.writerow([step, tok, fp.main_entries_per_layer, fp.hidden_entries_per_layer, fp.total_bytes])
    sys.stdout.write(bytes(t for t in out if t < 256).decode("utf-8", errors="replace") + "\n")
    return EXIT_OK


def _bench_model(args) -> ModelConfig:
    if args.reference_550m:
        return cost.reference_550m()
    if args.config:
        ns = argparse.Namespace(config=args.config, set=args.set, mask=None)
        return load_run_config(ns).model
    return ModelConfig(n_layers=2, d_model=128, n_heads=4, n_kv_heads=2, d_ffn=256, max_t=1024)


def cmd_bench(args) -> int:
    cfg = _bench_model(args)
    specs = [_mask(m) for m in args.variants]
    t_grid = list(args.t)
    if not specs or not t_grid or min(t_grid) < 1:
        raise ConfigError("bench grid needs ≥1 variant and t values ≥ 1")
    if args.hw == "a100":
        hw = cost.A100
    elif args.hw == "laptop":
        hw = cost.LAPTOP
    else:
        if args.peak_flops is None or args.mem_bw is None:
            raise ConfigError("--hw custom needs --peak-flops and --mem-bw")
        hw = cost.HardwareModel(args.peak_flops, args.mem_bw, "custom")
    reports = cost.compare_variants(cfg, specs, t_grid, hw, args.dtype_bytes)
    extra = None
    if args.microbench:
        if max(t_grid) + args.microbench + 1 > cfg.max_t:
            raise ConfigError("microbench needs max_t ≥ t + reps + 1")
        weights = init_weights(cfg)
        measured = []
        for spec in specs:
            for t in t_grid:
                m = cost.microbench(weights, spec, t, args.microbench)
                measured += [m["prefill_s"], m["decode_s"]]
        extra = {"measured_s": measured}
    cost.write_cost_csv(reports, args.out, extra)
    print(f"wrote {len(reports)} rows to {args.out}")
    return EXIT_OK


def cmd_maskdump(args) -> int:
    spec = _mask(args.mask)
    if not 1 <= args.t <= 512:
        raise ConfigError("mask-dump requires 1 ≤ t ≤ 512")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{spec.name}-t{args.t}-{args.layout}"
    write_pgm(build_mask(spec, args.t, args.layout), out / f"{stem}.pgm")
    write_stats_csv(spec, args.t, args.layout, out / f"{stem}.csv")
    print(f"wrote {out / stem}.pgm and .csv")
    return EXIT_OK


def _comparable(configs: list[RunConfig]) -> None:
    def key(rc: RunConfig) -> dict:
        d = rc.to_dict()
        d.pop("out_dir")
        d["model"].pop("mask")
        return d
    base = key(configs[0])
    for rc in configs[1:]:
        if key(rc) != base:
            raise ConfigError("config sets not comparable: runs must differ only in their mask spec")


def _train_member(rc: RunConfig):
    res = run_training(rc)
    return res.final_loss, res.final_ema, res.val_loss, res.ema_trace


def cmd_compare(args) -> int:
    if args.masks:
        base = load_run_config(args)
        configs = [base.replace_mask(_mask(m)) for m in args.masks]
    else:
        configs = []
        for path in args.configs:
            ns = argparse.Namespace(config=path, set=args.set, steps=args.steps, seed=args.seed,
                                    out=None, corpus=args.corpus, mask=None)
            configs.append(load_run_config(ns))
    if len(configs) < 2:
        raise ConfigError("need ≥2 configs to compare")
    _comparable(configs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = [f"{i}_{rc.name}" for i, rc in enumerate(configs)]
    configs = [dataclasses.replace(rc, out_dir=str(out / n)) for rc, n in zip(configs, names)]
    jobs = max(1, min(args.jobs, _threads() or args.jobs, len(configs)))
    if jobs == 1:
        results = [_train_member(rc) for rc in configs]
    else:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_train_member, configs))

    steps = max(len(r[3]) for r in results)
    with open(out / "curves.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(list(CURVE_COLUMNS_HEAD) + names)
        for s in range(steps):
            w.writerow([s + 1] + [repr(r[3][s]) if s < len(r[3]) else "" for r in results])
    with open(out / "final_losses.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(FINAL_COLUMNS)
        for n, rc, r in zip(names, configs, results):
            spec = rc.model.mask
            w.writerow([n, spec.variant.value, spec.K, spec.W, "" if spec.C is None else spec.C,
                        repr(r[0]), repr(r[1]), repr(r[2])])
    for n, r in zip(names, results):
        print(f"{n}: final_ema_loss={r[1]:.4f} val_loss={r[2]:.4f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config (fields of RunConfig; model under 'model')")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config field, dotted for nesting, e.g. model.d_model=64")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--corpus", help="corpus file (default: built-in standard-library text)")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = _Parser(prog="phd", description=__doc__, epilog=CSV_HELP, formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one run", epilog=CSV_HELP, formatter_class=fmt)
    _add_run_flags(p)
    p.add_argument("--mask", help="mask spec name, e.g. PHD-SWA-3-16-inf")
    p.add_argument("--out", help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="validation loss of a checkpoint", epilog=CSV_HELP, formatter_class=fmt)
    p.add_argument("checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--corpus-bytes", type=int, default=1 << 20)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--max-windows", type=int)
    p.add_argument("--mask", help="evaluate under this mask spec instead of the stored one")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="decode from a checkpoint", epilog=CSV_HELP, formatter_class=fmt)
    p.add_argument("checkpoint")
    p.add_argument("--prompt", required=True)
    p.add_argument("-n", type=int, default=32)
    p.add_argument("--mode", choices=["greedy", "top-k"], default="greedy")
    p.add_argument("--top-k", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mask")
    p.add_argument("--footprint-csv", help="write one KV-footprint row per emitted token")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("bench", help="modeled cost table", epilog=CSV_HELP, formatter_class=fmt)
    _add_run_flags(p)
    p.add_argument("--reference-550m", action="store_true", help="cost the 550M reference shape")
    p.add_argument("--variants", nargs="+", default=["Vanilla-1", "PHD-3", "PHD-SWA-3-16-inf", "PHD-CSWA-3-16-32"])
    p.add_argument("--t", nargs="+", type=int, default=[128, 512])
    p.add_argument("--hw", choices=["a100", "laptop", "custom"], default="a100")
    p.add_argument("--peak-flops", type=float)
    p.add_argument("--mem-bw", type=float)
    p.add_argument("--dtype-bytes", type=int)
    p.add_argument("--microbench", type=int, default=0, metavar="REPS",
                   help="append a measured_s column (median of REPS, single thread)")
    p.add_argument("--out", default="cost.csv")
    p.set_defaults(func=cmd_bench, mask=None, out_dir=None)

    p = sub.add_parser("mask-dump", help="write a mask as PGM plus stats CSV", epilog=CSV_HELP,
                       formatter_class=fmt)
    p.add_argument("--mask", required=True)
    p.add_argument("--t", type=int, required=True)
    p.add_argument("--layout", choices=[l.value for l in Layout], default="interleaved")
    p.add_argument("--out", default="masks")
    p.set_defaults(func=cmd_maskdump)

    p = sub.add_parser("compare", help="train runs that differ only in mask spec", epilog=CSV_HELP,
                       formatter_class=fmt)
    p.add_argument("configs", nargs="*", help="run config files")
    _add_run_flags(p)
    p.add_argument("--masks", nargs="+", help="sweep these mask names over --config")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default="compare")
    p.set_defaults(func=cmd_compare, mask=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        print(f"phd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, SpecError, CorpusError, CheckpointError) as exc:
        print(f"phd: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - top-level runtime failure
        print(f"phd: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

