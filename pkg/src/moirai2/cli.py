"""Command-line entry point: ``moirai2 {synth,mixup,train,forecast,eval,bench-kv}``.

Exit codes: 0 success, 1 usage error, 2 runtime error. Every run writes a
``<out>.manifest.json`` next to its output.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .datagen import KernelBank, MixupConfig, kernelsynth, tsmixup
from .datapipe import CorpusReport, load_corpus, resolve_path, write_corpus
from .decoding import bench_kv, forecast, forecast_record, write_forecasts
from .evaluation import aggregate, load_tasks, model_forecaster, run_eval, seasonal_naive_forecaster
from .model import Model, ModelConfig, load_checkpoint
from .training import OptimConfig, TrainFlags, train

logger = logging.getLogger("moirai2")

PROJECTIONS = {"linear": "linear", "residual": "residual_block"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser(defaults: dict | None = None, command: str | None = None) -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="moirai2", description="Desk-scale decoder-only quantile forecaster.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_help):
        p.add_argument("--seed", type=int, default=0, help="random seed")
        p.add_argument("--out", required=True, help=out_help)
        p.add_argument("--config", default=None, help="JSON file of flag defaults (flags override it)")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress")

    p = sub.add_parser("synth", help="generate a KernelSynth corpus", formatter_class=fmt)
    common(p, "output corpus (.ndjson)")
    p.add_argument("--n", type=int, default=10, help="number of series")
    p.add_argument("--len", type=int, default=1024, dest="length", help="series length")
    p.add_argument("--freq", default="H", help="frequency token stored with each series")
    p.add_argument("--max-compose", type=int, default=5, help="max kernels composed per series")

    p = sub.add_parser("mixup", help="generate TSMixup series from a corpus", formatter_class=fmt)
    common(p, "output corpus (.ndjson)")
    p.add_argument("--corpus", required=True, help="source corpus")
    p.add_argument("--n", type=int, default=10, help="number of mixed series")
    p.add_argument("--k-max", type=int, default=4, help="max series per mixture")
    p.add_argument("--len-min", type=int, default=128, help="min mixture length")
    p.add_argument("--len-max", type=int, default=4096, help="max mixture length")
    p.add_argument("--alpha", type=float, default=1.5, help="Dirichlet concentration")

    p = sub.add_parser("train", help="train a model", formatter_class=fmt)
    common(p, "checkpoint path")
    p.add_argument("--corpus", required=True, help="training corpus")
    p.add_argument("--steps", type=int, default=2000, help="optimizer steps")
    p.add_argument("--batch", type=int, default=32, help="batch size")
    p.add_argument("--warmup", type=int, default=None, help="warmup steps (default: 10%% of steps)")
    p.add_argument("--lr", type=float, default=1e-3, help="peak learning rate")
    p.add_argument("--weight-decay", type=float, default=0.1, help="AdamW weight decay")
    p.add_argument("--ctx-patches", type=int, default=48, help="training window in patches")
    p.add_argument("--mask-rate", type=float, default=0.5, help="fraction of input patches masked")
    p.add_argument("--multi-token", action=argparse.BooleanOptionalAction, default=True,
                   help="predict several future patches per position")
    p.add_argument("--projection", choices=sorted(PROJECTIONS), default="residual", help="output head")
    p.add_argument("--loss", choices=["quantile", "l1"], default="quantile", help="training objective")
    p.add_argument("--n-token", type=int, default=4, help="patches per position when multi-token")
    p.add_argument("--patch", type=int, default=16, help="patch size")
    p.add_argument("--d-model", type=int, default=64, help="embedding width")
    p.add_argument("--layers", type=int, default=2, help="transformer layers")
    p.add_argument("--heads", type=int, default=4, help="attention heads")
    p.add_argument("--d-ff", type=int, default=256, help="feed-forward width")
    p.add_argument("--ckpt-every", type=int, default=0, help="checkpoint interval in steps (0: end only)")
    p.add_argument("--log", default=None, help="metrics CSV (default: <out>.log.csv)")

    p = sub.add_parser("forecast", help="forecast every series in a file", formatter_class=fmt)
    common(p, "forecast file (.ndjson)")
    p.add_argument("--model", required=True, help="checkpoint")
    p.add_argument("--corpus", required=True, help="context series")
    p.add_argument("--horizon", type=int, default=64, help="forecast length")
    p.add_argument("--decode", choices=["direct", "arq"], default="arq", help="decoding strategy")
    p.add_argument("--no-cache", action="store_true", help="recompute the full context at every step")

    p = sub.add_parser("eval", help="score against seasonal naive", formatter_class=fmt)
    common(p, "report CSV")
    p.add_argument("--model", required=True, help="checkpoint, or 'seasonal-naive'")
    p.add_argument("--tasks", required=True, help="task file (records with a horizon field)")
    p.add_argument("--horizon", type=int, default=None, help="horizon for records without one")
    p.add_argument("--decode", choices=["direct", "arq"], default="arq", help="decoding strategy")

    p = sub.add_parser("bench-kv", help="time cached vs uncached decoding", formatter_class=fmt)
    common(p, "JSON result file")
    p.add_argument("--model", default=None, help="checkpoint (default: random default model)")
    p.add_argument("--context", type=int, default=2048, help="context length in values")
    p.add_argument("--horizon", type=int, nargs="+", default=[256], help="forecast lengths")
    p.add_argument("--repeats", type=int, default=3, help="timing repeats (best is kept)")

    if defaults and command in sub.choices:
        sub.choices[command].set_defaults(**defaults)
    return parser


def _load_config_defaults(argv: list[str]) -> tuple[dict, str | None]:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if not a.startswith("-")), None)
    if not known.config:
        return {}, command
    with open(known.config, encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise UsageError(f"config file {known.config} must hold a JSON object")
    return {k.replace("-", "_"): v for k, v in cfg.items()}, command


def _read_series(path):
    report = CorpusReport()
    series = list(load_corpus(path, report))
    if report.n_malformed:
        logger.warning("%s: skipped %d malformed records", path, report.n_malformed)
    return series


def _load_model(path) -> Model:
    return load_checkpoint(resolve_path(path))


def cmd_synth(args) -> dict:
    bank = KernelBank(max_compose=args.max_compose)
    rng = np.random.default_rng(args.seed)
    seeds = rng.integers(0, 2**63 - 1, size=args.n)
    series = []
    for i, s in enumerate(seeds):
        ser = kernelsynth(bank, args.length, int(s), args.freq)
        ser.id = f"synth-{args.seed}-{i}"
        series.append(ser)
    return {"n_written": write_corpus(args.out, series)}


def cmd_mixup(args) -> dict:
    pool = _read_series(args.corpus)
    cfg = MixupConfig(args.k_max, args.len_min, args.len_max, args.alpha)
    return {"n_written": write_corpus(args.out, (tsmixup(pool, cfg, args.seed, i) for i in range(args.n)))}


def cmd_train(args) -> dict:
    corpus = _read_series(args.corpus)
    model_cfg = ModelConfig(
        d_model=args.d_model, n_layers=args.layers, n_heads=args.heads, d_ff=args.d_ff,
        p_in=args.patch, p_out=args.patch, n_token=args.n_token,
    )
    warmup = args.warmup if args.warmup is not None else max(1, args.steps // 10)
    optim = OptimConfig(lr_peak=args.lr, weight_decay=args.weight_decay, warmup_steps=warmup,
                        total_steps=args.steps, batch_size=args.batch)
    flags = TrainFlags(mask_rate=args.mask_rate, multi_token=args.multi_token,
                       projection_kind=PROJECTIONS[args.projection],
                       loss="median_l1" if args.loss == "l1" else "quantile", ctx_patches=args.ctx_patches)
    log_path = args.log or f"{args.out}.log.csv"
    model, log = train(corpus, model_cfg, optim, flags, args.seed, log_path, args.out, args.ckpt_every)
    return {
        "model_config": model.config.to_dict(),
        "optim_config": dataclasses.asdict(optim),
        "flags": dataclasses.asdict(flags),
        "final_loss": log[-1]["loss"],
        "log": log_path,
    }


def cmd_forecast(args) -> dict:
    model = _load_model(args.model)
    records = []
    for s in _read_series(args.corpus):
        qf = forecast(s, model, args.horizon, args.decode, not args.no_cache)
        records.append(forecast_record(s.id, len(s), qf))
    write_forecasts(args.out, records)
    return {"n_forecasts": len(records)}


def cmd_eval(args) -> dict:
    tasks = load_tasks(args.tasks, args.horizon)
    if args.model == "seasonal-naive":
        forecaster = seasonal_naive_forecaster()
    else:
        forecaster = model_forecaster(_load_model(args.model), args.decode)
    skipped: list = []
    records = run_eval(forecaster, tasks, args.out, skipped=skipped)
    summary = {"n_tasks": len(tasks), "n_scored": len(records), "skipped": skipped}
    if records:
        summary |= aggregate(records)
    return summary


def cmd_bench_kv(args) -> dict:
    model = _load_model(args.model) if args.model else Model.init(ModelConfig(), args.seed)
    results = [bench_kv(args.context, h, model, args.seed, args.repeats) for h in args.horizon]
    Path(args.out).write_text(json.dumps(results, indent=2) + "\n")
    for r in results:
        print(f"context={r['context_len']} H={r['horizon']} cached={r['cached_ms']:.1f}ms "
              f"uncached={r['uncached_ms']:.1f}ms speedup={r['speedup']:.2f}x")
    return {"results": results}


COMMANDS = {
    "synth": cmd_synth,
    "mixup": cmd_mixup,
    "train": cmd_train,
    "forecast": cmd_forecast,
    "eval": cmd_eval,
    "bench-kv": cmd_bench_kv,
}


def write_manifest(args, result: dict, seconds: float) -> None:
    resolved = {k: v for k, v in vars(args).items() if k not in ("verbose",)}
    manifest = {
        "subcommand": args.command,
        "config": resolved,
        "seed": args.seed,
        "tool_version": __version__,
        "wall_clock_seconds": seconds,
        "result": result,
    }
    Path(f"{args.out}.manifest.json").write_text(json.dumps(manifest, indent=2, default=str) + "\n")


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        defaults, command = _load_config_defaults(argv)
        args = build_parser(defaults, command).parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError) as exc:
        print(f"moirai2: cannot read config: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    start = time.perf_counter()
    try:
        result = COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - top-level boundary maps failures to exit code 2
        logger.debug("command failed", exc_info=True)
        print(f"moirai2 {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    write_manifest(args, result, time.perf_counter() - start)
    return 0


if __name__ == "__main__":
    sys.exit(main())
