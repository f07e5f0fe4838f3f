"""Command-line entry point: ``dimreid <verb> [options]``.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import numerics as nx
from .datasets import save_dataset, synth_dataset
from .experiments import (
    ConfigParseError,
    ExperimentConfig,
    build_config,
    export_embeddings,
    load_config,
    objective_gradcheck,
    run_experiment,
    sweep,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _with_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    if getattr(args, "out", None):
        cfg = replace(cfg, output_dir=args.out)
    return cfg


def _config(args, default_mode: str | None = None) -> ExperimentConfig:
    if args.config:
        return _with_overrides(load_config(args.config), args)
    if default_mode is None:
        raise ConfigParseError("--config is required", None, "<args>")
    return _with_overrides(build_config({"mode": default_mode}), args)


def cmd_synth(args, log) -> int:
    cfg = _config(args, "global_dim")
    if isinstance(cfg.dataset, str):
        raise ConfigParseError("synth needs a dataset spec, not dataset.path", None, args.config)
    spec = cfg.dataset
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    out = Path(args.out or cfg.output_dir)
    path = out if out.suffix == ".csv" else out / "dataset.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    ds = synth_dataset(spec)
    digest = save_dataset(ds, path)
    log(f"wrote {path} ({len(ds)} samples, sha256 {digest[:12]}, difficulty {ds.difficulty:.4f})")
    return EXIT_OK


def cmd_run(args, log) -> int:
    cfg = _config(args)
    report = run_experiment(cfg, log=log)
    log(json.dumps({k: v for k, v in report.items() if k != "config"}, indent=2, sort_keys=True, default=str))
    return EXIT_OK


def cmd_bench(args, log) -> int:
    cfg = _config(args, "estimator_bench")
    if cfg.mode != "estimator_bench":
        cfg = replace(cfg, mode="estimator_bench")
    report = run_experiment(cfg, log=log)
    est = report["estimator"]
    log(f"estimate {est['final_estimate']:.5f} oracle {est['oracle']:.5f} gap {est['gap']:.5f}")
    return EXIT_NUMERIC if est["failed"] else EXIT_OK


def cmd_sweep(args, log) -> int:
    cfg = _config(args)
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise ConfigParseError(f"bad --values {args.values!r}", None, "<args>") from None
    rows = sweep(cfg, args.param, values, log=log)
    for r in rows:
        log(f"{args.param}={r[args.param]!r} rank1={r['rank1']:.4f} mAP={r['mAP']:.4f}")
    return EXIT_OK


def cmd_export(args, log) -> int:
    out = args.out or "embeddings.csv"
    n = export_embeddings(args.checkpoint, args.dataset, out)
    log(f"wrote {n} rows to {out}")
    return EXIT_OK


def cmd_gradcheck(args, log) -> int:
    seed = args.seed or 0
    worst = 0.0
    for arch in ("global", "part"):
        err = objective_gradcheck(arch, seed=seed, samples=args.samples)
        worst = max(worst, err)
        log(f"{arch}: max relative error {err:.3e}")
    return EXIT_OK if worst <= args.tolerance else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH")
    common.add_argument("--out", metavar="DIR")
    common.add_argument("--seed", type=int, metavar="N", help="overrides train.seed")
    common.add_argument("--quiet", action="store_true")

    parser = argparse.ArgumentParser(prog="dimreid", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic dataset file").set_defaults(fn=cmd_synth)
    sub.add_parser("run", parents=[common], help="run one experiment from a config").set_defaults(fn=cmd_run)
    p = sub.add_parser("sweep", parents=[common], help="sweep beta or lambda")
    p.add_argument("--param", choices=("beta", "lambda"), required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.set_defaults(fn=cmd_sweep)
    p = sub.add_parser("export", parents=[common], help="export eval-mode embeddings to CSV")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.set_defaults(fn=cmd_export)
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of both objectives")
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(fn=cmd_gradcheck)
    sub.add_parser("bench-estimator", parents=[common], help="estimator vs exact oracle").set_defaults(fn=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    log = (lambda *a, **k: None) if args.quiet else print
    try:
        return args.fn(args, log)
    except (nx.NumericError, nx.DomainError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        # config, dataset, checkpoint and shape errors are all ValueErrors
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
