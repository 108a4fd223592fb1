"""Command-line entry point."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import diagnostics
from .attention import count_flops
from .config import DEFAULT_SPARSITY, ExperimentConfig, budget_for_sparsity
from .errors import TileSparseError
from .experiments import run

EXPERIMENT_COMMANDS = ("gen", "oracle", "distill", "search", "eval")


def _config(args) -> ExperimentConfig:
    raw = {}
    if args.config:
        raw = ExperimentConfig.load(args.config).to_dict()
    raw["experiment"] = args.command
    if args.seed is not None:
        raw["seeds"] = [args.seed]
    if args.out:
        raw["out"] = args.out
    for key in ("checkpoint", "inputs"):
        if getattr(args, key, None):
            raw[key] = getattr(args, key)
    return ExperimentConfig.from_dict(raw)


def _run_experiment(args) -> int:
    cfg = _config(args)
    res = run(cfg)
    for name in sorted(res.files):
        print(f"wrote {res.files[name]}")
    if res.summary and cfg.experiment == "distill":
        print(json.dumps(res.summary["mean_final_loss"], sort_keys=True))
    return 0


def _bench_flops(args) -> int:
    n_tiles = args.n // args.b
    if n_tiles * args.b != args.n:
        raise TileSparseError(f"n={args.n} is not a multiple of b={args.b}")
    levels = args.sparsity or [0.0, 0.5, 0.75, *DEFAULT_SPARSITY]
    print(f"{'sparsity':>9} {'k':>5} {'full_flops':>14} {'sparse_flops':>14} {'ratio':>10}")
    for s in levels:
        k = budget_for_sparsity(s, n_tiles)
        rep = count_flops(args.n, args.d, n_tiles, k)
        print(f"{s:>9.4f} {k:>5d} {rep.full_flops:>14d} {rep.sparse_flops:>14d} {str(rep.ratio):>10}")
    return 0


def _diag(args) -> int:
    seed = args.seed if args.seed is not None else 0
    failed = False
    for res in diagnostics.run_all(args.cases, seed):
        status = "ok" if res.ok else "VIOLATED"
        print(f"{res.name:<20} cases={res.cases:<6d} violations={res.violations:<4d} {status}")
        failed |= not res.ok
    if failed:
        print("diagnostics found violations", file=sys.stderr)
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tilesparse", description="Tile-sparse attention experiments at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True
    for name in EXPERIMENT_COMMANDS:
        sp = sub.add_parser(name, help=f"run the {name} experiment")
        sp.add_argument("--config", help="experiment config JSON")
        sp.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
        sp.add_argument("--out", help="output directory (default: $TILESPARSE_OUT or ./tilesparse_out)")
        if name in ("oracle", "eval"):
            sp.add_argument("--checkpoint", help="estimator checkpoint file or distill output directory")
            sp.add_argument("--inputs", help="directory written by 'gen'")
        sp.set_defaults(func=_run_experiment)
    sp = sub.add_parser("bench-flops", help="FLOPs of full vs tile-sparse attention across sparsity levels")
    sp.add_argument("--n", type=int, default=2048)
    sp.add_argument("--d", type=int, default=32)
    sp.add_argument("--b", type=int, default=64)
    sp.add_argument("--sparsity", type=float, nargs="*")
    sp.set_defaults(func=_bench_flops)
    sp = sub.add_parser("diag", help="randomized sweeps of the estimator's statistical bounds")
    sp.add_argument("--cases", type=int, default=1000)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", help="unused; accepted for symmetry")
    sp.set_defaults(func=_diag)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (TileSparseError, OSError) as e:
        print(f"tilesparse {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
