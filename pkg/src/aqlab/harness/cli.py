"""Command line entry point.

    aqlab run CONFIG [--out DIR] [--workers N] [--seed MASTER]
    aqlab aggregate DIR
    aqlab plotdata DIR --series q_s0_a0,episode_return [--cells a,b] [--aggregate] [--out FILE]
    aqlab oracle expectile --tau 0.9 VALUE [VALUE ...]
    aqlab oracle valueiter [--mdp FILE | --r1 ... --discount ...]

Exit status: 0 success, 1 invalid input, 2 one or more runs failed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from ..expectile import sample_expectile
from ..mdp import ChainMdpParams, ConvergenceError, build_chain_mdp, load_mdp, value_iteration
from .config import ConfigError, load_config
from .sweep import aggregate, emit_plot_data, run_sweep

EXIT_OK, EXIT_INVALID, EXIT_RUN_FAILED = 0, 1, 2


def _csv_list(text: str) -> list[str]:
    items = [x.strip() for x in text.split(",") if x.strip()]
    if not items:
        raise argparse.ArgumentTypeError("expected a comma-separated list")
    return items


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aqlab", description="Annealed-expectile RL experiments on toy problems.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a sweep config")
    run.add_argument("config")
    run.add_argument("--out", help="output directory (default: the config's 'out' or its name)")
    run.add_argument("--workers", type=int, help="worker processes (default: the config's 'workers')")
    run.add_argument("--seed", type=int, help="override the config's master_seed")
    run.add_argument("--quiet", action="store_true")

    agg = sub.add_parser("aggregate", help="recompute per-cell reports of a sweep directory")
    agg.add_argument("dir")

    plot = sub.add_parser("plotdata", help="emit tidy CSV for plotting")
    plot.add_argument("dir")
    plot.add_argument("--series", type=_csv_list, required=True, help="comma-separated metric columns")
    plot.add_argument("--cells", type=_csv_list, help="comma-separated cell ids (default: all)")
    plot.add_argument("--aggregate", action="store_true", help="one row per (cell, step) with mean and CI")
    plot.add_argument("--out", help="write to a file instead of stdout")

    orc = sub.add_parser("oracle", help="spot-check reference computations")
    osub = orc.add_subparsers(dest="oracle", required=True)
    ex = osub.add_parser("expectile", help="sample expectile of the given values")
    ex.add_argument("--tau", type=float, required=True)
    ex.add_argument("values", type=float, nargs="+")
    vi = osub.add_parser("valueiter", help="optimal action values of the chain MDP or an MDP file")
    vi.add_argument("--mdp", help="YAML MDP file (default: the chain MDP)")
    for f in dataclasses.fields(ChainMdpParams):
        if f.type in ("float", float):
            vi.add_argument(f"--{f.name}", type=float)
    return p


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed", "must be non-negative")
        cfg.master_seed = args.seed
    if args.workers is not None and args.workers < 1:
        raise ConfigError("--workers", "must be at least 1")

    def progress(key, status, error):
        if not args.quiet:
            print(f"{status:6s} {key}" + (f"  {error}" if error else ""), file=sys.stderr)

    res = run_sweep(cfg, args.out, args.workers, progress)
    print(json.dumps({"out": str(res.out_dir), "completed": len(res.completed), "skipped": len(res.skipped),
                      "failed": len(res.failed)}))
    return EXIT_OK if res.ok else EXIT_RUN_FAILED


def _cmd_oracle(args) -> int:
    if args.oracle == "expectile":
        print(repr(sample_expectile(args.values, args.tau)))
        return EXIT_OK
    if args.mdp:
        mdp = load_mdp(args.mdp)
    else:
        overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(ChainMdpParams) if getattr(args, f.name, None) is not None}
        mdp = build_chain_mdp(ChainMdpParams(**overrides))
    vt = value_iteration(mdp)
    q = {s: {a: float(vt.q[i, j]) for j, a in enumerate(mdp.action_names)} for i, s in enumerate(mdp.state_names)}
    print(json.dumps({"q": q, "v": dict(zip(mdp.state_names, map(float, vt.v)))}, indent=2))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "aggregate":
            if not (Path(args.dir) / "config.json").exists():
                raise ConfigError(args.dir, "not a sweep directory (no config.json)")
            reports = aggregate(args.dir)
            print(json.dumps({"cells": sorted(reports)}))
            return EXIT_OK
        if args.command == "plotdata":
            if not (Path(args.dir) / "config.json").exists():
                raise ConfigError(args.dir, "not a sweep directory (no config.json)")
            text = emit_plot_data(args.dir, args.series, args.cells, args.aggregate)
            if args.out:
                Path(args.out).write_text(text)
            else:
                sys.stdout.write(text)
            return EXIT_OK
        return _cmd_oracle(args)
    except (ConfigError, ValueError, KeyError, FileNotFoundError, ConvergenceError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_INVALID
