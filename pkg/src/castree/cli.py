"""Command-line entry point: ``castree {calibrate,run,compare,figures}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from castree.cost_model import CostModelError
from castree.harness import (
    ConfigError,
    DecodeReport,
    RunConfig,
    ablation_configs,
    calibrate,
    compare,
    pearson,
    accept_vs_probability,
    run,
    trace_figures,
    write_rows,
)


def _load_config(path: str, args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(path)
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "clock", None) is not None:
        changes["clock"] = args.clock
    if changes:
        cfg = cfg.replace(**changes)
    if getattr(args, "toggle", None):
        cfg = cfg.toggled(*args.toggle)
    return cfg


def _cmd_calibrate(args: argparse.Namespace) -> int:
    backend = json.loads(Path(args.backend).read_text())
    written = calibrate(backend, args.batch_size, args.bucket_width, args.bucket_count,
                        args.max_tokens, args.reps, args.out_dir)
    for role, path in written.items():
        print(f"{role}: {path}")
    return 0


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config, args)
    report = run(cfg)
    if args.out:
        report.save(args.out)
    print(
        f"{report.name}: speedup={report.speedup:.3f} accept={report.mean_accept_length:.3f} "
        f"tokens={report.total_tokens} time_ms={report.method_time_ms:.1f}"
    )
    return 0


def _cmd_compare(args: argparse.Namespace) -> int:
    configs = [_load_config(p, args) for p in args.configs]
    if args.ablation:
        if len(configs) != 1:
            raise ConfigError("--ablation takes exactly one base config")
        configs = ablation_configs(configs[0], include_baseline=True)
    rows = compare(configs)
    prefix = Path(args.out)
    write_rows(rows, prefix.with_suffix(".csv"), prefix.with_suffix(".json"))
    for row in rows:
        print(f"{row['name']:>16}  speedup={row['speedup']:.3f}  accept={row['mean_accept_length']:.3f}")
    return 0


def _cmd_figures(args: argparse.Namespace) -> int:
    report = DecodeReport.load(args.report)
    sweep_cfg = RunConfig.load(args.sweep_config) if args.sweep_config else None
    written = trace_figures(report, args.out_dir, sweep_cfg, args.m or ())
    r = pearson(accept_vs_probability(report))
    print(f"pearson(cumulative_prob, accept_length) = {r:.3f}" + (" (degenerate)" if r != r else ""))
    for name, path in written.items():
        print(f"{name}: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="castree", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="build draft/target cost tables")
    p.add_argument("backend", help="backend description JSON file")
    p.add_argument("--batch-size", "-B", type=int, default=1)
    p.add_argument("--bucket-width", "-L", type=int, default=128)
    p.add_argument("--bucket-count", "-M", type=int, default=8)
    p.add_argument("--max-tokens", "-N", type=int, default=128)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--out-dir", default="tables")
    p.set_defaults(func=_cmd_calibrate)

    def run_flags(q: argparse.ArgumentParser) -> None:
        q.add_argument("--seed", type=int)
        q.add_argument("--clock", choices=["sim", "wall"])
        q.add_argument("--toggle", action="append", choices=["dr", "dp", "bp"],
                       help="flip a CAST component relative to the config (repeatable)")

    p = sub.add_parser("run", help="decode with one config")
    p.add_argument("config")
    p.add_argument("--out", help="write the JSON report here")
    run_flags(p)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("compare", help="run several configs on identical prompts")
    p.add_argument("configs", nargs="+")
    p.add_argument("--ablation", action="store_true",
                   help="expand one base config into fixed-tree, CAST and single-component ablations")
    p.add_argument("--out", default="comparison", help="output prefix for .csv and .json")
    run_flags(p)
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("figures", help="emit CSV datasets from a run report")
    p.add_argument("report")
    p.add_argument("--out-dir", default="figures")
    p.add_argument("--sweep-config", help="config for the max-verify sweep")
    p.add_argument("--m", type=int, nargs="+", help="max-verify values to sweep")
    p.set_defaults(func=_cmd_figures)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (ConfigError, CostModelError, OSError, json.JSONDecodeError) as exc:
        print(f"castree: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
