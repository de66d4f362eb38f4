"""Command-line harness.

Verbs:
  run            execute one experiment from a JSON config file
  sweep          expand a JSON grid file and execute every run
  aggregate      collect results under a directory into CSV tables
  gen-synthetic  write a synthetic dataset in the transactions CSV layout

Config keys mirror ExperimentConfig (see README); sweep grids add list
axes: seeds, methods, orderings / granularities, layers, hidden_dims,
epochs.  The worker count for sweeps comes from --workers or the
CLGRAPH_WORKERS environment variable.  Exit status is nonzero iff any run
failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .bench import aggregate, config_from_dict, run_experiment, run_sweep
from .data import SyntheticSpec, generate_synthetic, save_ibm_csv


def _read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _cmd_run(args) -> int:
    cfg = config_from_dict(_read_json(args.config))
    if args.keep_checkpoints:
        cfg.keep_checkpoints = True
    record = run_experiment(cfg, args.out, resume=args.resume)
    print(f"run complete: AP={record['ap']:.4f} "
          f"AF={'n/a' if record['af'] is None else format(record['af'], '.4f')} "
          f"Fin={record['fin']:.4f} -> {args.out}")
    return 0


def _cmd_sweep(args) -> int:
    ok, failed = run_sweep(_read_json(args.grid), args.out, workers=args.workers)
    print(f"sweep complete: {ok} ok, {failed} failed -> {args.out}")
    return 1 if failed else 0


def _cmd_aggregate(args) -> int:
    paths = aggregate(args.results, args.out)
    for path in paths:
        print(path)
    return 0


def _cmd_gen_synthetic(args) -> int:
    spec = SyntheticSpec(**_read_json(args.spec))
    ds = generate_synthetic(spec)
    save_ibm_csv(ds, args.transactions, args.patterns)
    counts = ds.pattern_counts()
    laundering = counts.pop("total-laundering")
    print(f"wrote {ds.node_count} nodes, {ds.edge_count} edges "
          f"({laundering} laundering) -> {args.transactions}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clgraph",
        description="Continual graph learning benchmark harness for AML "
                    "transaction graphs.")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log progress details")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute a single experiment config")
    run_p.add_argument("--config", required=True, help="JSON config file")
    run_p.add_argument("--out", required=True, help="output directory")
    run_p.add_argument("--resume", action="store_true",
                       help="resume from the last complete task checkpoint")
    run_p.add_argument("--keep-checkpoints", action="store_true",
                       help="retain per-task checkpoints after the run")
    run_p.set_defaults(func=_cmd_run)

    sweep_p = sub.add_parser("sweep", help="expand and execute a grid file")
    sweep_p.add_argument("--grid", required=True, help="JSON grid file")
    sweep_p.add_argument("--out", required=True, help="output root directory")
    sweep_p.add_argument("--workers", type=int, default=None,
                         help="parallel run count (default: CLGRAPH_WORKERS or 1)")
    sweep_p.set_defaults(func=_cmd_sweep)

    agg_p = sub.add_parser("aggregate", help="aggregate run records into CSVs")
    agg_p.add_argument("--results", required=True, help="directory of run records")
    agg_p.add_argument("--out", required=True, help="output directory")
    agg_p.set_defaults(func=_cmd_aggregate)

    gen_p = sub.add_parser("gen-synthetic",
                           help="generate a synthetic dataset from a spec file")
    gen_p.add_argument("--spec", required=True, help="JSON SyntheticSpec file")
    gen_p.add_argument("--transactions", required=True,
                       help="output transactions CSV path")
    gen_p.add_argument("--patterns", required=True,
                       help="output laundering-attempts file path")
    gen_p.set_defaults(func=_cmd_gen_synthetic)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
