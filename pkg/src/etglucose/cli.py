"""Command-line entry point.

    etglucose train        --config c.yaml [--seed N] [--out-dir D]
    etglucose eval         --config c.yaml [--seed N] [--out-dir D]
    etglucose tune-pid     --config c.yaml [--out-dir D]
    etglucose export-plots --config c.yaml [--seed N] [--out-dir D]
    etglucose matrix       --config m.yaml [--out-dir D]

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import harness
from .config import ConfigError, load_config, load_matrix_config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="etglucose",
        description="Train and evaluate event-triggered insulin controllers "
                    "on a simulated artificial pancreas.",
    )
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str, seed_flag: bool = True):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="YAML config file")
        p.add_argument("--out-dir", default="runs",
                       help="output base directory (default: runs)")
        if seed_flag:
            p.add_argument("--seed", type=int, default=None,
                           help="run only this seed instead of the config list")
        return p

    add("train", "train the configured method for each seed")
    add("eval", "greedy evaluation of trained runs on the fixed scenarios")
    add("tune-pid", "grid-search PID gains for the configured patient",
        seed_flag=False)
    add("export-plots", "bundle evaluation traces into plot-ready CSVs")
    add("matrix", "run the full method x patient sweep", seed_flag=False)
    return parser


def _seeds(args) -> tuple[int, ...] | None:
    seed = getattr(args, "seed", None)
    return None if seed is None else (seed,)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "matrix":
            matrix = load_matrix_config(args.config)
            path = harness.run_matrix(matrix, args.out_dir)
            print(path)
            return 0
        cfg = load_config(args.config)
        if args.command == "train":
            for rd in harness.run_train(cfg, args.out_dir, _seeds(args)):
                print(rd)
        elif args.command == "eval":
            for path in harness.run_eval(cfg, args.out_dir, _seeds(args)):
                print(path)
        elif args.command == "tune-pid":
            gains, score = harness.tune_pid(cfg, args.out_dir)
            print(f"kp={gains.kp} ki={gains.ki} kd={gains.kd} "
                  f"target={gains.target} mean_tir={score:.2f}")
        elif args.command == "export-plots":
            for path in harness.export_plotdata(cfg, args.out_dir, _seeds(args)):
                print(path)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure: missing files, bad checkpoints
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
