"""Command-line entry point: run / compare / gen-data / verify."""

from __future__ import annotations

import argparse
import sys

from . import runner
from .verify import run_verification


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="metaseg",
        description="Few-shot segmentation experiments with implicit meta-gradients.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run an experiment from a config file")
    run_p.add_argument("--config", required=True, help="path to an INI experiment config")
    run_p.add_argument("--threads", type=int, default=None,
                       help="task-level parallelism (default 1: bit-exact runs)")
    run_p.add_argument("--seed", type=int, default=None, help="override the config seed")
    run_p.add_argument("--dry-run", action="store_true",
                       help="print the resolved plan and exit")

    cmp_p = sub.add_parser("compare", help="merge eval reports from run directories")
    cmp_p.add_argument("dirs", nargs="+", help="run output directories")

    gen_p = sub.add_parser("gen-data", help="write synthetic pools to disk as PNGs")
    gen_p.add_argument("--config", required=True)
    gen_p.add_argument("--out", required=True, help="output directory")

    sub.add_parser("verify", help="run the built-in oracle suite")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return runner.run(args.config, threads=args.threads, seed=args.seed,
                          dry_run=args.dry_run)
    if args.command == "compare":
        try:
            _, table = runner.compare(args.dirs)
        except ValueError as e:
            print(f"error: {e}", file=sys.stderr)
            return 1
        print(table)
        return 0
    if args.command == "gen-data":
        return runner.gen_data(args.config, args.out)
    if args.command == "verify":
        return 0 if run_verification() else 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
