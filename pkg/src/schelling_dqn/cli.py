"""Command line: ``schelling-dqn {train,sweep,render,validate-config}``.

Exit status 0 on success, 1 on usage or configuration errors, 2 when a run
fails at runtime.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import grid_env as ge
from .experiment import (
    DEFAULT_ALPHAS,
    DEFAULT_COSTS,
    ConfigError,
    load_config,
    run_simulation,
    run_sweep,
    write_outputs,
)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

# grey levels for render: empty white, A black, B mid-grey
GRAY_LEVELS = {0: 255, int(ge.Kind.A): 0, int(ge.Kind.B): 128}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="schelling-dqn", description="Schelling segregation with deep Q-learning agents")
    sub = parser.add_subparsers(dest="verb", parser_class=_Parser)
    sub.required = True

    train = sub.add_parser("train", help="run one simulation and write its outputs")
    train.add_argument("--config", required=True, type=Path)
    train.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    train.add_argument("--out", required=True, type=Path)

    sweep = sub.add_parser("sweep", help="run the tolerance x moving-cost grid")
    sweep.add_argument("--config", required=True, type=Path)
    sweep.add_argument("--seeds", required=True, type=int, help="replicates; seeds are seed, seed+1, ...")
    sweep.add_argument("--out", required=True, type=Path)
    sweep.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    sweep.add_argument("--alphas", type=_float_list, default=list(DEFAULT_ALPHAS))
    sweep.add_argument("--costs", type=_float_list, default=list(DEFAULT_COSTS))
    sweep.add_argument("--workers", type=int, default=1)

    render = sub.add_parser("render", help="convert a snapshot to a PGM image")
    render.add_argument("--snapshot", required=True, type=Path)
    render.add_argument("--out", required=True, type=Path)

    validate = sub.add_parser("validate-config", help="parse a config and print the resolved values")
    validate.add_argument("--config", required=True, type=Path)
    validate.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    return parser


def render_pgm(snapshot_text: str) -> bytes:
    """Binary PGM (P5, maxval 255), one pixel per cell, top row first."""
    kinds = ge.parse_snapshot(snapshot_text)
    h, w = kinds.shape
    pixels = bytes(GRAY_LEVELS[int(v)] for v in kinds.ravel())
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE

    try:
        if args.verb == "render":
            try:
                text = args.snapshot.read_text()
            except OSError as exc:
                print(f"cannot read {args.snapshot}: {exc.strerror}", file=sys.stderr)
                return EXIT_RUNTIME
            args.out.write_bytes(render_pgm(text))
            return EXIT_OK

        config = load_config(args.config, args.overrides)
        if args.verb == "validate-config":
            sys.stdout.write(config.to_text())
            return EXIT_OK
        if args.verb == "train":
            sys.stdout.write(config.to_text())
            result = run_simulation(config)
            write_outputs(result, args.out)
            logging.info("wrote %s in %.1fs", args.out, result.duration)
            return EXIT_OK
        if args.verb == "sweep":
            if args.seeds < 1:
                raise UsageError("--seeds must be >= 1")
            sys.stdout.write(config.to_text())
            seeds = [config.seed + i for i in range(args.seeds)]
            summary = run_sweep(config, args.alphas, args.costs, seeds, args.out, args.workers)
            logging.info("sweep: %d cells ok, %d failed", len(summary.rows), len(summary.failures))
            return EXIT_RUNTIME if summary.failures else EXIT_OK
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, ArithmeticError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
