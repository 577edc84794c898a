"""``ellslice`` command line: run, validate, list-targets, list-kernels."""

from __future__ import annotations

import argparse
import logging
import sys

from ..samplers import KERNEL_DESCRIPTIONS
from ..targets import TARGET_DESCRIPTIONS
from .config import ConfigError, validate_config
from .runner import EXIT_OK, EXIT_VALIDATION, preflight, run_experiment

log = logging.getLogger("ellslice")


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ellslice", description="Elliptical slice sampling experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("config")
    run.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    run.add_argument("--paper-scale", action="store_true", help="n0=1e5, n=1e6 and dims up to 1000")
    run.add_argument("--output-dir", help="override the config's output_dir")
    run.add_argument("--seed", type=_u64, help="override the config's root seed")
    run.add_argument("--no-timing", action="store_true",
                     help="leave wall_time_s empty so results.csv is byte-reproducible")

    val = sub.add_parser("validate", help="check a config without running it")
    val.add_argument("config")

    sub.add_parser("list-targets", help="show the target catalog")
    sub.add_parser("list-kernels", help="show the available kernels")
    return p


def _load(path, **overrides):
    try:
        cfg = validate_config(path).apply_overrides(**overrides)
    except ConfigError as exc:
        for line in exc.diagnostics:
            print(line, file=sys.stderr)
        return None
    problems = preflight(cfg)
    for line in problems:
        print(f"{path}: {line}", file=sys.stderr)
    return None if problems else cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    if args.command == "list-targets":
        for name, desc in TARGET_DESCRIPTIONS.items():
            print(f"{name:20s} {desc}")
        return EXIT_OK
    if args.command == "list-kernels":
        for name, desc in KERNEL_DESCRIPTIONS.items():
            print(f"{name:14s} {desc}")
        return EXIT_OK
    if args.command == "validate":
        cfg = _load(args.config)
        if cfg is None:
            return EXIT_VALIDATION
        print(f"{args.config}: ok ({cfg.experiment}, target {cfg.target.name}, dims {cfg.dims})")
        return EXIT_OK

    if args.workers < 1:
        print("--workers must be at least 1", file=sys.stderr)
        return EXIT_VALIDATION
    cfg = _load(args.config, full_scale=args.paper_scale, seed=args.seed, output_dir=args.output_dir)
    if cfg is None:
        return EXIT_VALIDATION
    log.info("running %s on %s: dims %s, %d kernel(s), %d replicate(s)",
             cfg.experiment, cfg.target.name, cfg.dims, len(cfg.kernels), cfg.replicates)
    outcome = run_experiment(cfg, workers=args.workers, blank_timing=args.no_timing)
    for f in outcome.summary["failed_units"]:
        log.error("unit dim=%s kernel=%s replicate=%s failed: %s", f["dim"], f["kernel"], f["replicate"], f["error"])
    for c in outcome.summary["validations"]:
        log.info("%s %s: %s", "PASS" if c["passed"] else "FAIL", c["name"], c["detail"])
    log.info("outputs in %s (exit %d)", outcome.output_dir, outcome.exit_code)
    return outcome.exit_code


if __name__ == "__main__":
    sys.exit(main())
