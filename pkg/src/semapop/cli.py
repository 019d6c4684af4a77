"""Command-line entry point: ``semapop <stage> --config PATH [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from semapop.checkpoint import CheckpointError
from semapop.config import ConfigError, ExperimentConfig
from semapop.pipeline import STAGES, StageError, run
from semapop.population import PopulationError
from semapop.schema import SchemaError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semapop", description="Persona-conditioned population synthesis.")
    parser.add_argument("command", choices=STAGES)
    parser.add_argument("--config", required=True, help="experiment JSON config")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", default=None, help="override the output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config)
        overrides = {k: v for k, v in (("seed", args.seed), ("out", args.out)) if v is not None}
        if overrides:
            cfg = dataclasses.replace(cfg, **overrides)
        provenance = run(args.command, cfg)
    except (ConfigError, StageError, CheckpointError, SchemaError, PopulationError) as exc:
        print(f"semapop {args.command}: {exc}", file=sys.stderr)
        return 2
    print(provenance)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
