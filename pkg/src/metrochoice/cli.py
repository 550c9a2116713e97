"""Command-line entrypoint: subcommands over file artifacts.

Exit codes: 0 success, 2 missing input artifact, 3 validation failure in
strict mode, 1 anything else. Logs go to stderr, artifacts to the
configured output directory.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, load_config
from .pipeline import STAGES, StageInputMissing, StrictInconsistency, run_stage
from .synth import WorldError

log = logging.getLogger("metrochoice")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metrochoice",
        description="Metro delay travel-choice pipeline over file artifacts",
    )
    parser.add_argument("stage", choices=STAGES + ("all",), help="pipeline stage to run")
    parser.add_argument("--config", default=None, help="path to the pipeline config JSON")
    parser.add_argument("--seed", type=int, default=None, help="override the configured seed")
    parser.add_argument("--strict", action="store_true", help="fail on config/metric validation issues")
    parser.add_argument("--output-dir", default=None, help="override the configured output directory")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        log.error("%s", exc)
        return 2
    if args.seed is not None:
        cfg.seed = args.seed
        if cfg.synth is not None:
            from dataclasses import replace

            cfg.synth = replace(cfg.synth, seed=args.seed)
    if args.strict:
        cfg.strict = True
    if args.output_dir is not None:
        cfg.output_dir = args.output_dir

    if cfg.unknown_keys:
        for key in cfg.unknown_keys:
            log.warning("unknown config key: %s", key)
        if cfg.strict:
            log.error("strict mode: %d unknown config keys", len(cfg.unknown_keys))
            return 3

    try:
        run_stage(args.stage, cfg)
    except StageInputMissing as exc:
        log.error("%s", exc)
        return 2
    except StrictInconsistency as exc:
        log.error("%s", exc)
        return 3
    except WorldError as exc:
        log.error("infeasible world: %s", exc)
        return 1
    except Exception as exc:  # pragma: no cover - safety net
        log.error("stage %s failed: %s", args.stage, exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
