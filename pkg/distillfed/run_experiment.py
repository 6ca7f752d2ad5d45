#!/usr/bin/env python3
"""
Experiment CLI Runner
Execute federated experiments and sweeps from JSON/YAML configuration files
"""

import argparse
import logging
import os
import sys
from typing import List, Optional

import yaml
from dotenv import load_dotenv
from pydantic import ValidationError

from .config_schema import ExperimentConfig
from .engine import ExperimentEngine, SweepConfigError

logger = logging.getLogger(__name__)

SUBCOMMANDS = {
    "run": "run",
    "sweep-clients": "clients",
    "sweep-imgcls": "imgcls",
    "sweep-ck": "ck",
    "sweep-stragglers": "stragglers",
}

EXIT_OK = 0
EXIT_CELL_FAILED = 1
EXIT_CONFIG_ERROR = 2


class ConfigError(ValueError):
    """The experiment document could not be read or validated"""


def load_config(config_path: str) -> ExperimentConfig:
    """Load an experiment configuration (JSON, or YAML as its superset)"""
    try:
        with open(config_path) as f:
            config_dict = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError(f"{config_path}: {e.strerror}") from e
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        raise ConfigError(f"{config_path}: parse error at {where}: {getattr(e, 'problem', e)}") from e
    if not isinstance(config_dict, dict):
        raise ConfigError(f"{config_path}: top level must be an object")
    try:
        return ExperimentConfig(**config_dict)
    except ValidationError as e:
        lines = [f"{config_path}: {e.error_count()} invalid field(s)"]
        for err in e.errors():
            loc = ".".join(str(part) for part in err["loc"]) or "<root>"
            lines.append(f"  {loc}: {err['msg']}")
        raise ConfigError("\n".join(lines)) from e


def seed_override(raw: Optional[str]) -> Optional[List[int]]:
    """Parse DISTILLFED_SEED ("0,1,2")"""
    if raw is None or not raw.strip():
        return None
    try:
        seeds = [int(part) for part in raw.split(",") if part.strip()]
    except ValueError as e:
        raise ConfigError(f"DISTILLFED_SEED must be comma-separated integers, got {raw!r}") from e
    if not seeds or any(s < 0 for s in seeds):
        raise ConfigError(f"DISTILLFED_SEED must list non-negative seeds, got {raw!r}")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="distillfed", description=__doc__)
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sub = subparsers.add_parser(name)
        sub.add_argument("--config", required=True, help="experiment document (JSON or YAML)")
        sub.add_argument("--out", default=None, help="output directory (default: config output_dir)")
        sub.add_argument("--jobs", type=int, default=1, help="cells executed in parallel")
        sub.add_argument("--resume", action="store_true", help="skip cells with a completed report")
        sub.add_argument("--log-level", default="INFO",
                         choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    load_dotenv()

    try:
        print(f"Loading experiment config: {args.config}")
        config = load_config(args.config)
        seeds = seed_override(os.getenv("DISTILLFED_SEED"))
        if seeds is not None:
            logger.info(f"DISTILLFED_SEED overrides seeds with {seeds}")
            config = config.model_copy(update={"seeds": seeds})
        engine = ExperimentEngine(config, out_dir=args.out, jobs=args.jobs, resume=args.resume)
        result = engine.run_sweep(SUBCOMMANDS[args.command])
    except (ConfigError, SweepConfigError) as e:
        print(f"Config error: {e}", file=sys.stderr)
        return EXIT_CONFIG_ERROR

    print("\n" + "=" * 70)
    print("EXPERIMENT COMPLETE" if not result["failures"] else "EXPERIMENT COMPLETE WITH FAILURES")
    print("=" * 70)
    print(f"Experiment: {result['experiment']} ({result['sweep']})")
    print(f"Cells: {result['completed']}/{result['cells']} completed, {result['skipped']} resumed")
    for failure in result["failures"]:
        print(f"Failed: {failure['cell_id']}: {failure['error']}")
    print(f"Aggregate: {result['aggregate_path']}")
    print(f"Curves: {result['curves_path']}")
    print(f"Duration: {result['duration_seconds']:.2f}s")
    print("=" * 70)
    return EXIT_CELL_FAILED if result["failures"] else EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
