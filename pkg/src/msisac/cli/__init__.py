"""Command-line entry point: ``msisac <verb> --config PATH [--seed N] [--out DIR] ...``."""
from __future__ import annotations

import argparse
import copy
import json
import sys
import traceback
from pathlib import Path
from typing import Optional, Sequence

from .config import ConfigError, ExperimentConfig, build, load, normalize
from .runner import (RunReport, coverage_map, crb_compare, emit_artifacts, run_montecarlo,
                     run_single, trial_seed)

__all__ = ["main", "load", "normalize", "RunReport", "run_single", "run_montecarlo", "crb_compare",
           "coverage_map", "emit_artifacts", "trial_seed", "ConfigError"]

VERBS = ("run", "montecarlo", "crb-compare", "coverage-map", "validate-config")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="msisac",
                                description="Multi-static OFDM sensing experiments")
    p.add_argument("verb", choices=VERBS)
    p.add_argument("--config", required=True, type=Path, help="JSON experiment config")
    p.add_argument("--seed", type=int, default=None, help="override the config seed (u64)")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--threads", type=int, default=1, help="worker threads for links/trials")
    p.add_argument("--format", action="append", choices=("csv", "bin", "png"), dest="formats",
                   help="artifact format; repeat for several (default: csv and bin)")
    return p


def _with_seed(cfg: ExperimentConfig, seed: Optional[int]) -> ExperimentConfig:
    if seed is None:
        return cfg
    if not 0 <= seed < 2**64:
        raise ConfigError("seed", "expected an unsigned 64-bit integer")
    echo = copy.deepcopy(cfg.echo)
    echo["seed"] = seed
    return build(echo)


def _provenance(exc: BaseException) -> str:
    mod = "msisac"
    for frame, _ in traceback.walk_tb(exc.__traceback__):
        name = frame.f_globals.get("__name__", "")
        if name.startswith("msisac."):
            mod = name
    return mod


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = _with_seed(load(args.config), args.seed)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"config error: cannot read {args.config}: {e}", file=sys.stderr)
        return 2
    if args.threads < 1:
        print("--threads must be >= 1", file=sys.stderr)
        return 2
    if args.verb == "validate-config":
        print(json.dumps(cfg.echo, indent=2, sort_keys=True))
        return 0
    formats = args.formats or ["csv", "bin"]
    try:
        if args.verb == "run":
            report = run_single(cfg, args.threads)
        elif args.verb == "montecarlo":
            report = run_montecarlo(cfg, args.threads)
        elif args.verb == "crb-compare":
            report = crb_compare(cfg)
        else:
            report = coverage_map(cfg)
        written = emit_artifacts(report, args.out, formats)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # surfaced with the module it came from
        print(f"error in {_provenance(e)}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    for key, secs in report.timing.items():
        print(f"{key}: {secs:.3f}", file=sys.stderr)
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
