"""``evade-bench`` command line: one subcommand per pipeline stage."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Sequence

from .config import ConfigError, load_config
from .pipeline import STAGES, MissingArtifactError, run_stage

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evade-bench", description="Behavioral-detector evasion experiments on simulated workloads.")
    p.add_argument("stage", choices=STAGES, help="pipeline stage to run")
    p.add_argument("--config", required=True, help="YAML experiment config (merged over the packaged defaults)")
    p.add_argument("--out", default=None, help="output directory (overrides config and EVADE_BENCH_OUT)")
    p.add_argument("--seed", type=int, default=None, help="global seed override")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _fail(code: int, kind: str, message: str, **extra) -> int:
    err = {"error": kind, "message": message, **extra}
    print(json.dumps(err, sort_keys=True), file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out)
        outputs = run_stage(args.stage, cfg)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc), field=exc.path)
    except MissingArtifactError as exc:
        return _fail(EXIT_MISSING, "missing_artifact", str(exc), requires=exc.required, path=str(exc.path))
    except Exception as exc:  # surfaced as a structured error, not a traceback
        logging.getLogger(__name__).debug("stage failed", exc_info=True)
        return _fail(EXIT_ERROR, type(exc).__name__, str(exc), stage=args.stage)
    for p in outputs:
        print(p)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
