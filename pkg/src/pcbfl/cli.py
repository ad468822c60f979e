"""Command-line entry point: ``python -m pcbfl <subcommand>``.

Exit codes: 0 success, 2 configuration error, 3 missing upstream artifact,
4 numeric or protocol failure. ``PCBFL_OUTPUT_DIR`` and ``PCBFL_WORKERS``
override the output directory and worker count.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .cluster import DegenerateGraphError, InsufficientCurveError
from .cohort import ParseError, SplitError, ValidationError
from .config import ConfigError, load
from .fedsim import ProtocolError
from .metrics import BootstrapError, UndefinedMetricError
from .nn import NumericError, ShapeError, SnapshotError
from .pipeline import STAGES, Run, StageDependencyError, run_pipeline, run_stage
from .predict import AssignmentError, EmptyClusterError, InfeasibleKError
from .smpc import DegenerateEmbeddingError, MaskGenerationError, SecurityViolation

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_NUMERIC = 0, 2, 3, 4

_NUMERIC = (NumericError, ShapeError, ProtocolError, SecurityViolation, MaskGenerationError,
            DegenerateEmbeddingError, DegenerateGraphError, InsufficientCurveError, EmptyClusterError,
            InfeasibleKError, AssignmentError, UndefinedMetricError, BootstrapError)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pcbfl", description="Patient-clustered federated learning simulator")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="default", help="built-in name (default, desk, quick) or YAML path")
    common.add_argument("--output-dir", help="overrides the configured output directory")
    common.add_argument("--workers", type=int, help="worker threads (results do not depend on it)")
    common.add_argument("--seed", type=int, help="overrides the root seed")
    common.add_argument("--resume", action="store_true", help="skip stages whose outputs are current")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        p = sub.add_parser(stage, parents=[common])
        if stage == "similarity":
            p.add_argument("--plaintext-oracle", action="store_true",
                           help="also compute the centralized similarity and the RMSE against it")
        if stage == "cluster":
            p.add_argument("--k", type=int, help="fix k instead of taking the elbow")
    sub.add_parser("pipeline", parents=[common])
    return parser


def _configure(args):
    cfg = load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out = args.output_dir or os.environ.get("PCBFL_OUTPUT_DIR") or cfg.output_dir
    workers = args.workers or int(os.environ.get("PCBFL_WORKERS", 0) or 0) or cfg.workers
    if workers < 1:
        raise ConfigError("workers: must be at least 1")
    # the worker count never changes results, so it is kept out of the resolved config
    cfg.output_dir = str(out)
    return cfg, workers


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    log = logging.getLogger("pcbfl")
    try:
        cfg, workers = _configure(args)
        cfg.workers = 1
        run = Run(cfg, workers=workers)
        if args.command == "pipeline":
            run_pipeline(run, resume=args.resume)
        else:
            options = {}
            if args.command == "similarity":
                options["plaintext_oracle"] = args.plaintext_oracle
            if args.command == "cluster":
                options["fixed_k"] = args.k
            run_stage(run, args.command, resume=args.resume, **options)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (StageDependencyError, SnapshotError, ParseError, FileNotFoundError) as exc:
        log.error("stage dependency error: %s", exc)
        return EXIT_DEPENDENCY
    except _NUMERIC as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_NUMERIC
    except (ValidationError, SplitError) as exc:
        log.error("invalid data: %s", exc)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
