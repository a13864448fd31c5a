"""Command-line front end for the batch pipeline.

One subcommand per stage plus ``run`` for the whole chain.  Exit
codes: 0 on success, 1 for usage or config problems, 2 when a stage
fails (partial artifacts are left in the run directory).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from roamwatch.detectors import DETECTOR_KINDS
from roamwatch.detectors.modes import MODES
from roamwatch.features import Branch
from roamwatch.pipeline import (
    STAGES,
    ConfigError,
    PipelineConfig,
    RunPaths,
    StageError,
    load_config,
    run_pipeline,
)

__all__ = ["main", "build_parser"]

_STAGE_HELP = {
    "simulate": "generate dialogue logs and ground-truth labels",
    "featurize": "compute daily metrics and training feature vectors",
    "cluster": "group devices by behavior via the mixture model",
    "train": "fit the anomaly detector(s) for the chosen mode",
    "score": "score and flag devices on every post-training day",
    "alarm": "aggregate flags into per-client z-score alarms",
    "report": "render the day-by-client recall table",
}


class _Parser(argparse.ArgumentParser):
    """argparse reserves exit code 2 for usage errors; we use 1."""

    def error(self, message):  # noqa: D102 - argparse hook
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", type=Path, help="run directory for artifacts")
    p.add_argument("--branch", choices=sorted(Branch.ALL))
    p.add_argument("--detector", choices=sorted(DETECTOR_KINDS))
    p.add_argument("--mode", choices=list(MODES))
    p.add_argument(
        "--contamination", type=float,
        help="fraction of devices flagged per day (default 0.05)",
    )
    p.add_argument(
        "--confidence", type=float,
        help="alarm confidence level (default 0.99)",
    )
    p.add_argument(
        "--jobs", type=int, help="parallel workers for log generation"
    )
    p.add_argument(
        "--train-days", type=int, dest="train_days",
        help="length of the training window in days (default 30)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="roamwatch",
        description=(
            "Signaling anomaly detection for IoT roaming fleets: "
            "simulate traffic, learn per-cluster baselines, flag devices, "
            "and raise per-client alarms."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, help_text in _STAGE_HELP.items():
        _add_common(sub.add_parser(name, help=help_text, description=help_text))
    _add_common(
        sub.add_parser(
            "run",
            help="execute every stage from simulate to report",
            description="execute every stage from simulate to report",
        )
    )
    return parser


_OVERRIDE_FIELDS = (
    "seed", "branch", "detector", "mode",
    "contamination", "confidence", "jobs", "train_days",
)


def _resolve_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    overrides = {
        name: getattr(args, name)
        for name in _OVERRIDE_FIELDS
        if getattr(args, name) is not None
    }
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    if "seed" in overrides and cfg.fleet is not None:
        cfg = dataclasses.replace(
            cfg, fleet=dataclasses.replace(cfg.fleet, seed=cfg.seed)
        )
    cfg.resolve_fleet()  # fail fast on bad presets
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
    except ConfigError as e:
        print(f"roamwatch: config error: {e}", file=sys.stderr)
        return 1

    out = args.out or (Path(cfg.out_dir) if cfg.out_dir else None)
    if out is None:
        print(
            "roamwatch: error: no run directory (pass --out or set "
            "out_dir in the config)",
            file=sys.stderr,
        )
        return 1
    paths = RunPaths(out)

    try:
        if args.command == "run":
            summary = run_pipeline(
                cfg,
                out,
                progress=lambda name, secs: print(f"[{name}] {secs:.1f}s"),
            )
            print(summary["report"], end="")
        else:
            stage_fn = dict(STAGES)[args.command]
            result = stage_fn(cfg, paths)
            if args.command == "report":
                print(result, end="")
            else:
                print(json.dumps(result, default=str, sort_keys=True))
    except StageError as e:
        print(f"roamwatch: {e}", file=sys.stderr)
        return 2
    except ConfigError as e:
        print(f"roamwatch: config error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"roamwatch: stage {args.command!r} failed: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
