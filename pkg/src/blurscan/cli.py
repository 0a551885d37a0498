"""Command-line entry point.

    blurscan <stage> --config demo.cfg [--seed N] [--out DIR] [--jobs N]
    blurscan pipeline --config demo.cfg
    blurscan init-config demo.cfg

Stage subcommands: synth, scan, stitch, extract, dataset, train, classify,
triage, report; `pipeline` chains all of them. Failures exit nonzero with a
stage-named diagnostic.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import pipeline
from .config import default_config_text, load_config
from .errors import PipelineError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blurscan",
        description="Motion-blurred slide-scan simulator and processing pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    init = sub.add_parser("init-config", help="write a demo configuration file")
    init.add_argument("path", help="where to write the config")

    for name in pipeline.STAGES + ("pipeline",):
        p = sub.add_parser(name, help=f"run the {name} stage"
                           if name != "pipeline" else "run every stage in order")
        p.add_argument("--config", required=True, help="pipeline config file")
        p.add_argument("--seed", type=int, default=None, help="override [run] seed")
        p.add_argument("--out", default=None, help="override [run] out directory")
        p.add_argument("--jobs", type=int, default=1,
                       help="worker threads for per-core stages")
        if name == "stitch":
            p.add_argument("--window", type=int, default=None,
                           help="motion-label smoothing window (frames)")
            p.add_argument("--theta-static", type=float, default=None,
                           help="static-label correlation threshold")
            p.add_argument("--refine", choices=["on", "off"], default=None,
                           help="bounded cross-correlation placement refinement")
            p.add_argument("--start-direction", choices=["+x", "-x"], default=None,
                           help="direction of the first scan line")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "init-config":
        Path(args.path).write_text(default_config_text(), encoding="utf-8")
        print(f"wrote {args.path}")
        return 0

    stage = args.command
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.run.seed = args.seed
        if args.out is not None:
            cfg.run.out = args.out
        if stage == "stitch":
            if args.window is not None:
                cfg.stitch.window = args.window
            if args.theta_static is not None:
                cfg.stitch.theta_static = args.theta_static
            if args.refine is not None:
                cfg.stitch.refine = args.refine == "on"
            if args.start_direction is not None:
                cfg.scan.start_direction = +1 if args.start_direction == "+x" else -1
        out = Path(cfg.run.out)
        if stage == "pipeline":
            infos = pipeline.run_pipeline(cfg, out, jobs=args.jobs)
            summary = infos["report"].get("summary")
            if summary:
                print(json.dumps(summary, indent=1, sort_keys=True))
            print(f"pipeline complete: {out}")
        else:
            info = pipeline.run_stage(stage, cfg, out, jobs=args.jobs)
            print(f"{stage} complete in {info.get('seconds', 0):.1f}s")
    except PipelineError as exc:
        print(f"error [{stage}]: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
