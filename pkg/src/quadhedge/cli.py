"""Command line entry point: ``quadhedge {mvh,lrm,mc,pde,riccati,report}``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .harness import METHODS, RunReport, load_config, preset, run


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="quadhedge", description="Quadratic hedging in a multi-asset Heston market")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in METHODS:
        p = sub.add_parser(name, help=f"run the {name} pipeline")
        p.add_argument("--config", help="JSON file with ExperimentConfig fields")
        p.add_argument("--preset", help="table1-m1 | table1-m5 | table1-m20 | table1-m100 | quick | full")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--steps", type=int, help="time steps N of the deep solver")
        p.add_argument("--iterations", type=int, help="training iterations")
        p.add_argument("--mc-batch", type=int)
    r = sub.add_parser("report", help="print the summary of a stored report.json")
    r.add_argument("path", nargs="?", default="runs/out/report.json")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "report":
        path = Path(args.path)
        if path.is_dir():
            path = path / "report.json"
        print(RunReport.load(path).summary())
        return 0
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = preset(args.preset or "quick")
    cfg.method = args.command
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out:
        cfg.out_dir = args.out
    if args.steps is not None:
        cfg.solver.n_steps = args.steps
    if args.iterations is not None:
        cfg.solver.iterations = args.iterations
        cfg.solver.partial = min(cfg.solver.partial, args.iterations // 2)
    if args.mc_batch is not None:
        cfg.mc_batch = args.mc_batch
    rep = run(cfg, echo=True)
    if not rep.ok:
        print(f"stage failed: {rep.failed_stage}", file=sys.stderr)
        return 1
    print(f"report written to {Path(cfg.out_dir) / 'report.json'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
