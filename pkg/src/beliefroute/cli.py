"""Command-line entry point: calibrate, train, eval, sweep, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import harness
from .core import ConfigError, ExperimentConfig, parse_seed_range
from .metrics import report_value

log = logging.getLogger("beliefroute")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="beliefroute",
                                description="Belief-based escalation control experiments.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, type=Path, help="experiment config (JSON)")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--seeds", help="evaluation seeds, 'a..b' or a comma list")
    common.add_argument("--controller", default="all",
                        help="controller name, comma list, or 'all' (default)")
    common.add_argument("--alpha", type=float, help="override the budget fraction")
    common.add_argument("--checkpoint", type=Path, help="policy checkpoint for eval")
    common.add_argument("-v", "--verbose", action="store_true")
    sub.add_parser("calibrate", parents=[common],
                   help="fit signal calibration, encoder and baseline thresholds")
    sub.add_parser("train", parents=[common], help="train the escalation policy")
    sub.add_parser("eval", parents=[common], help="evaluate frozen controllers")
    sub.add_parser("sweep", parents=[common], help="budget sweep over alpha")
    sub.add_parser("report", parents=[common], help="recompute the report from stored logs")
    return p


def _controllers(arg: str) -> list[str]:
    if arg == "all":
        return list(harness.ALL_CONTROLLERS)
    names = [n.strip() for n in arg.split(",") if n.strip()]
    unknown = [n for n in names if n not in harness.ALL_CONTROLLERS]
    if unknown:
        raise ConfigError(f"unknown controller(s) {unknown}; "
                          f"choose from {', '.join(harness.ALL_CONTROLLERS)}")
    return names


def _summary(rows, names, out: Path) -> None:
    for n in names:
        u = report_value(rows, n, "utility")
        c = report_value(rows, n, "discounted_cost")
        o = report_value(rows, n, "occ")
        print(f"{n:22s} utility {u:.4f}  discounted_cost {c:.4f}  occ {o:.4f}")
    print(f"report: {out / 'report.csv'}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config)
        if args.alpha is not None:
            cfg = cfg.replace(alpha=args.alpha)
            cfg.validate()
        seeds = parse_seed_range(args.seeds) if args.seeds else None
        if seeds is not None:
            cfg = cfg.replace(seeds=seeds)
        out: Path = args.out
        out.mkdir(parents=True, exist_ok=True)

        if args.command == "calibrate":
            cal = harness.calibrate(cfg, out)
            print(f"calibrated config: {out / 'calibrated_config.json'}")
            print(json.dumps(cal.baselines, indent=2))
        elif args.command == "train":
            run = harness.train_pipeline(cfg, out)
            last = run.history[-1] if run.history else {}
            print(f"iterations {run.policy.iteration}  mu_d {run.policy.mu_d:.4f}  "
                  f"last batch cost {last.get('batch_cost', float('nan')):.4f}")
            print(f"checkpoints: {out / 'checkpoints'}")
            _summary(run.final_eval.rows, [harness.POLICY], out / "final_eval")
        elif args.command == "eval":
            names = _controllers(args.controller)
            checkpoint = args.checkpoint
            if harness.POLICY in names and checkpoint is None:
                raise ConfigError("eval of the policy needs --checkpoint")
            if checkpoint is not None and not checkpoint.exists():
                raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
            res = harness.evaluate(cfg, names, checkpoint, None, out)
            _summary(res.rows, names, out)
        elif args.command == "sweep":
            names = _controllers(args.controller)
            alphas = [args.alpha] if args.alpha is not None else None
            rows = harness.budget_sweep(cfg, alphas, names, None, out)
            for r in rows:
                print(f"{r['controller']:22s} alpha {r['alpha']:<5g} utility {r['utility']:.4f}  "
                      f"discounted_cost {r['discounted_cost']:.4f}")
            print(f"sweep: {out / 'sweep.csv'}")
        elif args.command == "report":
            rows = harness.report_from_logs(cfg, out)
            names = sorted({r["controller"] for r in rows})
            _summary(rows, names, out)
    except (ConfigError, FileNotFoundError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
