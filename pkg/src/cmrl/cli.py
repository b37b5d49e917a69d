"""Command-line entry point: run, resume, eval, export-metrics."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .orchestrator import (
    Orchestrator,
    build_run_config,
    evaluate_checkpoint,
    export_metrics,
    parse_config_text,
)


def _cmd_run(args) -> int:
    cfg = build_run_config(
        parse_config_text(Path(args.config).read_text()),
        seed_override=args.seed,
        out_override=args.out,
    )
    orch = Orchestrator(cfg)
    reports = orch.run()
    if cfg.out_dir:
        orch.checkpoint(cfg.out_dir)
    for r in reports:
        print(
            f"phase {r.phase}: metric={r.controller_metric:.4f} "
            f"bits_M={r.code.bits_M:.1f} bits_H={r.code.bits_H:.1f} "
            f"intrinsic={r.intrinsic_total:.4f} ({r.duration:.1f}s)"
        )
    return 0


def _cmd_resume(args) -> int:
    orch = Orchestrator.restore(args.frm)
    done_before = orch.phase_idx
    orch.run()
    orch.checkpoint(orch.cfg.out_dir or args.frm)
    print(f"resumed at phase {done_before}, finished {orch.phase_idx} of {orch.cfg.phases}")
    return 0


def _cmd_eval(args) -> int:
    mean = evaluate_checkpoint(args.checkpoint, args.trials)
    print(f"mean external return over {args.trials} trials: {mean:.4f}")
    return 0


def _cmd_export(args) -> int:
    trials_csv, phases_csv = export_metrics(args.frm)
    sys.stdout.write(trials_csv)
    sys.stdout.write(phases_csv)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cmrl", description="world-model RL runs")
    sub = p.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute a configured run")
    run_p.add_argument("--config", required=True)
    run_p.add_argument("--seed", type=int, default=None)
    run_p.add_argument("--out", default=None)
    run_p.set_defaults(fn=_cmd_run)

    res_p = sub.add_parser("resume", help="continue from a checkpoint")
    res_p.add_argument("--from", dest="frm", required=True)
    res_p.set_defaults(fn=_cmd_resume)

    eval_p = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    eval_p.add_argument("--checkpoint", required=True)
    eval_p.add_argument("--trials", type=int, default=20)
    eval_p.set_defaults(fn=_cmd_eval)

    exp_p = sub.add_parser("export-metrics", help="emit per-trial and per-phase CSV")
    exp_p.add_argument("--from", dest="frm", required=True)
    exp_p.add_argument("--format", choices=["csv"], default="csv")
    exp_p.set_defaults(fn=_cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
