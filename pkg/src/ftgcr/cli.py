"""Command-line entry point: ``ftgcr {baseline,solve,campaign,report}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .faults import FaultInjector
from .gcr import BreakdownError, gcr_solve
from .harness import (
    SUMMARY_HEADER, BaselineError, CampaignConfig, ConfigError, build_problem, compute_stats,
    group_records, read_jsonl, run_baseline, run_campaign, run_seed,
    write_outputs, write_summary_csv,
)
from .operators import PreconditionerSpec
from .resilience import ftgcr_solve

EXIT_OK, EXIT_CONFIG, EXIT_BASELINE = 0, 1, 2


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _add_common(p, with_runs=False):
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--nx", type=int)
    p.add_argument("--nz", type=int)
    p.add_argument("--nranks", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--tol-mode", choices=["absolute", "relative"])
    p.add_argument("--max-outer", type=int)
    p.add_argument("--precond", choices=["identity", "jacobi", "line-z"])
    p.add_argument("--inject-prob", type=float)
    p.add_argument("--max-events", type=int)
    p.add_argument("--bit-policy",
                   choices=["uniform-any-bit", "mantissa-only", "exponent-only", "sign-only"])
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", type=Path, help="output directory")
    if with_runs:
        p.add_argument("--runs", type=int, help="runs per faulted arm")
        p.add_argument("--workers", type=int)


def build_parser():
    parser = argparse.ArgumentParser(prog="ftgcr", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("baseline", help="faultless reference solve")
    _add_common(p)
    p.add_argument("--loss-fraction", type=float)

    p = sub.add_parser("solve", help="one run with a per-step residual trace")
    _add_common(p)
    p.add_argument("--loss-fraction", type=float)
    p.add_argument("--ft", choices=["on", "off"], default="on")
    p.add_argument("--index", type=int, default=0, help="run index used for seeding")

    p = sub.add_parser("campaign", help="baseline + unprotected + protected runs")
    _add_common(p, with_runs=True)
    p.add_argument("--loss-fraction", type=_float_list,
                   help="one or more fractions, comma separated")
    p.add_argument("--ft", choices=["on", "off"], default="on",
                   help="off disables detection in the protected arm")

    p = sub.add_parser("report", help="recompute statistics from records.jsonl")
    p.add_argument("records", type=Path, help="records.jsonl or the directory holding it")
    p.add_argument("--out", type=Path, help="write summary.csv here instead of stdout")
    return parser


def config_from_args(args, loss_fraction=None) -> CampaignConfig:
    cfg = CampaignConfig.load(args.config) if args.config else CampaignConfig()
    try:
        domain = cfg.domain
        if args.nx is not None or args.nz is not None:
            domain = replace(domain, nx=args.nx or domain.nx, nz=args.nz or domain.nz)
        solver = cfg.solver
        for attr, key in (("k", "k"), ("tol", "tol"), ("tol_mode", "tol_mode"), ("max_outer", "max_outer")):
            if getattr(args, attr) is not None:
                solver = replace(solver, **{key: getattr(args, attr)})
        if args.precond is not None:
            solver = replace(solver, preconditioner=PreconditionerSpec(args.precond))
        fault = cfg.fault
        overrides = {
            "injection_prob": args.inject_prob,
            "max_events": args.max_events,
            "bit_policy": args.bit_policy,
            "loss_fraction": loss_fraction,
        }
        overrides = {k: v for k, v in overrides.items() if v is not None}
        if overrides:
            fault = replace(fault, **overrides)
        ft = cfg.ft
        if getattr(args, "ft", None) is not None:
            ft = replace(ft, enabled=args.ft == "on")
        updates = dict(domain=domain, solver=solver, fault=fault, ft=ft)
        if args.nranks is not None:
            updates["nranks"] = args.nranks
        if args.seed is not None:
            updates["master_seed"] = args.seed
        if getattr(args, "runs", None) is not None:
            updates["runs_per_arm"] = args.runs
        if getattr(args, "workers", None) is not None:
            updates["workers"] = args.workers
        return replace(cfg, **updates)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _print_stats(s):
    line = {k: getattr(s, k) for k in (
        "grid", "loss_fraction", "injection_prob", "baseline_iters", "avg_iters_gcr",
        "avg_iters_ftgcr", "faults_per_run", "detection_rate_pct",
        "detection_rate_mean_pct", "roft_pct", "runs_kept", "runs_discarded_nofault",
        "runs_failed")}
    print(json.dumps(line))


def cmd_baseline(args):
    cfg = config_from_args(args, args.loss_fraction)
    rec = run_baseline(cfg)
    print(rec.to_json())
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "baseline.json").write_text(rec.to_json() + "\n")
    return EXIT_OK


def cmd_solve(args):
    cfg = config_from_args(args, args.loss_fraction)
    prob = build_problem(cfg)
    arm = "ftgcr" if args.ft == "on" else "gcr"
    seed = run_seed(cfg.master_seed, arm, args.index)
    injector = None
    if cfg.fault.injection_prob > 0:
        injector = FaultInjector(replace(cfg.fault, seed=seed), prob.partition)
    try:
        if args.ft == "on":
            rep = ftgcr_solve(prob.op, prob.rhs, prob.phi0, cfg.solver, cfg.ft, injector,
                              partition=prob.partition)
        else:
            rep = gcr_solve(prob.op, prob.rhs, prob.phi0, cfg.solver, hook=injector,
                            partition=prob.partition, rng=getattr(injector, "rng", None))
    except BreakdownError as exc:
        print(f"breakdown: {exc}", file=sys.stderr)
        return EXIT_BASELINE
    print(f"# initial residual {rep.initial_residual:.6e}")
    for step, r in enumerate(rep.residual_history, 1):
        print(f"{step:5d} {r:.6e}")
    summary = {
        "arm": arm, "seed": seed, "converged": rep.converged,
        "outer_iterations": rep.outer_iterations, "inner_steps": rep.inner_steps,
        "operator_applications": rep.operator_applications,
        "stop_reason": rep.stop_reason,
    }
    if injector is not None:
        summary["events"] = [e.to_dict() for e in injector.log]
    if args.ft == "on":
        summary.update(faults_detected=rep.faults_detected, restores=rep.restores,
                       checkpoints_taken=rep.checkpoints_taken,
                       undetected_overruns=rep.undetected_overruns)
    print(json.dumps(summary))
    return EXIT_OK


def cmd_campaign(args):
    fractions = args.loss_fraction or [None]
    cfgs = [config_from_args(args, lf) for lf in fractions]
    records, stats = [], []
    for cfg in cfgs:
        recs, st = run_campaign(cfg)
        records.extend(recs)
        stats.append(st)
        _print_stats(st)
    if args.out:
        write_outputs(args.out, records, stats)
    return EXIT_OK


def cmd_report(args):
    path = args.records / "records.jsonl" if args.records.is_dir() else args.records
    try:
        records = read_jsonl(path)
    except (OSError, ValueError, TypeError) as exc:
        raise ConfigError(f"cannot read records from {path}: {exc}") from exc
    stats = [compute_stats(g) for g in group_records(records)]
    for s in stats:
        _print_stats(s)
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        write_summary_csv(args.out / "summary.csv", stats)
    else:
        w = csv.writer(sys.stdout)
        w.writerow(SUMMARY_HEADER)
        for s in stats:
            w.writerow(s.summary_row())
    return EXIT_OK


COMMANDS = {"baseline": cmd_baseline, "solve": cmd_solve,
            "campaign": cmd_campaign, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BaselineError as exc:
        print(f"baseline did not converge: {exc}", file=sys.stderr)
        return EXIT_BASELINE


if __name__ == "__main__":
    sys.exit(main())
