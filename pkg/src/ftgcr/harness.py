"""Fault-injection campaigns: baseline, unprotected and protected arms.

A campaign solves the hill problem once without faults, then repeats it
``runs_per_arm`` times with random bit flips for plain GCR and for FT-GCR.
Runs that drew no fault are left out of the averages.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .faults import FaultConfig, FaultInjector
from .gcr import BreakdownError, SolveConfig, gcr_solve
from .grid import DomainSpec, build_grid, make_partition
from .operators import PreconditionerSpec, build_operator, build_rhs
from .resilience import FtPolicy, ftgcr_solve

log = logging.getLogger(__name__)

ARMS = ("baseline", "gcr", "ftgcr")
_ARM_ID = {arm: i for i, arm in enumerate(ARMS)}

SUMMARY_HEADER = ["grid", "loss_pct", "faults_per_run", "faults_detected",
                  "detection_rate_pct", "conv_ftgcr", "conv_gcr", "roft_pct"]
HISTOGRAM_HEADER = ["arm", "iterations", "percent"]


class ConfigError(ValueError):
    pass


class BaselineError(RuntimeError):
    pass


def _default_solver():
    return SolveConfig(k=5, tol=1e-6, tol_mode="relative", max_outer=200,
                       preconditioner=PreconditionerSpec("line-z"))


@dataclass
class CampaignConfig:
    domain: DomainSpec = field(default_factory=DomainSpec)
    nranks: int = 36
    solver: SolveConfig = field(default_factory=_default_solver)
    fault: FaultConfig = field(default_factory=FaultConfig)
    ft: FtPolicy = field(default_factory=FtPolicy)
    runs_per_arm: int = 100
    master_seed: int = 20240101
    va: float = 20.0
    bc: str = "neumann"
    workers: int = 1

    def __post_init__(self):
        if self.runs_per_arm < 1:
            raise ConfigError(f"runs_per_arm must be >= 1, got {self.runs_per_arm}")
        if not 1 <= self.nranks <= self.domain.npoints:
            raise ConfigError(f"nranks={self.nranks} outside [1, {self.domain.npoints}]")

    @property
    def grid_label(self) -> str:
        d = self.domain
        return f"{d.nx}x{d.nz}" if d.ny == 1 else f"{d.nx}x{d.ny}x{d.nz}"

    def to_dict(self) -> dict:
        out = asdict(self)
        out["solver"]["preconditioner"] = self.solver.preconditioner.kind
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "CampaignConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        try:
            if "domain" in data:
                data["domain"] = DomainSpec(**data["domain"])
            if "solver" in data:
                data["solver"] = SolveConfig(**data["solver"])
            if "fault" in data:
                data["fault"] = FaultConfig(**data["fault"])
            if "ft" in data:
                data["ft"] = FtPolicy(**data["ft"])
            return cls(**data)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "CampaignConfig":
        try:
            with open(path) as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
        return cls.from_dict(data)


@dataclass
class Problem:
    grid: object
    op: object
    rhs: np.ndarray
    phi0: np.ndarray
    partition: object


@lru_cache(maxsize=8)
def _problem(domain: DomainSpec, va: float, bc: str, nranks: int) -> Problem:
    grid = build_grid(domain)
    op = build_operator(grid, bc=bc)
    rhs = build_rhs(grid, va)
    return Problem(grid, op, rhs, np.zeros(grid.npoints), make_partition(grid.npoints, nranks))


def build_problem(cfg: CampaignConfig) -> Problem:
    return _problem(cfg.domain, float(cfg.va), cfg.bc, cfg.nranks)


def run_seed(master_seed: int, arm: str, index: int) -> int:
    ss = np.random.SeedSequence([master_seed, _ARM_ID[arm], index])
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass
class RunRecord:
    arm: str
    index: int
    seed: int
    converged: bool
    outer_iterations: int
    inner_steps: int
    operator_applications: int
    faults_injected: int
    faults_detected: int
    restores: int
    final_residual: float
    wallclock: float
    stop_reason: str = "converged"
    grid: str = ""
    loss_fraction: float = 0.0
    injection_prob: float = 0.0
    events: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, line: str) -> "RunRecord":
        return cls(**json.loads(line))


def run_one(cfg: CampaignConfig, arm: str, index: int = 0) -> RunRecord:
    """Run a single solve of ``arm``; faulted arms are seeded per run."""
    if arm not in ARMS:
        raise ValueError(f"unknown arm {arm!r}")
    prob = build_problem(cfg)
    seed = run_seed(cfg.master_seed, arm, index)
    t0 = time.perf_counter()
    events = []
    detected = restores = 0
    try:
        if arm == "baseline":
            rep = gcr_solve(prob.op, prob.rhs, prob.phi0, cfg.solver, partition=prob.partition)
        else:
            injector = FaultInjector(replace(cfg.fault, seed=seed), prob.partition)
            if arm == "gcr":
                rep = gcr_solve(prob.op, prob.rhs, prob.phi0, cfg.solver, hook=injector,
                                partition=prob.partition, rng=injector.rng)
            else:
                rep = ftgcr_solve(prob.op, prob.rhs, prob.phi0, cfg.solver, cfg.ft, injector)
                restores = rep.restores
            events = injector.log
            detected = sum(e.detected for e in events)
        converged, outer, inner, napp = rep.converged, rep.outer_iterations, rep.inner_steps, rep.operator_applications
        final, reason = rep.final_residual, rep.stop_reason
    except BreakdownError as exc:
        log.warning("%s run %d broke down: %s", arm, index, exc)
        converged, outer, inner, napp, final, reason = False, -1, -1, -1, float("nan"), "breakdown"
    return RunRecord(
        arm=arm, index=index, seed=seed, converged=converged,
        outer_iterations=outer, inner_steps=inner, operator_applications=napp,
        faults_injected=len(events), faults_detected=int(detected), restores=restores,
        final_residual=float(final), wallclock=time.perf_counter() - t0,
        stop_reason=reason, grid=cfg.grid_label,
        loss_fraction=cfg.fault.loss_fraction, injection_prob=cfg.fault.injection_prob,
        events=[e.to_dict() for e in events],
    )


def run_baseline(cfg: CampaignConfig) -> RunRecord:
    rec = run_one(cfg, "baseline")
    if not rec.converged:
        raise BaselineError(
            f"faultless solve did not converge within {cfg.solver.max_outer} outer iterations "
            f"(final residual {rec.final_residual:.3e})"
        )
    return rec


def _run_one_star(args):
    return run_one(*args)


@dataclass
class BatchStats:
    grid: str
    loss_fraction: float
    injection_prob: float
    baseline_iters: int
    avg_iters_gcr: float | None
    avg_iters_ftgcr: float | None
    faults_per_run: float | None
    faults_detected_per_run: float | None
    detection_rate_pct: float | None
    detection_rate_mean_pct: float | None
    roft_pct: float | None
    runs_kept: dict
    runs_discarded_nofault: dict
    runs_failed: dict
    histogram: dict
    empty: bool = False

    def summary_row(self) -> list:
        def fmt(v, nd=2):
            return "" if v is None else f"{v:.{nd}f}"
        return [self.grid, f"{100 * self.loss_fraction:g}", fmt(self.faults_per_run),
                fmt(self.faults_detected_per_run), fmt(self.detection_rate_pct, 1),
                fmt(self.avg_iters_ftgcr), fmt(self.avg_iters_gcr), fmt(self.roft_pct)]


def compute_roft(avg_gcr: float, avg_ftgcr: float, baseline: float) -> float:
    """Return on fault tolerance, in percent of the baseline iteration count."""
    if not baseline > 0:
        raise ValueError(f"baseline iteration count must be positive, got {baseline}")
    return 100.0 * (avg_gcr - avg_ftgcr) / baseline


def _kept(records, arm):
    return [r for r in records if r.arm == arm and r.faults_injected > 0]


def detection_rate(records) -> float | None:
    """Aggregate share of injected events that FT-GCR detected (percent)."""
    kept = _kept(records, "ftgcr")
    injected = sum(r.faults_injected for r in kept)
    if injected == 0:
        return None
    return 100.0 * sum(r.faults_detected for r in kept) / injected


def detection_rate_per_run(records) -> float | None:
    """Mean over kept FT-GCR runs of each run's own detection percentage."""
    kept = _kept(records, "ftgcr")
    if not kept:
        return None
    return float(np.mean([100.0 * r.faults_detected / r.faults_injected for r in kept]))


def histogram(records, arm) -> dict:
    """Percentage of (kept, converged) runs per nominal outer-iteration count."""
    if arm == "baseline":
        runs = [r for r in records if r.arm == arm and r.converged]
    else:
        runs = [r for r in _kept(records, arm) if r.converged]
    if not runs:
        return {}
    counts = Counter(r.outer_iterations for r in runs)
    return {it: 100.0 * c / len(runs) for it, c in sorted(counts.items())}


def compute_stats(records) -> BatchStats:
    """Statistics for one (grid, loss fraction, probability) batch."""
    base = [r for r in records if r.arm == "baseline"]
    if len(base) != 1:
        raise ValueError(f"expected exactly one baseline record, found {len(base)}")
    base = base[0]
    faulted = [r for r in records if r.arm != "baseline"]
    ref = faulted[0] if faulted else base

    kept, discarded, failed, avg = {}, {}, {}, {}
    for arm in ("gcr", "ftgcr"):
        arm_runs = [r for r in records if r.arm == arm]
        k = _kept(records, arm)
        ok = [r for r in k if r.converged]
        kept[arm] = len(k)
        discarded[arm] = len(arm_runs) - len(k)
        failed[arm] = len(k) - len(ok)
        avg[arm] = float(np.mean([r.outer_iterations for r in ok])) if ok else None

    ft_kept = _kept(records, "ftgcr")
    roft = None
    if avg["gcr"] is not None and avg["ftgcr"] is not None:
        roft = compute_roft(avg["gcr"], avg["ftgcr"], base.outer_iterations)
    return BatchStats(
        grid=base.grid,
        loss_fraction=ref.loss_fraction,
        injection_prob=ref.injection_prob,
        baseline_iters=base.outer_iterations,
        avg_iters_gcr=avg["gcr"],
        avg_iters_ftgcr=avg["ftgcr"],
        faults_per_run=float(np.mean([r.faults_injected for r in ft_kept])) if ft_kept else None,
        faults_detected_per_run=float(np.mean([r.faults_detected for r in ft_kept])) if ft_kept else None,
        detection_rate_pct=detection_rate(records),
        detection_rate_mean_pct=detection_rate_per_run(records),
        roft_pct=roft,
        runs_kept=kept,
        runs_discarded_nofault=discarded,
        runs_failed=failed,
        histogram={arm: histogram(records, arm) for arm in ARMS},
        empty=not (kept["gcr"] or kept["ftgcr"]),
    )


def run_campaign(cfg: CampaignConfig, out_dir=None):
    """Baseline plus ``runs_per_arm`` faulted runs per arm.

    Returns ``(records, stats)``.  With ``out_dir`` the records, summary and
    histogram files are written there.
    """
    baseline = run_baseline(cfg)
    jobs = [(cfg, arm, i) for arm in ("gcr", "ftgcr") for i in range(cfg.runs_per_arm)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            runs = list(pool.map(_run_one_star, jobs, chunksize=8))
    else:
        runs = [run_one(*job) for job in jobs]
    records = [baseline] + runs
    stats = compute_stats(records)
    if out_dir is not None:
        write_outputs(out_dir, records, [stats])
    return records, stats


def group_records(records) -> list[list]:
    """Split a mixed record list into batches sharing grid, loss and probability.

    Baseline records carry the batch's fault settings, so they group with it.
    """
    groups: dict = {}
    for r in records:
        groups.setdefault((r.grid, r.loss_fraction, r.injection_prob), []).append(r)
    return list(groups.values())


def write_jsonl(path, records) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(r.to_json() + "\n")


def read_jsonl(path) -> list[RunRecord]:
    with open(path) as f:
        return [RunRecord.from_json(line) for line in f if line.strip()]


def write_summary_csv(path, stats_list) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SUMMARY_HEADER)
        for s in stats_list:
            w.writerow(s.summary_row())


def write_histogram_csv(path, stats: BatchStats) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(HISTOGRAM_HEADER)
        for arm in ARMS:
            for it, pct in stats.histogram.get(arm, {}).items():
                w.writerow([arm, it, f"{pct:.2f}"])


def write_outputs(out_dir, records, stats_list) -> None:
    """records.jsonl, summary.csv and histogram.csv (one per batch if several)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / "records.jsonl", records)
    write_summary_csv(out / "summary.csv", stats_list)
    if len(stats_list) == 1:
        write_histogram_csv(out / "histogram.csv", stats_list[0])
    else:
        for s in stats_list:
            sub = out / f"loss_{100 * s.loss_fraction:g}pct_q{s.injection_prob:g}"
            sub.mkdir(exist_ok=True)
            write_histogram_csv(sub / "histogram.csv", s)
