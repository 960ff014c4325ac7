"""Fault-tolerant GCR(k): residual-monotonicity detection and in-memory rollback.

A copy of ``[phi, r, p0, Lp0]`` is kept from the start of the most recent
outer iteration whose first step passed the norm check.  A step whose
residual norm fails to decrease restores that copy and retries the outer
iteration under the same nominal counter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .gcr import SolveConfig, SolveReport, _iterate


@dataclass
class FtPolicy:
    enabled: bool = True
    max_consecutive_restores: int = 3
    nonfinite_is_fault: bool = True

    def __post_init__(self):
        if self.max_consecutive_restores < 1:
            raise ValueError("max_consecutive_restores must be >= 1")


@dataclass
class Checkpoint:
    phi_star: np.ndarray
    r_star: np.ndarray
    p0_star: np.ndarray
    Lp0_star: np.ndarray
    taken_at: int
    Lp0_norm2: float  # cached <Lp0, Lp0>; a scalar, not a mesh array
    log_mark: int = 0  # fault-log length when the copy was made


@dataclass
class FtReport(SolveReport):
    faults_detected: int = 0
    restores: int = 0
    initial_restores: int = 0
    checkpoints_taken: int = 0
    undetected_overruns: int = 0
    events: list | None = None


def detect(norm_new: float, norm_old: float, policy: FtPolicy) -> bool:
    """True when the residual norm did not strictly decrease.

    A plain ``>=`` lets NaN through, so non-finite norms are flagged
    separately when the policy asks for it.
    """
    if policy.nonfinite_is_fault and not math.isfinite(norm_new):
        return True
    return norm_new >= norm_old


def take_checkpoint(ws, log_mark: int = 0) -> Checkpoint:
    return Checkpoint(
        phi_star=ws.phi.copy(),
        r_star=ws.r.copy(),
        p0_star=ws.p[0].copy(),
        Lp0_star=ws.Lp[0].copy(),
        taken_at=ws.n,
        Lp0_norm2=ws.LpLp[0],
        log_mark=log_mark,
    )


def restore(ws, ckpt: Checkpoint | None, reinit=None) -> None:
    """Reset ``ws`` to ``ckpt`` so the next outer pass repeats ``ckpt.taken_at``.

    Without a checkpoint the solve restarts from the initial guess through
    ``reinit``, which must rebuild a fresh workspace.
    """
    if ckpt is None:
        if reinit is None:
            raise ValueError("no checkpoint to restore and no way to rebuild the initial state")
        fresh = reinit()
        ws.phi, ws.r = fresh.phi, fresh.r
        ws.p[0], ws.Lp[0], ws.LpLp[0] = fresh.p[0], fresh.Lp[0], fresh.LpLp[0]
        ws.n = 0
    else:
        ws.phi = ckpt.phi_star.copy()
        ws.r = ckpt.r_star.copy()
        ws.p[0] = ckpt.p0_star.copy()
        ws.Lp[0] = ckpt.Lp0_star.copy()
        ws.LpLp[0] = ckpt.Lp0_norm2
        ws.n = ckpt.taken_at - 1
    ws.nu = 0


class _Recovery:
    """Guard plugged into the shared GCR loop."""

    def __init__(self, policy: FtPolicy, log: list | None):
        self.policy = policy
        self.log = log if log is not None else []
        self.ckpt: Checkpoint | None = None
        self.reinit = None
        self.consecutive = 0
        self.suspended = False
        self.faults_detected = 0
        self.restores = 0
        self.initial_restores = 0
        self.checkpoints_taken = 0
        self.undetected_overruns = 0

    def start(self, ws, reinit):
        self.reinit = reinit

    def check(self, ws, norm_new, norm_old) -> bool:
        if not self.suspended and detect(norm_new, norm_old, self.policy):
            if self.consecutive < self.policy.max_consecutive_restores:
                self._rollback(ws)
                return True
            # stagnation the rollback cannot cure; stop checking until the
            # next checkpoint
            self.suspended = True
            self.undetected_overruns += 1
        if ws.nu == 0:
            # a retry passes its nu = 0 check again; only a checkpoint at a
            # new outer index counts as progress for the guard
            if self.ckpt is None or ws.n > self.ckpt.taken_at:
                self.consecutive = 0
                self.suspended = False
            self.ckpt = take_checkpoint(ws, len(self.log))
            self.checkpoints_taken += 1
        return False

    def _rollback(self, ws):
        self.faults_detected += 1
        self.restores += 1
        self.consecutive += 1
        mark = self.ckpt.log_mark if self.ckpt is not None else 0
        for event in self.log[mark:]:
            event.detected = True
        if self.ckpt is None:
            self.initial_restores += 1
        restore(ws, self.ckpt, self.reinit)


def ftgcr_solve(op, rhs, phi0, cfg: SolveConfig, policy: FtPolicy | None = None,
                injector=None, *, partition=None) -> FtReport:
    """GCR(k) with fault detection and rollback.

    ``injector`` is any hook object with ``partition``, ``rng`` and ``log``
    attributes (see :class:`ftgcr.faults.FaultInjector`); events it logs are
    flagged ``detected`` when a rollback erases them.  With the policy
    disabled this is exactly :func:`ftgcr.gcr.gcr_solve`.

    ``faults_detected`` counts positive norm checks acted upon, so it may
    include detections not caused by an injected event.
    """
    policy = policy or FtPolicy()
    hook = injector
    rng = getattr(injector, "rng", None)
    log = getattr(injector, "log", None)
    if partition is None:
        partition = getattr(injector, "partition", None)
    guard = _Recovery(policy, log) if policy.enabled else None
    with np.errstate(over="ignore", invalid="ignore"):
        base = _iterate(op, rhs, phi0, cfg, hook=hook, partition=partition, rng=rng, guard=guard)
    report = FtReport(**{f.name: getattr(base, f.name) for f in fields(SolveReport)})
    if guard is not None:
        report.faults_detected = guard.faults_detected
        report.restores = guard.restores
        report.initial_restores = guard.initial_restores
        report.checkpoints_taken = guard.checkpoints_taken
        report.undetected_overruns = guard.undetected_overruns
    report.events = list(log) if log is not None else []
    return report
