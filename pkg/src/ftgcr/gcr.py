"""Preconditioned GCR(k) with a post-preconditioner hook.

Notation follows the usual GCR(k) presentation: residual ``r = L(phi) - R``,
search directions ``p`` with images ``Lp``, inner counter ``nu`` and outer
counter ``n``.  The step length and orthogonalisation coefficients carry the
residual-minimising sign, so ``||r||`` cannot grow in exact arithmetic.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .grid import Partition
from .operators import PreconditionerSpec, make_preconditioner

TOL_MODES = ("absolute", "relative")


class BreakdownError(ArithmeticError):
    """Zero search-direction image or a non-finite residual in a clean solve."""


def dot(a, b, partition: Partition | None = None, workers: int = 1) -> float:
    """Inner product with a fixed reduction order.

    Each emulated rank reduces its own slice; rank partials are then added
    left to right.  The result depends on the partition but never on the
    number of worker threads.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    prod = a * b
    if partition is None:
        return float(np.add.reduce(prod))
    slices = partition.slices()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            partials = list(pool.map(lambda s: np.add.reduce(prod[s]), slices))
    else:
        partials = [np.add.reduce(prod[s]) for s in slices]
    total = 0.0
    for part in partials:
        total += float(part)
    return total


def norm2(a, partition: Partition | None = None, workers: int = 1) -> float:
    return math.sqrt(dot(a, a, partition, workers))


def beta_coefficient(r, Lp, partition: Partition | None = None, *, LpLp: float | None = None) -> float:
    """Step length minimising ``||r + beta * Lp||``."""
    den = dot(Lp, Lp, partition) if LpLp is None else LpLp
    if den == 0.0:
        raise BreakdownError("search direction has a zero operator image")
    return -dot(r, Lp, partition) / den


def orthogonalize(e, Le, basis, images, partition: Partition | None = None, *, denoms=None):
    """Make ``Le`` orthogonal to ``images`` and apply the same combination to ``e``.

    Returns ``(p, Lp)`` with ``Lp = Le + sum(alpha_l * images[l])`` and
    ``p = e + sum(alpha_l * basis[l])``; no operator application is needed.
    """
    if denoms is None:
        denoms = [dot(v, v, partition) for v in images]
    p = np.array(e, dtype=float, copy=True)
    Lp = np.array(Le, dtype=float, copy=True)
    for pl, Lpl, den in zip(basis, images, denoms):
        if den == 0.0:
            raise BreakdownError("basis direction has a zero operator image")
        alpha = -dot(Le, Lpl, partition) / den
        p += alpha * pl
        Lp += alpha * Lpl
    return p, Lp


@dataclass
class SolveConfig:
    k: int = 5
    tol: float = 1e-10
    max_outer: int = 200
    preconditioner: PreconditionerSpec = field(default_factory=PreconditionerSpec)
    tol_mode: str = "absolute"

    def __post_init__(self):
        if isinstance(self.preconditioner, str):
            self.preconditioner = PreconditionerSpec(self.preconditioner)
        if self.k < 1:
            raise ValueError(f"Krylov space size must be >= 1, got {self.k}")
        if not self.tol > 0:
            raise ValueError(f"tolerance must be positive, got {self.tol}")
        if self.max_outer < 1:
            raise ValueError(f"max_outer must be >= 1, got {self.max_outer}")
        if self.tol_mode not in TOL_MODES:
            raise ValueError(f"tol_mode must be one of {TOL_MODES}, got {self.tol_mode!r}")


@dataclass
class GcrWorkspace:
    phi: np.ndarray
    r: np.ndarray
    p: list
    Lp: list
    LpLp: list  # cached <Lp_l, Lp_l>
    n: int = 0
    nu: int = 0


@dataclass
class SolveReport:
    converged: bool
    outer_iterations: int
    inner_steps: int
    operator_applications: int
    residual_history: list
    final_residual: float
    initial_residual: float
    stop_reason: str  # "converged", "max_outer" or "nonfinite"
    phi: np.ndarray = field(repr=False)


class _CountingOperator:
    def __init__(self, op):
        self.op = op
        self.calls = 0

    def __call__(self, x):
        self.calls += 1
        return self.op.apply(x)


def _seed_workspace(apply, precond, phi, r, k, partition):
    p0 = precond(r)
    Lp0 = apply(p0)
    return GcrWorkspace(
        phi=phi, r=r,
        p=[p0] + [None] * k, Lp=[Lp0] + [None] * k,
        LpLp=[dot(Lp0, Lp0, partition)] + [None] * k,
    )


def _iterate(op, rhs, phi0, cfg: SolveConfig, hook=None, partition=None, rng=None, guard=None):
    """Shared GCR(k) loop.  ``guard`` (optional) supplies fault tolerance.

    The guard sees every accepted-candidate step after the exit check through
    ``guard.check(ws, norm_new, norm_old)``; returning True means it has
    restored ``ws`` and the current outer iteration must be restarted.
    """
    rhs = np.asarray(rhs, dtype=float)
    if rhs.size != np.asarray(phi0).size:
        raise ValueError("right-hand side and initial guess differ in size")
    apply = _CountingOperator(op)
    precond = make_preconditioner(cfg.preconditioner, op)
    k = cfg.k

    eps = cfg.tol * (norm2(rhs, partition) if cfg.tol_mode == "relative" else 1.0)
    history: list[float] = []
    steps = 0

    def report(ws, converged, reason, rnorm):
        return SolveReport(
            converged=converged,
            outer_iterations=ws.n,
            inner_steps=steps,
            operator_applications=apply.calls,
            residual_history=history,
            final_residual=rnorm,
            initial_residual=r0norm,
            stop_reason=reason,
            phi=ws.phi,
        )

    phi = np.array(phi0, dtype=float, copy=True)
    r = apply(phi) - rhs
    r0norm = norm2(r, partition)
    if r0norm <= eps:
        ws = GcrWorkspace(phi=phi, r=r, p=[], Lp=[], LpLp=[])
        return report(ws, True, "converged", r0norm)

    ws = _seed_workspace(apply, precond, phi, r, k, partition)
    if guard is not None:
        def reinit():
            phi = np.array(phi0, dtype=float, copy=True)
            return _seed_workspace(apply, precond, phi, apply(phi) - rhs, k, partition)
        guard.start(ws, reinit)
    norm_old = r0norm

    while ws.n < cfg.max_outer:
        ws.n += 1
        restarted = False
        for nu in range(k):
            ws.nu = nu
            beta = beta_coefficient(ws.r, ws.Lp[nu], partition, LpLp=ws.LpLp[nu])
            phi_new = ws.phi + beta * ws.p[nu]
            r_new = ws.r + beta * ws.Lp[nu]
            norm_new = norm2(r_new, partition)
            steps += 1
            history.append(norm_new)

            if norm_new <= eps:
                ws.phi, ws.r = phi_new, r_new
                return report(ws, True, "converged", norm_new)

            if guard is not None and guard.check(ws, norm_new, norm_old):
                norm_old = norm2(ws.r, partition)
                restarted = True
                break

            ws.phi, ws.r = phi_new, r_new
            norm_old = norm_new
            if not math.isfinite(norm_new) and guard is None:
                if hook is None:
                    raise BreakdownError(f"non-finite residual norm at n={ws.n}, nu={nu}")
                # unprotected run with a corrupted state can no longer converge
                return report(ws, False, "nonfinite", norm_new)

            e = precond(ws.r)
            if hook is not None:
                hook(ws.n, nu, e, partition, rng)
            Le = apply(e)
            p_new, Lp_new = orthogonalize(
                e, Le, ws.p[: nu + 1], ws.Lp[: nu + 1], partition, denoms=ws.LpLp[: nu + 1]
            )
            ws.p[nu + 1] = p_new
            ws.Lp[nu + 1] = Lp_new
            ws.LpLp[nu + 1] = dot(Lp_new, Lp_new, partition)

        if not restarted:
            ws.p[0], ws.Lp[0], ws.LpLp[0] = ws.p[k], ws.Lp[k], ws.LpLp[k]

    return report(ws, False, "max_outer", norm_old)


def gcr_solve(op, rhs, phi0, cfg: SolveConfig, hook=None, *, partition=None, rng=None) -> SolveReport:
    """Solve ``L(phi) = rhs`` with plain GCR(k).

    ``hook(n, nu, e, partition, rng)`` is invoked on every preconditioner
    output inside the inner loop and may modify ``e`` in place; the initial
    ``p0 = P^-1(r0)`` is not hooked.  Without a hook a non-finite residual
    raises :class:`BreakdownError`.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        return _iterate(op, rhs, phi0, cfg, hook=hook, partition=partition, rng=rng)
