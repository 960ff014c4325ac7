import numpy as np
import pytest

from ftgcr.grid import DomainSpec, build_grid
from ftgcr.operators import build_operator

ACCEPTANCE_LINES = []


def record_criterion(name, ok, detail=""):
    line = f"[{'PASS' if ok else 'FAIL'}] {name}" + (f" :: {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def poisson_problem(n=64, nz=None, bc="dirichlet", seed=0):
    """Flat, unit-spaced box: the plain 5-point Poisson operator plus a random rhs."""
    nz = nz or n
    spec = DomainSpec(nx=n, nz=nz, Lx=float(n), H=float(nz), h0=0.0, hr=1.0)
    grid = build_grid(spec)
    op = build_operator(grid, bc=bc)
    rhs = np.random.default_rng(seed).standard_normal(grid.npoints)
    if bc == "neumann":
        rhs -= rhs.mean()
    return grid, op, rhs


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def hill_small():
    spec = DomainSpec(nx=32, nz=16, Lx=2.0e6)
    grid = build_grid(spec)
    return grid, build_operator(grid)


def random_snd(rng, size, lo=1.0, hi=10.0):
    """Random symmetric negative-definite matrix with spectrum in [-hi, -lo]."""
    q, _ = np.linalg.qr(rng.standard_normal((size, size)))
    return -(q * rng.uniform(lo, hi, size)) @ q.T


def krylov_min_residual(A, P, r0, m):
    """min ||r0 + A y|| over y in span{P r0, (PA) P r0, ...} of dimension m (Arnoldi + lstsq)."""
    v = P @ r0
    basis = [v / np.linalg.norm(v)]
    for _ in range(m - 1):
        w = P @ (A @ basis[-1])
        for b in basis:
            w = w - (b @ w) * b
        for b in basis:
            w = w - (b @ w) * b
        basis.append(w / np.linalg.norm(w))
    V = np.column_stack(basis)
    c, *_ = np.linalg.lstsq(A @ V, -r0, rcond=None)
    return np.linalg.norm(r0 + A @ V @ c)
