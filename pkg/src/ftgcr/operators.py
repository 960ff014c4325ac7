"""Generalised Poisson operator, potential-flow forcing and preconditioners.

The operator is ``G * div(rho * grad(phi))`` written in the terrain-following
frame, where ``G`` is the coordinate Jacobian.  Multiplying through by ``G``
turns it into ``div~(K grad~ phi)`` with a symmetric tensor

    K = G*rho * [[1, s], [s, s**2 + d**2]],   s = dzt/dx,  d = dzt/dz,

which is discretised as minus the gradient of a discrete energy: the diagonal
parts of ``K`` on cell faces (5/7-point), the cross term ``K_xz`` on cell
corners.  The result is symmetric by construction, non-positive, and kills
constants when the vertical walls are zero-flux.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg.lapack as lapack

from .grid import Grid

BC_MODES = ("neumann", "dirichlet")
PRECONDITIONERS = ("identity", "jacobi", "line-z")


class SingularPreconditionerError(ArithmeticError):
    pass


@dataclass(frozen=True)
class EllipticOperator:
    """Stencil coefficients of L on a ``(ny, nx, nz)`` grid.

    ``cx``/``cy`` couple a point to its +x/+y neighbour (periodic), ``cz`` to
    the point above (interior faces only), ``cz_bottom``/``cz_top`` are the
    Dirichlet wall terms (zero for zero-flux walls) and ``cxz`` the corner
    weights of the x-z cross derivative.
    """

    shape: tuple[int, int, int]
    cx: np.ndarray
    cy: np.ndarray | None
    cz: np.ndarray
    cz_bottom: np.ndarray
    cz_top: np.ndarray
    cxz: np.ndarray
    bc: str = "neumann"

    @property
    def size(self) -> int:
        ny, nx, nz = self.shape
        return ny * nx * nz

    @property
    def has_nullspace(self) -> bool:
        """True when constants are annihilated (all walls zero-flux)."""
        return self.bc == "neumann"

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.size != self.size:
            raise ValueError(f"field has {x.size} entries, operator expects {self.size}")
        u = x.reshape(self.shape)

        fx = self.cx * (np.roll(u, -1, axis=1) - u)
        out = fx - np.roll(fx, 1, axis=1)
        if self.cy is not None:
            fy = self.cy * (np.roll(u, -1, axis=0) - u)
            out += fy - np.roll(fy, 1, axis=0)

        fz = self.cz * (u[..., 1:] - u[..., :-1])
        out[..., :-1] += fz
        out[..., 1:] -= fz
        out[..., 0] -= self.cz_bottom * u[..., 0]
        out[..., -1] -= self.cz_top * u[..., -1]

        if self.cxz is not None:
            gx, gz = _corner_gradients(u)
            _add_corner_divergence(out, self.cxz * gz, self.cxz * gx)
        return out.reshape(-1)

    __call__ = apply

    def diagonal(self) -> np.ndarray:
        d = -(self.cx + np.roll(self.cx, 1, axis=1))
        if self.cy is not None:
            d = d - (self.cy + np.roll(self.cy, 1, axis=0))
        d[..., :-1] -= self.cz
        d[..., 1:] -= self.cz
        d[..., 0] -= self.cz_bottom
        d[..., -1] -= self.cz_top
        if self.cxz is not None:
            # corner (i+1/2, j+1/2) holds points (i,j) and (i+1,j+1) on its
            # main diagonal and (i+1,j), (i,j+1) on the anti-diagonal
            w = self.cxz
            wl = np.roll(w, 1, axis=1)
            d[..., :-1] += 0.5 * (wl - w)
            d[..., 1:] += 0.5 * (w - wl)
        return d.reshape(-1)

    def vertical_band(self) -> tuple[np.ndarray, np.ndarray]:
        """Diagonal and vertical coupling of L flattened to one tridiagonal.

        The off-diagonal entries joining the top of one column to the bottom
        of the next are zero, so a single banded solve treats every column
        independently.
        """
        off = np.zeros(self.shape)
        off[..., :-1] = self.cz
        return self.diagonal(), off.reshape(-1)[:-1].copy()


def _corner_gradients(u):
    """Undivided x and z differences at corners (i+1/2, j+1/2)."""
    a = u[..., :-1]
    b = u[..., 1:]
    ae = np.roll(a, -1, axis=1)
    be = np.roll(b, -1, axis=1)
    gx = 0.5 * ((ae + be) - (a + b))
    gz = 0.5 * ((b + be) - (a + ae))
    return gx, gz


def _add_corner_divergence(out, fx, fz):
    """``out -= Gx^T fx + Gz^T fz`` for corner fluxes ``fx``, ``fz``."""
    tx = 0.5 * (np.roll(fx, 1, axis=1) - fx)
    tz = 0.5 * (fz + np.roll(fz, 1, axis=1))
    out[..., :-1] -= tx - tz
    out[..., 1:] -= tx + tz


def _tensor(grid: Grid, rho):
    rho = np.broadcast_to(np.asarray(rho, dtype=float), grid.shape)
    m = grid.metric
    g = m.jacobian
    k11 = g * rho
    k12 = g * rho * m.dzt_dx
    k22 = g * rho * (m.dzt_dx**2 + m.dzt_dz**2)
    return k11, k12, k22


def _corner_average(a):
    lo = a[..., :-1]
    hi = a[..., 1:]
    return 0.25 * (lo + hi + np.roll(lo, -1, axis=1) + np.roll(hi, -1, axis=1))


def build_operator(grid: Grid, rho=1.0, bc: str = "neumann") -> EllipticOperator:
    if bc not in BC_MODES:
        raise ValueError(f"unknown boundary mode {bc!r}; expected one of {BC_MODES}")
    spec = grid.spec
    dx, dy, dz = spec.dx, spec.dy, spec.dz
    k11, k12, k22 = _tensor(grid, rho)

    cx = 0.5 * (k11 + np.roll(k11, -1, axis=1)) / dx**2
    cy = 0.5 * (k11 + np.roll(k11, -1, axis=0)) / dy**2 if grid.is_3d else None
    cz = 0.5 * (k22[..., :-1] + k22[..., 1:]) / dz**2
    if bc == "dirichlet":
        # phi = 0 on the wall half a cell away
        cz_bottom = 2.0 * k22[..., 0] / dz**2
        cz_top = 2.0 * k22[..., -1] / dz**2
    else:
        cz_bottom = np.zeros(grid.shape[:2])
        cz_top = np.zeros(grid.shape[:2])

    cxz = _corner_average(k12) / (dx * dz)
    if not np.any(cxz):
        cxz = None
    for name, c in (("cx", cx), ("cy", cy), ("cz", cz), ("cxz", cxz)):
        if c is not None and not np.all(np.isfinite(c)):
            raise ValueError(f"non-finite stencil coefficients in {name}")
    return EllipticOperator(
        shape=grid.shape, cx=cx, cy=cy, cz=cz,
        cz_bottom=cz_bottom, cz_top=cz_top, cxz=cxz, bc=bc,
    )


def build_rhs(grid: Grid, va: float, rho=1.0) -> np.ndarray:
    """Forcing ``G * div(rho * v_a)`` for a uniform horizontal ambient wind.

    Discretised as the operator applied to the (non-periodic) potential
    ``va * x``, so that ``L(phi) = R`` is the discrete statement of
    ``div(rho * (v_a - grad phi)) = 0`` with no flow through the walls.
    """
    if not np.isfinite(va):
        raise ValueError("ambient velocity must be finite")
    spec = grid.spec
    dx, dz = spec.dx, spec.dz
    k11, k12, _ = _tensor(grid, rho)

    fx = 0.5 * (k11 + np.roll(k11, -1, axis=1)) * (va / dx)
    out = fx - np.roll(fx, 1, axis=1)
    # va*x has undivided corner x-difference va*dx and no z-difference
    w = _corner_average(k12) / (dx * dz)
    _add_corner_divergence(out, np.zeros_like(w), w * (va * dx))
    return out.reshape(-1)


@dataclass(frozen=True)
class PreconditionerSpec:
    kind: str = "line-z"

    def __post_init__(self):
        if self.kind not in PRECONDITIONERS:
            raise ValueError(f"unknown preconditioner {self.kind!r}; expected one of {PRECONDITIONERS}")


class MatrixOperator:
    """Wrap an explicit (dense or sparse) matrix as an operator."""

    def __init__(self, matrix):
        self.matrix = matrix
        self.size = matrix.shape[0]

    def apply(self, x):
        x = np.asarray(x)
        if x.size != self.size:
            raise ValueError(f"field has {x.size} entries, operator expects {self.size}")
        return np.asarray(self.matrix @ x).reshape(-1)

    __call__ = apply

    def diagonal(self):
        return np.asarray(self.matrix.diagonal(), dtype=float).reshape(-1)


def _identity(r):
    return np.array(r, dtype=float, copy=True)


class _Jacobi:
    def __init__(self, op):
        d = op.diagonal()
        if np.any(d == 0) or not np.all(np.isfinite(d)):
            raise SingularPreconditionerError("operator diagonal has zero or non-finite entries")
        self.inv = 1.0 / d

    def __call__(self, r):
        return r * self.inv


class _LineZ:
    def __init__(self, op):
        if not hasattr(op, "vertical_band"):
            raise TypeError("line-z preconditioning needs a gridded operator")
        d, off = op.vertical_band()
        if np.any(d == 0):
            raise SingularPreconditionerError("operator diagonal has zero entries")
        dl, dd, du, du2, ipiv, info = lapack.dgttrf(off, d, off)
        if info != 0:
            raise SingularPreconditionerError(f"column tridiagonal factorisation failed (info={info})")
        self._factors = (dl, dd, du, du2, ipiv)

    def __call__(self, r):
        x, info = lapack.dgttrs(*self._factors, r)
        if info != 0:
            raise SingularPreconditionerError(f"column tridiagonal solve failed (info={info})")
        return x


def make_preconditioner(spec: PreconditionerSpec, op):
    """Factor ``spec`` for ``op`` once; returns ``r -> P^-1 r``."""
    if spec.kind == "identity":
        return _identity
    if spec.kind == "jacobi":
        return _Jacobi(op)
    return _LineZ(op)


def precondition(spec: PreconditionerSpec, op, r) -> np.ndarray:
    return make_preconditioner(spec, op)(np.asarray(r, dtype=float))
