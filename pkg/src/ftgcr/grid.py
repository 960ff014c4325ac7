"""Discrete domain: a periodic x-z slice (or x-y-z box) over a Gaussian hill.

Points are laid out on a ``(ny, nx, nz)`` array and flattened in C order, so
the vertical index runs fastest and a contiguous index range covers whole
columns.  Horizontal points sit at ``x_i = i*dx`` (periodic); vertical points
are cell centred in the terrain-following coordinate, ``zt_j = (j + 1/2)*dz``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class DomainSpec:
    nx: int = 128
    nz: int = 64
    ny: int = 1
    Lx: float = 2.0e6
    Ly: float = 2.0e6
    H: float = 40800.0
    h0: float = 4000.0
    hr: float = 3.0e5
    xc: float | None = None  # defaults to Lx / 2

    def __post_init__(self):
        if self.xc is None:
            object.__setattr__(self, "xc", 0.5 * self.Lx)
        if self.nx < 4 or self.nz < 4:
            raise ValueError(f"need nx >= 4 and nz >= 4, got nx={self.nx}, nz={self.nz}")
        if self.ny < 1:
            raise ValueError(f"ny must be >= 1, got {self.ny}")
        if not self.H > 0 or not self.Lx > 0 or not self.Ly > 0:
            raise ValueError("domain extents must be positive")
        if self.h0 < 0:
            raise ValueError(f"hill height must be non-negative, got {self.h0}")
        if self.h0 >= self.H:
            raise ValueError(
                f"hill height h0={self.h0} must stay below the lid H={self.H} "
                "(terrain-following transform is singular otherwise)"
            )
        if not self.hr > 0:
            raise ValueError(f"hill radius must be positive, got {self.hr}")
        if not 0.0 <= self.xc <= self.Lx:
            raise ValueError(f"hill centre xc={self.xc} outside [0, {self.Lx}]")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.ny, self.nx, self.nz)

    @property
    def npoints(self) -> int:
        return self.ny * self.nx * self.nz

    @property
    def dx(self) -> float:
        return self.Lx / self.nx

    @property
    def dy(self) -> float:
        return self.Ly / self.ny

    @property
    def dz(self) -> float:
        return self.H / self.nz


def hill_height(x, spec: DomainSpec):
    """Gaussian ridge ``h0 * exp(-((x - xc) / hr)**2)``."""
    s = (np.asarray(x, dtype=float) - spec.xc) / spec.hr
    return spec.h0 * np.exp(-s * s)


def to_terrain(x, z, spec: DomainSpec):
    """Physical height ``z`` to the terrain-following coordinate."""
    h = hill_height(x, spec)
    return spec.H * (np.asarray(z, dtype=float) - h) / (spec.H - h)


def from_terrain(x, zt, spec: DomainSpec):
    h = hill_height(x, spec)
    return h + np.asarray(zt, dtype=float) * (spec.H - h) / spec.H


@dataclass(frozen=True)
class Metric:
    """Point values of the coordinate-map derivatives.

    ``jacobian`` is dz/dzt (dimensionless, > 0), ``dzt_dz`` its reciprocal and
    ``dzt_dx`` the cross-derivative of the transformed coordinate (1/1, i.e.
    m per m).  All arrays have the grid shape.
    """

    jacobian: np.ndarray
    dzt_dx: np.ndarray
    dzt_dz: np.ndarray


@dataclass(frozen=True)
class Grid:
    spec: DomainSpec
    x: np.ndarray
    y: np.ndarray
    zt: np.ndarray
    h: np.ndarray  # terrain height per x
    z: np.ndarray  # physical height per point, grid shape
    metric: Metric = field(repr=False)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.spec.shape

    @property
    def npoints(self) -> int:
        return self.spec.npoints

    @property
    def is_3d(self) -> bool:
        return self.spec.ny > 1


def build_grid(spec: DomainSpec) -> Grid:
    """Build coordinates and terrain-following metric terms for ``spec``.

    The map is linear in zt, so dz/dzt = (H - h)/H is taken in closed form;
    dz/dx at fixed zt uses a periodic centred difference.
    """
    ny, nx, nz = spec.shape
    x = np.arange(nx) * spec.dx
    y = np.arange(ny) * spec.dy
    zt = (np.arange(nz) + 0.5) * spec.dz
    h = hill_height(x, spec)

    z2 = h[:, None] + zt[None, :] * (spec.H - h[:, None]) / spec.H
    dz_dzt = np.broadcast_to(((spec.H - h) / spec.H)[:, None], z2.shape)
    dz_dx = (np.roll(z2, -1, axis=0) - np.roll(z2, 1, axis=0)) / (2.0 * spec.dx)

    if np.any(dz_dzt <= 0):
        raise ValueError("terrain-following Jacobian is not positive everywhere")

    def full(a):
        return np.ascontiguousarray(np.broadcast_to(a, spec.shape))

    metric = Metric(
        jacobian=full(dz_dzt),
        dzt_dx=full(-dz_dx / dz_dzt),
        dzt_dz=full(1.0 / dz_dzt),
    )
    return Grid(spec=spec, x=x, y=y, zt=zt, h=h, z=full(z2), metric=metric)


@dataclass(frozen=True)
class Partition:
    """Contiguous, balanced split of ``[0, nglobal)`` over emulated ranks."""

    nranks: int
    nglobal: int
    ranges: tuple[tuple[int, int], ...]

    def local_size(self, rank: int) -> int:
        start, stop = self.ranges[rank]
        return stop - start

    def slices(self):
        return [slice(a, b) for a, b in self.ranges]


def make_partition(nglobal: int, nranks: int) -> Partition:
    if nranks < 1 or nranks > nglobal:
        raise ValueError(f"need 1 <= nranks <= nglobal, got nranks={nranks}, nglobal={nglobal}")
    base, extra = divmod(nglobal, nranks)
    ranges = []
    start = 0
    for rank in range(nranks):
        stop = start + base + (1 if rank < extra else 0)
        ranges.append((start, stop))
        start = stop
    return Partition(nranks=nranks, nglobal=nglobal, ranges=tuple(ranges))
