import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ftgcr.grid import (
    DomainSpec, build_grid, from_terrain, hill_height, make_partition, to_terrain,
)


def test_hill_peak_and_one_radius():
    spec = DomainSpec(h0=4000.0, hr=3.0e5, Lx=2.0e6)
    assert hill_height(spec.xc, spec) == 4000.0
    assert hill_height(spec.xc + spec.hr, spec) == pytest.approx(4000.0 * math.exp(-1.0), rel=1e-15)
    assert hill_height(spec.xc + spec.hr, spec) == pytest.approx(1471.52, abs=5e-3)


def test_hill_decays_away_from_centre():
    spec = DomainSpec()
    x = spec.xc + np.array([0.0, 1e5, 3e5, 1e6, 1e7])
    h = hill_height(x, spec)
    assert np.all(np.diff(h) < 0)
    assert h[-1] == 0.0


@given(st.floats(-5e6, 5e6))
def test_hill_symmetric_and_bounded(d):
    spec = DomainSpec()
    a = hill_height(spec.xc + d, spec)
    b = hill_height(spec.xc - d, spec)
    assert a == pytest.approx(b, rel=1e-12, abs=1e-300)
    assert 0.0 <= a <= spec.h0


@pytest.mark.parametrize("kwargs", [
    dict(nx=3), dict(nz=2), dict(h0=50000.0, H=40800.0), dict(h0=40800.0, H=40800.0),
    dict(hr=0.0), dict(xc=-1.0), dict(h0=-1.0),
])
def test_domain_rejects_invalid(kwargs):
    with pytest.raises(ValueError):
        DomainSpec(**kwargs)


def test_flat_terrain_is_identity():
    spec = DomainSpec(nx=16, nz=8, h0=0.0)
    g = build_grid(spec)
    m = g.metric
    np.testing.assert_allclose(m.jacobian, 1.0, rtol=0, atol=4e-16)
    np.testing.assert_allclose(m.dzt_dz, 1.0, rtol=0, atol=4e-16)
    assert np.all(m.dzt_dx == 0.0)
    np.testing.assert_allclose(g.z, np.broadcast_to(g.zt, g.shape), rtol=1e-15)


def test_terrain_transform_boundaries():
    spec = DomainSpec()
    x = np.linspace(0, spec.Lx, 11)
    h = hill_height(x, spec)
    np.testing.assert_allclose(to_terrain(x, h, spec), 0.0, atol=1e-9)
    np.testing.assert_allclose(to_terrain(x, spec.H, spec), spec.H, rtol=1e-15)
    z = h + 0.3 * (spec.H - h)
    np.testing.assert_allclose(from_terrain(x, to_terrain(x, z, spec), spec), z, rtol=1e-14)


def test_half_height_hill_doubles_vertical_metric():
    # xc falls on grid point nx/2; the map is linear in zt so the value holds
    # at every level, the lid included
    spec = DomainSpec(nx=16, nz=8, H=40800.0, h0=20400.0)
    g = build_grid(spec)
    i = spec.nx // 2
    assert g.x[i] == spec.xc
    np.testing.assert_allclose(g.metric.dzt_dz[0, i, :], 2.0, rtol=1e-14)
    # analytic Jacobian (H - h)/H = 1/2
    np.testing.assert_allclose(g.metric.jacobian[0, i, :], 0.5, rtol=1e-14)


def test_jacobian_positive_and_cross_metric_matches_analytic():
    spec = DomainSpec(nx=256, nz=8)
    g = build_grid(spec)
    assert np.all(g.metric.jacobian > 0)
    # analytic dzt/dx = -(dz/dx)|zt / (dz/dzt) with dz/dx|zt = h'(x) (1 - zt/H)
    x = g.x[:, None]
    hp = -2 * (x - spec.xc) / spec.hr**2 * hill_height(x, spec)
    jac = (spec.H - hill_height(x, spec)) / spec.H
    exact = -hp * (1 - g.zt[None, :] / spec.H) / jac
    err = np.abs(g.metric.dzt_dx[0] - exact).max()
    assert err < 1e-3 * np.abs(exact).max()


@pytest.mark.parametrize("nglobal,nranks,sizes", [
    (10, 1, {10}), (10, 3, {4, 3}), (399840, 36, {11106, 11107}),
])
def test_partition_examples(nglobal, nranks, sizes):
    p = make_partition(nglobal, nranks)
    got = [b - a for a, b in p.ranges]
    assert set(got) == sizes
    assert sum(got) == nglobal
    if (nglobal, nranks) == (10, 3):
        assert got == [4, 3, 3]


@pytest.mark.parametrize("nranks", [0, 11])
def test_partition_rejects(nranks):
    with pytest.raises(ValueError):
        make_partition(10, nranks)


@given(st.integers(1, 5000), st.data())
def test_partition_covers_exactly(nglobal, data):
    nranks = data.draw(st.integers(1, nglobal))
    p = make_partition(nglobal, nranks)
    idx = np.concatenate([np.arange(a, b) for a, b in p.ranges])
    assert np.array_equal(idx, np.arange(nglobal))
    sizes = [b - a for a, b in p.ranges]
    assert max(sizes) - min(sizes) <= 1
    assert p == make_partition(nglobal, nranks)
