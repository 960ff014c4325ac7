import math
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ftgcr.faults import (
    FaultConfig, FaultInjector, corrupt_count, draw_bits, flip_bit, maybe_inject,
)
from ftgcr.gcr import SolveConfig, gcr_solve
from ftgcr.grid import make_partition

from conftest import poisson_problem


def _oracle_flip(x, b):
    (u,) = struct.unpack("<Q", struct.pack("<d", x))
    return struct.unpack("<d", struct.pack("<Q", u ^ (1 << b)))[0]


def test_flip_examples():
    assert flip_bit(1.0, 63) == -1.0
    assert flip_bit(1.0, 62) == math.inf
    assert flip_bit(1.0, 0) == _oracle_flip(1.0, 0) == 1.0 + 2.0**-52
    assert math.isnan(flip_bit(1.5, 62))


@given(st.floats(allow_nan=False), st.integers(0, 63))
def test_flip_matches_bit_pattern_oracle(x, b):
    got = flip_bit(x, b)
    ref = _oracle_flip(x, b)
    assert struct.pack("<d", got) == struct.pack("<d", ref)
    back = flip_bit(got, b)
    assert struct.pack("<d", back) == struct.pack("<d", x)


def test_flip_vectorised_involution(rng):
    x = rng.standard_normal(10000) * 10.0 ** rng.integers(-300, 300, 10000)
    b = rng.integers(0, 64, 10000)
    y = flip_bit(x, b)
    assert np.array_equal(flip_bit(y, b).view(np.uint64), x.view(np.uint64))
    assert np.all((x.view(np.uint64) ^ y.view(np.uint64)) == (np.uint64(1) << b.astype(np.uint64)))


def test_flip_rejects_bad_bit():
    with pytest.raises(ValueError):
        flip_bit(1.0, 64)


@pytest.mark.parametrize("frac,nglobal,local,expected", [
    (0.2, 1452480, 13448, 13448),
    (4e-6, 1452480, 13448, 6),
    (1.0, 99, 10, 10),
    (1e-9, 1000, 10, 1),
    (2e-3, 8192, 228, 16),
])
def test_corrupt_count_examples(frac, nglobal, local, expected):
    assert corrupt_count(frac, nglobal, local) == expected


@pytest.mark.parametrize("policy,lo,hi", [
    ("uniform-any-bit", 0, 63), ("mantissa-only", 0, 51),
    ("exponent-only", 52, 62), ("sign-only", 63, 63),
])
def test_bit_policies(policy, lo, hi, rng):
    bits = draw_bits(rng, 5000, policy)
    assert bits.min() == lo and bits.max() == hi


@pytest.mark.parametrize("bad", [
    dict(injection_prob=1.5), dict(injection_prob=-0.1), dict(loss_fraction=0.0),
    dict(loss_fraction=1.1), dict(max_events=-1), dict(bit_policy="two-bits"),
])
def test_fault_config_rejects(bad):
    with pytest.raises(ValueError):
        FaultConfig(**bad)


def test_zero_probability_never_mutates():
    _, op, rhs = poisson_problem(32)
    part = make_partition(op.size, 4)
    seen = []

    class Spy:
        def __init__(self):
            self.inner = FaultInjector(FaultConfig(injection_prob=0.0), part)

        def __call__(self, n, nu, e, partition, rng):
            before = e.copy()
            self.inner(n, nu, e)
            seen.append(np.array_equal(before.view(np.uint64), e.view(np.uint64)))

    rep = gcr_solve(op, rhs, np.zeros_like(rhs), SolveConfig(tol=1e-9), hook=Spy())
    assert rep.converged and seen and all(seen)


def test_forced_single_event_on_first_call():
    part = make_partition(1000, 4)
    inj = FaultInjector(FaultConfig(injection_prob=1.0, max_events=1, loss_fraction=0.01), part)
    for call in range(20):
        e = np.ones(1000)
        inj(1 + call // 5, call % 5, e)
        if call == 0:
            assert inj.events == 1 and not np.all(e == 1.0)
        else:
            assert np.all(e == 1.0)
    ev = inj.log[0]
    assert (ev.n, ev.nu) == (1, 0) and ev.count == 10


def test_event_count_matches_bernoulli_model():
    part = make_partition(2000, 8)
    calls, q = 10000, 0.02
    inj = FaultInjector(FaultConfig(injection_prob=q, max_events=calls, seed=7), part)
    e = np.ones(2000)
    for i in range(calls):
        inj(i // 5 + 1, i % 5, e)
    mean, sd = calls * q, math.sqrt(calls * q * (1 - q))
    assert abs(inj.events - mean) <= 3 * sd


def test_capped_counts_match_truncated_binomial():
    from scipy.stats import binom
    part = make_partition(500, 5)
    q, cap, calls, runs = 0.02, 10, 100, 400
    counts = []
    for seed in range(runs):
        inj = FaultInjector(FaultConfig(injection_prob=q, max_events=cap, seed=seed), part)
        e = np.ones(500)
        for i in range(calls):
            inj(i // 5 + 1, i % 5, e)
        counts.append(inj.events)
    counts = np.array(counts)
    assert counts.max() <= cap
    k = np.arange(calls + 1)
    trunc = np.minimum(k, cap)
    pmf = binom.pmf(k, calls, q)
    mu = (trunc * pmf).sum()
    sd = math.sqrt(((trunc - mu) ** 2 * pmf).sum() / runs)
    assert abs(counts.mean() - mu) <= 3 * sd
    assert abs((counts == 0).mean() - binom.pmf(0, calls, q)) < 0.06


@given(st.integers(0, 2**63 - 1), st.sampled_from([4e-6, 4e-4, 2e-3, 1e-2, 5e-2, 2e-1]),
       st.integers(1, 36))
def test_events_local_and_well_formed(seed, frac, nranks):
    part = make_partition(4096, nranks)
    cfg = FaultConfig(injection_prob=0.5, max_events=10, loss_fraction=frac, seed=seed)
    inj = FaultInjector(cfg, part)
    rng = np.random.default_rng(seed)
    e = rng.standard_normal(4096)
    for i in range(40):
        inj(i // 5 + 1, i % 5, e)
    assert inj.events <= cfg.max_events
    for ev in inj.log:
        a, b = part.ranges[ev.rank]
        assert np.all((ev.indices >= a) & (ev.indices < b))
        assert np.unique(ev.indices).size == ev.count
        assert ev.count == corrupt_count(frac, 4096, b - a)
        assert np.all((ev.bits >= 0) & (ev.bits <= 63))
        flipped = ev.before.view(np.uint64) ^ ev.after.view(np.uint64)
        assert np.array_equal(flipped, np.uint64(1) << ev.bits.astype(np.uint64))


def test_replay_is_bitwise_identical():
    part = make_partition(3000, 6)
    cfg = FaultConfig(injection_prob=0.3, max_events=10, loss_fraction=2e-3, seed=99)

    def run():
        inj = FaultInjector(cfg, part)
        e = np.linspace(-1, 1, 3000)
        for i in range(60):
            inj(i // 5 + 1, i % 5, e)
        return inj.log, e

    (la, ea), (lb, eb) = run(), run()
    assert np.array_equal(ea.view(np.uint64), eb.view(np.uint64))
    assert [x.to_dict() for x in la] == [x.to_dict() for x in lb]
    assert all(np.array_equal(x.indices, y.indices) and np.array_equal(x.bits, y.bits)
               for x, y in zip(la, lb))


def test_event_serialisation():
    part = make_partition(100, 2)
    log = []
    e = np.ones(100)
    ev = maybe_inject(e, part, 3, 2, FaultConfig(injection_prob=1.0, loss_fraction=0.05,
                                                 bit_policy="sign-only"),
                      np.random.default_rng(0), log)
    d = ev.to_dict()
    assert d["n"] == 3 and d["nu"] == 2 and d["count"] == 5 and d["detected"] is False
    assert d["bits"] == {"sign": 5, "exponent": 0, "mantissa": 0}
    assert np.all(ev.after == -1.0)
