"""Soft-fault model: random bit flips in the preconditioner output.

Each eligible hook call injects with probability ``injection_prob``.  An
event hits one emulated rank, chosen uniformly, and flips one bit in each of
``corrupt_count`` distinct entries of that rank's slice of ``e``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import Partition

BIT_POLICIES = ("uniform-any-bit", "mantissa-only", "exponent-only", "sign-only")
LOSS_FRACTIONS = (4e-6, 4e-4, 2e-3, 1e-2, 5e-2, 2e-1)

MANTISSA_BITS = range(0, 52)
EXPONENT_BITS = range(52, 63)
SIGN_BIT = 63


@dataclass
class FaultConfig:
    injection_prob: float = 0.02
    max_events: int = 10
    loss_fraction: float = 2e-3
    seed: int = 0
    bit_policy: str = "uniform-any-bit"

    def __post_init__(self):
        if not 0.0 <= self.injection_prob <= 1.0:
            raise ValueError(f"injection_prob must lie in [0, 1], got {self.injection_prob}")
        if not 0.0 < self.loss_fraction <= 1.0:
            raise ValueError(f"loss_fraction must lie in (0, 1], got {self.loss_fraction}")
        if self.max_events < 0:
            raise ValueError(f"max_events must be >= 0, got {self.max_events}")
        if self.bit_policy not in BIT_POLICIES:
            raise ValueError(f"unknown bit policy {self.bit_policy!r}; expected one of {BIT_POLICIES}")


@dataclass
class FaultEvent:
    n: int
    nu: int
    rank: int
    indices: np.ndarray  # global indices, sorted
    bits: np.ndarray
    before: np.ndarray
    after: np.ndarray
    detected: bool = False

    @property
    def count(self) -> int:
        return int(self.indices.size)

    def bit_summary(self) -> dict:
        b = self.bits
        return {
            "sign": int(np.count_nonzero(b == SIGN_BIT)),
            "exponent": int(np.count_nonzero((b >= 52) & (b < 63))),
            "mantissa": int(np.count_nonzero(b < 52)),
        }

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "nu": self.nu,
            "rank": self.rank,
            "count": self.count,
            "bits": self.bit_summary(),
            "detected": self.detected,
        }


def flip_bit(x, b):
    """Invert bit ``b`` (0 = lowest mantissa bit, 63 = sign) of binary64 ``x``.

    Works elementwise on arrays; scalars come back as Python floats.
    """
    bits = np.asarray(b, dtype=np.int64)
    if np.any((bits < 0) | (bits > 63)):
        raise ValueError("bit index must lie in [0, 63]")
    arr = np.array(x, dtype=np.float64)
    mask = np.left_shift(np.uint64(1), bits.astype(np.uint64))
    out = (arr.view(np.uint64) ^ mask).view(np.float64)
    if out.ndim == 0:
        return float(out)
    return out


def corrupt_count(loss_fraction: float, nglobal: int, local_len: int) -> int:
    """Entries hit per event: a share of the global array, capped by one rank."""
    wanted = int(np.floor(loss_fraction * nglobal + 0.5))
    return min(max(1, wanted), local_len)


def draw_bits(rng: np.random.Generator, count: int, policy: str) -> np.ndarray:
    if policy == "uniform-any-bit":
        return rng.integers(0, 64, size=count)
    if policy == "mantissa-only":
        return rng.integers(0, 52, size=count)
    if policy == "exponent-only":
        return rng.integers(52, 63, size=count)
    if policy == "sign-only":
        return np.full(count, SIGN_BIT, dtype=np.int64)
    raise ValueError(f"unknown bit policy {policy!r}")


def maybe_inject(e, partition: Partition, n, nu, cfg: FaultConfig, rng, log) -> FaultEvent | None:
    """Possibly corrupt ``e`` in place and append the event to ``log``."""
    if len(log) >= cfg.max_events:
        return None
    if rng.random() >= cfg.injection_prob:
        return None
    rank = int(rng.integers(partition.nranks))
    start, stop = partition.ranges[rank]
    local_len = stop - start
    count = corrupt_count(cfg.loss_fraction, partition.nglobal, local_len)
    idx = np.sort(rng.choice(local_len, size=count, replace=False)) + start
    bits = draw_bits(rng, count, cfg.bit_policy)
    before = e[idx].copy()
    e[idx] = flip_bit(before, bits)
    event = FaultEvent(n=n, nu=nu, rank=rank, indices=idx, bits=bits,
                       before=before, after=e[idx].copy())
    log.append(event)
    return event


@dataclass
class FaultInjector:
    """Hook object for the solvers; owns its generator and event log."""

    cfg: FaultConfig
    partition: Partition
    rng: np.random.Generator | None = None
    log: list = field(default_factory=list)

    def __post_init__(self):
        if self.rng is None:
            self.rng = np.random.default_rng(self.cfg.seed)

    def __call__(self, n, nu, e, partition=None, rng=None):
        return maybe_inject(e, partition or self.partition, n, nu, self.cfg,
                            rng if rng is not None else self.rng, self.log)

    @property
    def events(self) -> int:
        return len(self.log)
