"""Fault-tolerant GCR(k) elliptic solver with a bit-flip injection harness."""

from .faults import FaultConfig, FaultEvent, FaultInjector, corrupt_count, flip_bit, maybe_inject
from .gcr import (
    BreakdownError, GcrWorkspace, SolveConfig, SolveReport, beta_coefficient,
    dot, gcr_solve, norm2, orthogonalize,
)
from .grid import DomainSpec, Grid, Partition, build_grid, hill_height, make_partition
from .operators import (
    EllipticOperator, MatrixOperator, PreconditionerSpec, SingularPreconditionerError,
    build_operator, build_rhs, make_preconditioner, precondition,
)
from .resilience import Checkpoint, FtPolicy, FtReport, detect, ftgcr_solve, restore, take_checkpoint

__version__ = "0.1.0"
