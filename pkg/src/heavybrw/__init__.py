"""Moments of branching random walks with heavy-tailed jumps on Z^d."""

__version__ = "0.1.0"

from .kernel import (  # noqa: E402
    BranchingLaw,
    KernelError,
    TransitionKernel,
    build_branching,
    build_kernel,
    g_n,
    symbol,
)
from .spectral import beta_c, classify, green, solve_eigenvalue  # noqa: E402
from .moments import MomentSeries, MomentSolver, TruncatedLattice  # noqa: E402
from .simulate import SimulationConfig, estimate  # noqa: E402
from .asymptotics import fit, predict, verify  # noqa: E402

__all__ = [
    "BranchingLaw", "KernelError", "MomentSeries", "MomentSolver", "SimulationConfig",
    "TransitionKernel", "TruncatedLattice", "beta_c", "build_branching", "build_kernel",
    "classify", "estimate", "fit", "g_n", "green", "predict", "solve_eigenvalue", "symbol",
    "verify", "__version__",
]
