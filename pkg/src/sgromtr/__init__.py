"""Risk-neutral optimization of parametrized nonlinear systems.

The package combines three ingredients: dimension-adaptive sparse-grid
quadrature over the stochastic space, minimum-residual reduced-order
models for cheap state/adjoint approximation, and a trust-region driver
that tolerates inexact objective and gradient evaluations by refining
both approximations on demand.
"""

from .sparse_grid import MultiIndexSet, assemble, cc_rule, integrate
from .hdm import BurgersControl, LinearDiffusion, QueryCounters, solve_primal
from .trust_opt import TrustRegionConfig, tr_run

__all__ = [
    "MultiIndexSet", "assemble", "cc_rule", "integrate",
    "BurgersControl", "LinearDiffusion", "QueryCounters", "solve_primal",
    "TrustRegionConfig", "tr_run",
]

__version__ = "0.1.0"
