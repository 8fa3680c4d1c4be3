"""Mesh-free 2D vortex particle simulation kit.

Diffusion acts by redistributing circulation between neighbouring
particles through non-negative stencils computed per particle with a
small phase-I simplex solve; convection comes from smoothed Biot-Savart
summation.  Both are integrated simultaneously, and the decaying-vortex
benchmark validates the whole pipeline.
"""

from .backends import JIT_ENABLED, set_threads, warmup
from .cloud import ParticleCloud, SimulationConfig, read_snapshot, write_snapshot
from .diagnostics import (
    DiagnosticsRecord,
    energy,
    invariants,
    lamb_oseen_velocity,
    lamb_oseen_vorticity,
    velocity_error_l2,
)
from .diffusion import (
    DiffusionOperator,
    apply,
    build,
    select_excluded,
    stable_dt_aposteriori,
    stable_dt_apriori,
)
from .grid import (
    NeighborhoodView,
    SpatialIndex,
    ensure_coverage,
    neighborhood,
    segment_id,
    small_neighborhood,
)
from .integrator import RunOptions, StepPlan, euler_heat_step, plan_step, rk4_ns_step, run
from .stencil import (
    InfeasibleStencilError,
    MomentSystem,
    Stencil,
    assemble,
    brute_force_feasible,
    compute_stencil,
    lu_solve,
    solve_nonnegative,
)
from .velocity import kernel, kernel_smoothed, velocity_direct, velocity_treecode

__version__ = "0.1.0"

__all__ = [
    "JIT_ENABLED",
    "set_threads",
    "warmup",
    "ParticleCloud",
    "SimulationConfig",
    "read_snapshot",
    "write_snapshot",
    "DiagnosticsRecord",
    "energy",
    "invariants",
    "lamb_oseen_velocity",
    "lamb_oseen_vorticity",
    "velocity_error_l2",
    "DiffusionOperator",
    "apply",
    "build",
    "select_excluded",
    "stable_dt_aposteriori",
    "stable_dt_apriori",
    "NeighborhoodView",
    "SpatialIndex",
    "ensure_coverage",
    "neighborhood",
    "segment_id",
    "small_neighborhood",
    "RunOptions",
    "StepPlan",
    "euler_heat_step",
    "plan_step",
    "rk4_ns_step",
    "run",
    "InfeasibleStencilError",
    "MomentSystem",
    "Stencil",
    "assemble",
    "brute_force_feasible",
    "compute_stencil",
    "lu_solve",
    "solve_nonnegative",
    "kernel",
    "kernel_smoothed",
    "velocity_direct",
    "velocity_treecode",
    "__version__",
]
