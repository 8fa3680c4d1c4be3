"""Time loop for the particle system.

Two modes share one protocol: seed a single point vortex, then march to
``t_end``.  Heat mode freezes the positions and applies the diffusion
operator with forward Euler steps; full mode advances positions and
circulations together with classical RK4, so convection and diffusion are
integrated simultaneously rather than split.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from time import perf_counter

import numpy as np

from .cloud import ParticleCloud, SimulationConfig
from .diagnostics import DiagnosticsRecord, energy, invariants
from .diffusion import (
    DiffusionOperator,
    StencilCache,
    apply as apply_operator,
    build as build_operator,
    select_excluded,
    stable_dt_aposteriori,
    stable_dt_apriori,
)
from .grid import SpatialIndex, _coverage_pass, insertion_directions
from .velocity import velocity_direct, velocity_treecode

__all__ = [
    "StepPlan",
    "RunOptions",
    "plan_step",
    "euler_heat_step",
    "rk4_ns_step",
    "run",
]

# stop marching when the remaining interval drops below this relative slack
_T_END_SLACK = 1e-12


@dataclass(frozen=True)
class StepPlan:
    """Chosen step size and the bounds that competed for it."""

    dt: float
    dt_visc: float
    dt_cfl: float
    limited_by: str  # "viscous" | "cfl" | "t_end"


@dataclass
class RunOptions:
    """Runtime choices that do not alter the physics of a run."""

    velocity: str = "treecode"  # particle velocity backend: "direct" | "treecode"
    theta: float = 0.5
    p: int = 16
    frame: float = 0.0          # rotation of the segment partition, radians
    small_first: bool = True
    stencil_cache: bool = True  # reuse rows between fixed-position steps
    max_steps: int | None = None

    def __post_init__(self) -> None:
        if self.velocity not in ("direct", "treecode"):
            raise ValueError(f"unknown velocity backend {self.velocity!r}")


def plan_step(cloud: ParticleCloud, op: DiffusionOperator | None,
              velocities: np.ndarray | None, config: SimulationConfig,
              t: float, enforce_aposteriori: bool = False) -> StepPlan:
    """Pick the next step size.

    The viscous bound is the safety-scaled worst case ``(r h)^2 / (4 nu)``;
    heat mode additionally enforces the exact per-operator bound.  The
    convective bound is the safety-scaled ``h / max |u_i|`` when velocities
    are given.  The step never overshoots ``t_end``.
    """
    dt_visc = config.dt_safety * stable_dt_apriori(config)
    if enforce_aposteriori and op is not None:
        dt_visc = min(dt_visc, stable_dt_aposteriori(op, config.nu))
    if velocities is None or velocities.size == 0:
        dt_cfl = math.inf
    else:
        vmax = float(np.sqrt(
            np.max(velocities[:, 0] ** 2 + velocities[:, 1] ** 2)))
        dt_cfl = config.cfl_safety * config.h / vmax if vmax > 0.0 else math.inf
    remaining = config.t_end - t
    dt = min(dt_visc, dt_cfl, remaining)
    if not dt > 0.0:
        raise ValueError(f"non-positive step dt={dt} at t={t}")
    if remaining <= min(dt_visc, dt_cfl):
        limited_by = "t_end"
    elif dt_cfl < dt_visc:
        limited_by = "cfl"
    else:
        limited_by = "viscous"
    return StepPlan(dt=dt, dt_visc=dt_visc, dt_cfl=dt_cfl, limited_by=limited_by)


def _coverage_sweep(cloud: ParticleCloud, index: SpatialIndex,
                    diffused: np.ndarray, config: SimulationConfig,
                    frame: float) -> int:
    """Fill every empty segment of every diffused particle with an empty particle.

    Serial sweep in ascending particle order; insertions made for earlier
    particles count as segment members for later ones.  Returns the number
    of particles appended to the cloud.
    """
    if diffused.shape[0] == 0:
        return 0
    if index.n_extra:
        raise ValueError("coverage sweep needs a freshly built index")
    dir_x, dir_y = insertion_directions(frame)
    cap = 8 * diffused.shape[0]
    ins_x = np.empty(cap)
    ins_y = np.empty(cap)
    lo, hi = config.annulus
    n_ins = _coverage_pass(
        *index.arrays(), diffused, config.h, lo * lo, hi * hi,
        dir_x, dir_y, math.cos(frame), math.sin(frame), ins_x, ins_y,
    )
    if n_ins:
        cloud.extend_empty(np.column_stack([ins_x[:n_ins], ins_y[:n_ins]]))
    return int(n_ins)


def _check_excluded_budget(circulations: np.ndarray, config: SimulationConfig,
                           op: DiffusionOperator) -> None:
    """Abort when fallback exclusions push far past the c_diff budget.

    Judged against the circulations the step's skip split was selected
    from; mid-step stage values do not count (empty particles absorb
    circulation within a step and only become diffusion sources on the
    next one).
    """
    if op.excluded.shape[0] == 0:
        return
    lost = float(np.abs(circulations[op.excluded]).sum())
    if lost == 0.0:
        return
    total = float(np.abs(circulations).sum())
    budget = config.c_diff * config.h ** (config.order + 2) * total
    if lost > 10.0 * budget:
        raise RuntimeError(
            f"excluded circulation {lost:.3e} exceeds 10x the skip budget "
            f"{budget:.3e}; stencil fallbacks have degraded this run")


def euler_heat_step(cloud: ParticleCloud, config: SimulationConfig, t: float,
                    step: int = 0, opts: RunOptions | None = None,
                    cache: StencilCache | None = None) -> DiagnosticsRecord:
    """One forward Euler step of pure diffusion; positions stay fixed.

    Order of operations: rebuild the spatial index, split off the skipped
    particles, insert coverage particles for the diffusing ones, build the
    operator, choose dt, update circulations.  A ``cache`` carried across
    steps skips re-solving rows whose neighbourhoods did not change.
    """
    opts = opts if opts is not None else RunOptions()
    wt0 = perf_counter()
    n_ins = 0
    wt_stencil = 0.0
    if config.nu > 0.0:
        cell = config.r_outer * config.h
        index = SpatialIndex.build(cloud.positions, cell)
        _, diffused = select_excluded(cloud, config)
        n_ins = _coverage_sweep(cloud, index, diffused, config, opts.frame)
        if n_ins:
            index = SpatialIndex.build(cloud.positions, cell)
        ws = perf_counter()
        if cache is not None and n_ins:
            cache.invalidate_near(index, cloud.n - n_ins)
        op = build_operator(cloud, index, config, diffused=diffused,
                            frame=opts.frame, small_first=opts.small_first,
                            cache=cache)
        wt_stencil = perf_counter() - ws
        _check_excluded_budget(cloud.circulations, config, op)
        plan = plan_step(cloud, op, None, config, t, enforce_aposteriori=True)
        rates = apply_operator(op, cloud)
        cloud.circulations += plan.dt * rates
        n_diffused = op.n_rows
        n_small_fallback = op.n_small_fallback
        n_fallback_excluded = op.n_fallback_excluded
    else:
        # inviscid heat step is the identity on circulations
        plan = plan_step(cloud, None, None, config, t)
        n_diffused = 0
        n_small_fallback = 0
        n_fallback_excluded = 0
    i0, i1x, i1y, i2 = invariants(cloud)
    return DiagnosticsRecord(
        step=step, t=t + plan.dt, dt=plan.dt, n=cloud.n,
        i0=i0, i1x=i1x, i1y=i1y, i2=i2, e=None,
        n_diffused=n_diffused, n_excluded=cloud.n - n_diffused,
        n_inserted=n_ins, n_small_fallback=n_small_fallback,
        n_fallback_excluded=n_fallback_excluded,
        wt_stencil=wt_stencil, wt_velocity=0.0,
        wt_total=perf_counter() - wt0,
    )


def _stage_velocities(tmp: ParticleCloud, config: SimulationConfig,
                      opts: RunOptions) -> np.ndarray:
    if opts.velocity == "direct":
        return velocity_direct(tmp, tmp.positions, config.eps)
    return velocity_treecode(tmp, tmp.positions, config.eps,
                             theta=opts.theta, p=opts.p)


def rk4_ns_step(cloud: ParticleCloud, config: SimulationConfig, t: float,
                step: int = 0, opts: RunOptions | None = None) -> DiagnosticsRecord:
    """One classical RK4 step of the coupled convection-diffusion system.

    The particle set and the skip split are frozen at the step start
    (coverage insertion happens once, before stage one); the spatial index
    and all stencils are rebuilt at every stage because the stage positions
    differ.  dt combines the worst-case viscous bound with a CFL bound from
    the stage-one velocities.
    """
    opts = opts if opts is not None else RunOptions()
    wt0 = perf_counter()
    cell = config.r_outer * config.h
    viscous = config.nu > 0.0
    n_ins = 0
    diffused = np.empty(0, dtype=np.int64)
    if viscous:
        index = SpatialIndex.build(cloud.positions, cell)
        _, diffused = select_excluded(cloud, config)
        n_ins = _coverage_sweep(cloud, index, diffused, config, opts.frame)

    x0 = cloud.positions.copy()
    g0 = cloud.circulations.copy()
    n = x0.shape[0]
    wt_stencil = 0.0
    wt_velocity = 0.0
    n_small_fallback = 0
    n_fallback_excluded = 0
    stage_ops: list[DiffusionOperator | None] = []

    def stage_rates(xs, gs):
        nonlocal wt_stencil, wt_velocity, n_small_fallback, n_fallback_excluded
        tmp = ParticleCloud(xs, gs)
        ws = perf_counter()
        u = _stage_velocities(tmp, config, opts)
        wt_velocity += perf_counter() - ws
        if viscous and diffused.shape[0]:
            idx = SpatialIndex.build(xs, cell)
            ws = perf_counter()
            op = build_operator(tmp, idx, config, diffused=diffused,
                                frame=opts.frame, small_first=opts.small_first)
            wt_stencil += perf_counter() - ws
            _check_excluded_budget(g0, config, op)
            gdot = apply_operator(op, tmp)
            n_small_fallback += op.n_small_fallback
            n_fallback_excluded += op.n_fallback_excluded
        else:
            op = None
            gdot = np.zeros(n)
        stage_ops.append(op)
        return u, gdot

    k1x, k1g = stage_rates(x0, g0)
    plan = plan_step(cloud, stage_ops[0], k1x, config, t)
    dt = plan.dt
    k2x, k2g = stage_rates(x0 + (0.5 * dt) * k1x, g0 + (0.5 * dt) * k1g)
    k3x, k3g = stage_rates(x0 + (0.5 * dt) * k2x, g0 + (0.5 * dt) * k2g)
    k4x, k4g = stage_rates(x0 + dt * k3x, g0 + dt * k3g)

    sixth = dt / 6.0
    cloud.positions = x0 + sixth * (k1x + 2.0 * (k2x + k3x) + k4x)
    cloud.circulations = g0 + sixth * (k1g + 2.0 * (k2g + k3g) + k4g)

    e = energy(ParticleCloud(x0, g0), velocities=k1x)
    op1 = stage_ops[0]
    n_diffused = op1.n_rows if op1 is not None else 0
    i0, i1x, i1y, i2 = invariants(cloud)
    return DiagnosticsRecord(
        step=step, t=t + dt, dt=dt, n=cloud.n,
        i0=i0, i1x=i1x, i1y=i1y, i2=i2, e=e,
        n_diffused=n_diffused, n_excluded=cloud.n - n_diffused,
        n_inserted=n_ins, n_small_fallback=n_small_fallback,
        n_fallback_excluded=n_fallback_excluded,
        wt_stencil=wt_stencil, wt_velocity=wt_velocity,
        wt_total=perf_counter() - wt0,
    )


def run(config: SimulationConfig, mode: str, opts: RunOptions | None = None,
        writer=None, snapshot_cb=None) -> tuple[ParticleCloud, list[DiagnosticsRecord]]:
    """March a freshly seeded point vortex to ``t_end``.

    ``mode`` is ``"heat"`` (diffusion only, forward Euler) or ``"ns"``
    (convection plus diffusion, RK4).  ``writer.write(record)`` is called
    after every step when given; ``snapshot_cb(step, cloud)`` likewise.
    Returns the final cloud and the per-step records.
    """
    if mode not in ("heat", "ns"):
        raise ValueError(f"unknown mode {mode!r}")
    opts = opts if opts is not None else RunOptions()
    cloud = ParticleCloud.point_vortex(config.gamma)
    records: list[DiagnosticsRecord] = []
    cache = None
    if mode == "heat" and opts.stencil_cache and config.nu > 0.0:
        cache = StencilCache.for_run(config, frame=opts.frame,
                                     small_first=opts.small_first)
    t = 0.0
    step = 0
    slack = _T_END_SLACK * max(1.0, abs(config.t_end))
    while config.t_end - t > slack:
        step += 1
        if opts.max_steps is not None and step > opts.max_steps:
            raise RuntimeError(
                f"gave up after {opts.max_steps} steps at t={t} < t_end={config.t_end}")
        if mode == "heat":
            rec = euler_heat_step(cloud, config, t, step=step, opts=opts,
                                  cache=cache)
        else:
            rec = rk4_ns_step(cloud, config, t, step=step, opts=opts)
        t = rec.t
        records.append(rec)
        if writer is not None:
            writer.write(rec)
        if snapshot_cb is not None:
            snapshot_cb(step, cloud)
    return cloud, records
