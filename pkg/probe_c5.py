"""Criterion-5-style heat run: c_diff=0, h=0.08, t_end=1, wall-clock check."""
import time

import numpy as np

from vrm2d.backends import warmup
from vrm2d.cloud import SimulationConfig
from vrm2d import integrator
from vrm2d.diagnostics import invariants

warmup()
config = SimulationConfig(h=0.08, nu=1.0 / 50.0, c_diff=0.0, t_end=1.0)
t0 = time.perf_counter()
cloud, records = integrator.run(config, "heat")
wall = time.perf_counter() - t0
r0, rT = records[0], records[-1]
i0_init = config.gamma  # point vortex at the origin: I1 = I2 = 0 at t = 0
print(f"wall {wall:.1f}s  steps {len(records)}  N final {cloud.n}")
print(f"I0 drift rel {abs(rT.i0 - i0_init) / abs(i0_init):.3e}")
print(f"I1 drift ({abs(rT.i1x):.3e}, {abs(rT.i1y):.3e})")
growth = rT.i2 - 4.0 * config.nu * i0_init * rT.t
print(f"I2 identity rel {abs(growth) / abs(4.0 * config.nu * i0_init * rT.t):.3e}")
print(f"fallbacks {sum(r.n_small_fallback for r in records)} "
      f"excluded-by-fallback {sum(r.n_fallback_excluded for r in records)}")
ws = sum(r.wt_stencil for r in records)
wv = sum(r.wt_velocity for r in records)
wt = sum(r.wt_total for r in records)
rows = sum(r.n_diffused for r in records)
print(f"stencil {ws:.1f}s  velocity {wv:.1f}s  steps-total {wt:.1f}s  "
      f"other {wt - ws - wv:.1f}s  overhead {wall - wt:.1f}s")
print(f"rows {rows}  us/row {1e6 * ws / rows:.2f}")
