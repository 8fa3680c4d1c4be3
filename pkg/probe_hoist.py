"""Before/after microbench for the operator build on a saved cloud."""

import sys
from time import perf_counter

import numpy as np

from vrm2d.cloud import SimulationConfig, read_snapshot
from vrm2d.diffusion import build, select_excluded
from vrm2d.grid import SpatialIndex
from vrm2d.integrator import _coverage_sweep

cloud = read_snapshot(".probe_h002.csv")
config = SimulationConfig(h=0.02, nu=0.02, c_diff=0.0)
cell = config.r_outer * config.h
index = SpatialIndex.build(cloud.positions, cell)
_, diffused = select_excluded(cloud, config)
if _coverage_sweep(cloud, index, diffused, config, 0.0):
    index = SpatialIndex.build(cloud.positions, cell)

op = build(cloud, index, config, diffused=diffused, small_first=True)  # warm
reps = 20
t0 = perf_counter()
for _ in range(reps):
    op = build(cloud, index, config, diffused=diffused, small_first=True)
dt_small = (perf_counter() - t0) / reps
t0 = perf_counter()
for _ in range(reps):
    opf = build(cloud, index, config, diffused=diffused, small_first=False)
dt_full = (perf_counter() - t0) / reps

nd = diffused.shape[0]
print(f"rows {nd}  small {dt_small*1e6/nd:.3f} us/row  full {dt_full*1e6/nd:.3f} us/row")
print(f"small wall {dt_small*1e3:.1f} ms  full wall {dt_full*1e3:.1f} ms")

tag = sys.argv[1] if len(sys.argv) > 1 else "base"
np.savez(f"/tmp/hoist_{tag}.npz",
         row_start=op.row_start, row_nnz=op.row_nnz, col_idx=op.col_idx,
         f_val=op.f_val, f_diag=op.f_diag, diffused=op.diffused,
         frow_nnz=opf.row_nnz, fcol_idx=opf.col_idx, ff_val=opf.f_val,
         ff_diag=opf.f_diag)
print("saved", tag)
