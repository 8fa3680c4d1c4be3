"""Probe: bench ratio after single-pass build + pure LP cost ratio."""
import time

import numpy as np

from vrm2d.backends import warmup
from vrm2d.cloud import ParticleCloud, SimulationConfig, read_snapshot
from vrm2d.grid import SpatialIndex, neighborhood, small_neighborhood
from vrm2d.diffusion import select_excluded, build
from vrm2d.integrator import RunOptions, _coverage_sweep
from vrm2d.stencil import assemble, _phase1
from vrm2d.cli import bench_cloud

warmup()

cloud = read_snapshot("/root/pkg/.probe_h002.csv")
config = SimulationConfig(h=0.02, nu=1.0 / 50.0)
ropts = RunOptions()
print(f"cloud N={cloud.n}")

res = bench_cloud(cloud, config, ropts, repeats=5)
for k, v in res.items():
    print(f"  {k}: {v}")

# --- pure LP cost, small vs full systems, on the real cloud ---
cell = config.r_outer * config.h
index = SpatialIndex.build(cloud.positions, cell)
_, diffused = select_excluded(cloud, config)
if _coverage_sweep(cloud, index, diffused, config, 0.0):
    index = SpatialIndex.build(cloud.positions, cell)

rng = np.random.default_rng(7)
sample = rng.choice(diffused, size=min(4000, diffused.size), replace=False)

smalls, fulls = [], []
ks_small, ks_full = [], []
for i in sample:
    view = neighborhood(index, cloud.positions, int(i), config.h,
                        config.r_inner, config.r_outer)
    sub = small_neighborhood(view)
    smalls.append(assemble(sub, config.h, config.order))
    fulls.append(assemble(view, config.h, config.order))
    ks_small.append(sub.size)
    ks_full.append(view.size)

print(f"k small: mean {np.mean(ks_small):.2f}  max {max(ks_small)}")
print(f"k full : mean {np.mean(ks_full):.2f}  max {max(ks_full)}")


def time_lp(systems, reps=3):
    best = np.inf
    n_fail = 0
    for _ in range(reps):
        t0 = time.perf_counter()
        for sys_ in systems:
            f = np.empty(sys_.k)
            if _phase1(sys_.matrix.copy(), sys_.rhs.copy(), f) != 0:
                n_fail += 1
        best = min(best, time.perf_counter() - t0)
    return best, n_fail


t_small, fail_s = time_lp(smalls)
t_full, fail_f = time_lp(fulls)
print(f"LP small: {t_small * 1e6 / len(smalls):.3f} us/row  (fails {fail_s})")
print(f"LP full : {t_full * 1e6 / len(fulls):.3f} us/row  (fails {fail_f})")
print(f"LP full/small ratio: {t_full / t_small:.3f}")
