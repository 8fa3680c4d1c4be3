import time
import numpy as np
from vrm2d import backends, integrator, diagnostics, velocity
from vrm2d.cloud import ParticleCloud, SimulationConfig, write_snapshot

backends.warmup()

# criterion 5: exclusions disabled, I2 identity
cfg = SimulationConfig(h=0.08, nu=1.0 / 50.0, c_diff=0.0, t_end=1.0)
t0 = time.perf_counter()
cloud, recs = integrator.run(cfg, "heat")
wall = time.perf_counter() - t0
i2_final = recs[-1].i2
expected = 4.0 * cfg.nu * cfg.gamma * cfg.t_end
rel = abs(i2_final - expected) / expected
fb = sum(r.n_small_fallback for r in recs), sum(r.n_fallback_excluded for r in recs)
print(f"c_diff=0 heat h=0.08: steps={len(recs)} N={cloud.n} "
      f"I2={i2_final:.12e} expected={expected:.12e} rel={rel:.3e} "
      f"fallbacks={fb} wall={wall:.1f}s", flush=True)
i0 = np.array([r.i0 for r in recs])
i1 = np.array([[r.i1x, r.i1y] for r in recs])
print(f"  I0 drift {np.max(np.abs(i0 - cfg.gamma)) / cfg.gamma:.2e} "
      f"I1 max {np.max(np.abs(i1)):.2e}", flush=True)

# criterion 11: treecode vs direct on a 5000-particle cloud
rng = np.random.default_rng(7)
n = 5000
pos = rng.standard_normal((n, 2)) * 0.6
gam = rng.standard_normal(n) * (0.04 ** 2)
tc = ParticleCloud(pos, gam)
eps = 3.0 * 0.04
t0 = time.perf_counter()
ud = velocity.velocity_direct(tc, tc.positions, eps)
td = time.perf_counter() - t0
t0 = time.perf_counter()
ut = velocity.velocity_treecode(tc, tc.positions, eps, theta=0.5, p=16)
tt = time.perf_counter() - t0
err = np.sqrt(((ut - ud) ** 2).sum(axis=1))
mag = np.sqrt((ud ** 2).sum(axis=1))
print(f"treecode 5000: max|err|/max|u| = {err.max() / mag.max():.3e}  "
      f"max per-target rel = {np.max(err / np.maximum(mag, 1e-300)):.3e}  "
      f"direct {td:.2f}s tree {tt:.2f}s", flush=True)
for p in (4, 8, 16):
    utp = velocity.velocity_treecode(tc, tc.positions, eps, theta=0.5, p=p)
    e = np.sqrt(((utp - ud) ** 2).sum(axis=1)).max() / mag.max()
    print(f"  p={p}: global max rel err {e:.3e}", flush=True)

# criterion 10: bench on the h=0.02 heat cloud
cfg2 = SimulationConfig(h=0.02, nu=1.0 / 50.0, t_end=1.0)
t0 = time.perf_counter()
cloud2, recs2 = integrator.run(cfg2, "heat")
print(f"h=0.02 heat: N={cloud2.n} wall={time.perf_counter() - t0:.1f}s "
      f"small_fallbacks={sum(r.n_small_fallback for r in recs2)} "
      f"fallback_excluded={sum(r.n_fallback_excluded for r in recs2)}", flush=True)
write_snapshot(cloud2, "/root/pkg/.probe_h002.csv")

from vrm2d.cli import bench_cloud
ropts = integrator.RunOptions()
rows = bench_cloud(cloud2, cfg2, ropts, repeats=5)
for k, v in rows.items():
    print(f"  bench {k}: {v}", flush=True)

# fallback totals for criterion 10 at h=0.04
cfg3 = SimulationConfig(h=0.04, nu=1.0 / 50.0, t_end=1.0)
cloud3, recs3 = integrator.run(cfg3, "heat")
print(f"h=0.04 heat fallbacks: small={sum(r.n_small_fallback for r in recs3)} "
      f"excluded={sum(r.n_fallback_excluded for r in recs3)}", flush=True)
