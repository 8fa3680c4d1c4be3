import time
import numpy as np
from vrm2d import backends, integrator, diagnostics
from vrm2d.cloud import SimulationConfig

backends.warmup()

results = {}
for h in (0.16, 0.08, 0.04):
    cfg = SimulationConfig(h=h, nu=1.0 / 50.0, order=1, c_diff=1.0, t_end=1.0)
    for mode in ("heat", "ns"):
        t0 = time.perf_counter()
        cloud, recs = integrator.run(cfg, mode)
        wall = time.perf_counter() - t0
        te = time.perf_counter()
        e_u = diagnostics.velocity_error_l2(cloud, cfg.t_end, cfg.gamma, cfg.nu, cfg.eps)
        t_eu = time.perf_counter() - te
        i0 = np.array([r.i0 for r in recs])
        i1x = np.array([r.i1x for r in recs])
        i1y = np.array([r.i1y for r in recs])
        i0_drift = np.max(np.abs(i0 - cfg.gamma)) / cfg.gamma
        i1_drift = max(np.max(np.abs(i1x)), np.max(np.abs(i1y)))
        results[(mode, h)] = (cloud.n, e_u, i0_drift, i1_drift, len(recs), wall)
        print(f"{mode} h={h:g}: steps={len(recs)} N={cloud.n} e_u={e_u:.4e} "
              f"I0drift={i0_drift:.2e} I1drift={i1_drift:.2e} "
              f"wall={wall:.1f}s e_u_eval={t_eu:.1f}s", flush=True)

print()
for h in (0.16, 0.08, 0.04):
    nh, eh = results[("heat", h)][:2]
    nn, en = results[("ns", h)][:2]
    print(f"h={h:g}: N ns/heat = {nn}/{nh} = {nn/nh:.3f}   "
          f"e_u ns vs heat rel diff = {abs(en-eh)/eh:.4f}")
