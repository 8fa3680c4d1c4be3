"""Profile a large-N euler heat step mimicking the late c_diff=0 regime."""
import cProfile
import pstats
import time

import numpy as np

from vrm2d.backends import warmup
from vrm2d.cloud import ParticleCloud, SimulationConfig
from vrm2d import integrator

warmup()

rng = np.random.default_rng(11)
h = 0.08
R = 20.0
xs = np.arange(-R, R + h / 2, h)
X, Y = np.meshgrid(xs, xs)
pos = np.column_stack([X.ravel(), Y.ravel()])
r2 = (pos ** 2).sum(axis=1)
keep = r2 <= R * R
pos = pos[keep] + rng.uniform(-0.2 * h, 0.2 * h, (int(keep.sum()), 2))
r2 = (pos ** 2).sum(axis=1)
# core Gaussian plus a denormal skirt so every particle diffuses
gam = np.exp(-r2 / 0.08)
skirt = 1e-290 * np.exp(-np.sqrt(r2))
gam = np.where(gam > skirt, gam, skirt)
cloud = ParticleCloud(pos, gam)
config = SimulationConfig(h=h, nu=1.0 / 50.0, c_diff=0.0, t_end=1.0)
print(f"N = {cloud.n}")

t0 = time.perf_counter()
integrator.euler_heat_step(cloud, config, 0.5)
print(f"one step: {time.perf_counter() - t0:.2f}s")

prof = cProfile.Profile()
prof.enable()
for _ in range(3):
    integrator.euler_heat_step(cloud, config, 0.5)
prof.disable()
stats = pstats.Stats(prof)
stats.sort_stats("cumulative").print_stats(18)
