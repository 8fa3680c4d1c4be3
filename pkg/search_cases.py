import numpy as np
from vrm2d.grid import NeighborhoodView, small_neighborhood
from vrm2d.stencil import (InfeasibleStencilError, assemble_offsets,
                           brute_force_feasible, solve_nonnegative)

rng = np.random.default_rng(20260816)


def feasible(offsets, order=1):
    try:
        solve_nonnegative(assemble_offsets(offsets, 1.0, order))
        return True
    except InfeasibleStencilError:
        return False


# 1. feasible fraction for k <= 10 random annulus scatters (order 1)
n_f = 0
trials = 200
for _ in range(trials):
    k = int(rng.integers(1, 11))
    ang = 2.0 * np.pi * rng.random(k)
    rad = 0.5 + 1.5 * rng.random(k)
    offs = np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])
    if feasible(offs):
        n_f += 1
print(f"order-1 feasible fraction k<=10: {n_f}/{trials}", flush=True)

# 2. order-2 with 2 per segment: how often infeasible?
from conftest_helpers import segment_offsets  # noqa: E402
bad = 0
for _ in range(1000):
    offs = np.vstack([segment_offsets(rng, 0.08), segment_offsets(rng, 0.08)])
    try:
        solve_nonnegative(assemble_offsets(offs, 0.08, 2))
    except InfeasibleStencilError:
        bad += 1
print(f"order-2 two-per-segment infeasible: {bad}/1000", flush=True)

# 2b. order-2 with ONE per segment
bad1 = 0
for _ in range(1000):
    offs = segment_offsets(rng, 0.08)
    try:
        solve_nonnegative(assemble_offsets(offs, 0.08, 2))
    except InfeasibleStencilError:
        bad1 += 1
print(f"order-2 one-per-segment infeasible: {bad1}/1000", flush=True)

# 3. search: small-neighbourhood infeasible, full feasible (order 1)
found = 0
for trial in range(200000):
    k = int(rng.integers(5, 12))
    ang = 2.0 * np.pi * rng.random(k)
    rad = 0.5 + 1.5 * rng.random(k)
    offs = np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])
    view = NeighborhoodView(center=0, indices=np.arange(k, dtype=np.int64),
                            offsets=offs)
    sub = small_neighborhood(view)
    if sub.size == k:
        continue
    if feasible(offs) and not feasible(sub.offsets):
        print(f"FOUND at trial {trial}: k={k}")
        print(repr(offs))
        found += 1
        if found >= 3:
            break
print(f"search done, found={found}", flush=True)
