"""Diffusion operator tests: skip split, row assembly, apply, step bounds.

The dense-matrix oracle rebuilds the full exchange matrix row by row from
``stencil_for`` and applies it with plain numpy, so the packed sparse kernel
is checked against an implementation that shares none of its code.
"""

import math

import numpy as np
import pytest

from conftest import gaussian_blob
from vrm2d.cloud import ParticleCloud, SimulationConfig
from vrm2d.diffusion import (
    StencilCache,
    apply as apply_operator,
    build,
    euler_matrix_one_norm,
    select_excluded,
    stable_dt_apriori,
    stable_dt_aposteriori,
)
from vrm2d.grid import SpatialIndex, ensure_coverage, neighborhood
from vrm2d.stencil import moment_residuals


def build_ready(cloud, config, frame=0.0):
    """Coverage-complete the cloud and return (index, excluded, diffused)."""
    cell = config.r_outer * config.h
    index = SpatialIndex.build(cloud.positions, cell)
    excluded, diffused = select_excluded(cloud, config)
    inserted = False
    for i in diffused:
        if ensure_coverage(index, cloud, int(i), config.h,
                           config.r_inner, config.r_outer, frame):
            inserted = True
    if inserted:
        index = SpatialIndex.build(cloud.positions, cell)
        excluded, diffused = select_excluded(cloud, config)
    return index, excluded, diffused


def blob_operator(rng, h=0.1, nu=0.02, c_diff=1.0, small_first=True):
    cloud = gaussian_blob(rng, h)
    config = SimulationConfig(h=h, nu=nu, c_diff=c_diff)
    index, _, diffused = build_ready(cloud, config)
    op = build(cloud, index, config, diffused=diffused, small_first=small_first)
    return cloud, config, op


# ---------------------------------------------------------------- skip split


def test_select_excluded_partitions_all_particles(rng):
    cloud = gaussian_blob(rng, 0.1)
    config = SimulationConfig(h=0.1, nu=0.02)
    excluded, diffused = select_excluded(cloud, config)
    merged = np.sort(np.concatenate([excluded, diffused]))
    assert np.array_equal(merged, np.arange(cloud.n))
    assert np.all(np.diff(excluded) > 0)
    assert np.all(np.diff(diffused) > 0)


def test_select_excluded_zero_budget_keeps_only_zero_circulation():
    pos = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    gam = np.array([0.5, 0.0, 1e-300, -0.25])
    cloud = ParticleCloud(pos, gam)
    config = SimulationConfig(h=0.1, nu=0.02, c_diff=0.0)
    excluded, diffused = select_excluded(cloud, config)
    # exact zeros cost nothing against a zero budget; everything else diffuses
    assert excluded.tolist() == [1]
    assert diffused.tolist() == [0, 2, 3]


def test_select_excluded_takes_smallest_magnitudes_first():
    gam = np.array([0.4, -0.01, 0.02, -0.3, 0.005])
    pos = np.c_[np.arange(5.0), np.zeros(5)]
    cloud = ParticleCloud(pos, gam)
    # budget c_diff * h**3 * sum|g| with h=1: 0.05 * 0.735
    config = SimulationConfig(h=1.0, nu=0.02, c_diff=0.05)
    excluded, diffused = select_excluded(cloud, config)
    # cumulative |g| ascending: 0.005, 0.015, 0.035 <= 0.036750 < 0.335
    assert excluded.tolist() == [1, 2, 4]
    assert diffused.tolist() == [0, 3]


def test_select_excluded_budget_scales_with_order():
    gam = np.array([1.0, 0.001])
    pos = np.array([[0.0, 0.0], [1.0, 0.0]])
    cloud = ParticleCloud(pos, gam)
    h = 0.5
    # order 1 budget: c h^3 |g| = 0.12512..., order 2: c h^4 = 0.0625...
    lo = SimulationConfig(h=h, nu=0.02, c_diff=1.0, order=1)
    hi = SimulationConfig(h=h, nu=0.02, c_diff=1.0, order=2)
    assert select_excluded(cloud, lo)[0].tolist() == [1]
    assert select_excluded(cloud, hi)[0].tolist() == [1]
    tight = SimulationConfig(h=h, nu=0.02, c_diff=0.005, order=2)
    assert select_excluded(cloud, tight)[0].tolist() == []


# ------------------------------------------------------------ build + apply


def test_rates_conserve_circulation_and_centroid(rng):
    cloud, config, op = blob_operator(rng)
    rates = apply_operator(op, cloud)
    scale = config.nu * np.abs(cloud.circulations).sum() / (config.h ** 2)
    assert abs(rates.sum()) <= 1e-13 * scale
    x = cloud.positions[:, 0]
    y = cloud.positions[:, 1]
    assert abs((rates * x).sum()) <= 1e-13 * scale
    assert abs((rates * y).sum()) <= 1e-13 * scale


def test_rates_grow_second_moment_at_viscous_rate(rng):
    cloud, config, op = blob_operator(rng)
    rates = apply_operator(op, cloud)
    r2 = (cloud.positions ** 2).sum(axis=1)
    got = (rates * r2).sum()
    want = 4.0 * config.nu * cloud.circulations[op.diffused].sum()
    assert got == pytest.approx(want, rel=1e-12)


def test_apply_matches_dense_matrix_oracle(rng):
    cloud, config, op = blob_operator(rng)
    dense = np.zeros((cloud.n, cloud.n))
    for i in op.diffused:
        st = op.stencil_for(int(i))
        dense[i, st.indices] = st.values
        dense[i, i] = st.diag
    want = config.nu * dense.T @ cloud.circulations
    got = apply_operator(op, cloud)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-13 * np.abs(want).max())


def test_every_row_satisfies_moment_conditions(rng):
    cloud, config, op = blob_operator(rng)
    pos = cloud.positions
    for i in op.diffused[:: max(1, op.n_rows // 40)]:
        st = op.stencil_for(int(i))
        offsets = pos[st.indices] - pos[int(i)]
        res = moment_residuals(st, offsets, config.h, config.order)
        assert np.abs(res).max() <= 1e-10
        assert st.values.min() > 0.0
        assert st.diag == -st.values.sum()


def test_full_only_build_matches_identities(rng):
    # exercises the fallback assembly on neighbourhoods wider than the
    # reduced set, where scratch arrays run past the member count
    cloud, config, op = blob_operator(rng, small_first=False)
    assert not op.small_row.any()
    rates = apply_operator(op, cloud)
    scale = config.nu * np.abs(cloud.circulations).sum() / (config.h ** 2)
    assert abs(rates.sum()) <= 1e-13 * scale
    r2 = (cloud.positions ** 2).sum(axis=1)
    want = 4.0 * config.nu * cloud.circulations[op.diffused].sum()
    assert (rates * r2).sum() == pytest.approx(want, rel=1e-12)
    for i in op.diffused[:: max(1, op.n_rows // 25)]:
        st = op.stencil_for(int(i))
        offsets = cloud.positions[st.indices] - cloud.positions[int(i)]
        res = moment_residuals(st, offsets, config.h, config.order)
        assert np.abs(res).max() <= 1e-10


def test_small_first_blob_needs_no_fallbacks(rng):
    cloud, config, op = blob_operator(rng)
    assert op.small_row.all()
    assert op.n_small_fallback == 0
    assert op.n_fallback_excluded == 0
    assert op.row_nnz.max() <= 5


def test_build_is_deterministic(rng):
    blob = gaussian_blob(rng, 0.1)
    config = SimulationConfig(h=0.1, nu=0.02)
    ca = blob.copy()
    cb = blob.copy()
    ia, _, da = build_ready(ca, config)
    ib, _, db = build_ready(cb, config)
    oa = build(ca, ia, config, diffused=da)
    ob = build(cb, ib, config, diffused=db)
    assert np.array_equal(oa.col_idx, ob.col_idx)
    assert np.array_equal(oa.f_val, ob.f_val)
    assert np.array_equal(oa.f_diag, ob.f_diag)


def test_stencil_for_unknown_particle_raises(rng):
    cloud, config, op = blob_operator(rng, c_diff=1.0)
    if op.excluded.size == 0:
        pytest.skip("blob produced no excluded particles")
    with pytest.raises(KeyError):
        op.stencil_for(int(op.excluded[0]))


def test_build_rejects_stale_index(rng):
    cloud = gaussian_blob(rng, 0.1)
    config = SimulationConfig(h=0.1, nu=0.02)
    index = SpatialIndex.build(cloud.positions, config.r_outer * config.h)
    index.insert(np.array([0.0, 0.0]), cloud.n)
    with pytest.raises(ValueError, match="pending insertions"):
        build(cloud, index, config)
    fresh = SpatialIndex.build(cloud.positions[:-1], config.r_outer * config.h)
    with pytest.raises(ValueError, match="rebuild"):
        build(cloud, fresh, config)


# ------------------------------------------------------------- step bounds


def test_apriori_dt_formula():
    config = SimulationConfig(h=0.08, nu=0.02)
    want = (0.5 * 0.08) ** 2 / (4.0 * 0.02)
    assert stable_dt_apriori(config) == pytest.approx(want, rel=1e-15)
    assert stable_dt_apriori(SimulationConfig(h=0.08, nu=0.0)) == math.inf


def test_aposteriori_dt_is_reciprocal_of_worst_diagonal(rng):
    cloud, config, op = blob_operator(rng)
    want = -1.0 / (config.nu * float(op.f_diag.min()))
    assert stable_dt_aposteriori(op, config.nu) == pytest.approx(want, rel=1e-15)
    assert stable_dt_aposteriori(op, 0.0) == math.inf


def test_apriori_never_exceeds_aposteriori(rng):
    # the worst-case bound assumes every member sits at the inner radius
    for trial in range(5):
        cloud, config, op = blob_operator(rng, h=0.08)
        assert stable_dt_apriori(config) <= stable_dt_aposteriori(op, config.nu)


def test_euler_one_norm_is_unity_at_the_stability_edge(rng):
    cloud, config, op = blob_operator(rng)
    dt = stable_dt_aposteriori(op, config.nu)
    assert euler_matrix_one_norm(op, config.nu, dt, cloud.n) == pytest.approx(1.0, abs=1e-12)
    assert euler_matrix_one_norm(op, config.nu, 1.01 * dt, cloud.n) > 1.0


def test_empty_diffused_set_gives_empty_operator():
    pos = np.array([[0.0, 0.0], [0.1, 0.0]])
    cloud = ParticleCloud(pos, np.zeros(2))
    config = SimulationConfig(h=0.1, nu=0.02)
    index = SpatialIndex.build(cloud.positions, config.r_outer * config.h)
    op = build(cloud, index, config)
    assert op.n_rows == 0
    assert op.excluded.tolist() == [0, 1]
    assert stable_dt_aposteriori(op, config.nu) == math.inf
    rates = apply_operator(op, cloud)
    assert np.all(rates == 0.0)


# ----------------------------------------------------------------- row cache


def assert_same_operator(a, b):
    assert np.array_equal(a.diffused, b.diffused)
    assert np.array_equal(a.row_start, b.row_start)
    assert np.array_equal(a.row_nnz, b.row_nnz)
    assert np.array_equal(a.col_idx, b.col_idx)
    assert np.array_equal(a.f_val, b.f_val)
    assert np.array_equal(a.f_diag, b.f_diag)
    assert np.array_equal(a.small_row, b.small_row)
    assert np.array_equal(a.excluded, b.excluded)
    assert a.n_small_fallback == b.n_small_fallback
    assert a.n_fallback_excluded == b.n_fallback_excluded


def test_cached_build_matches_direct_build_across_insertions(rng):
    cloud = gaussian_blob(rng, 0.12, half_width=0.5)
    config = SimulationConfig(h=0.12, nu=0.02, c_diff=0.0)
    cell = config.r_outer * config.h
    index, _, diffused = build_ready(cloud, config)
    cache = StencilCache.for_run(config)
    assert_same_operator(
        build(cloud, index, config, diffused=diffused, cache=cache),
        build(cloud, index, config, diffused=diffused))
    # grow the cloud a few times; every rebuild must match a from-scratch one
    for pos in [(0.61, 0.02), (-0.55, 0.31), (0.05, 0.66)]:
        first = cloud.n
        cloud.append_empty(pos)
        index = SpatialIndex.build(cloud.positions, cell)
        cache.invalidate_near(index, first)
        _, diffused = select_excluded(cloud, config)
        # far-away rows must survive the invalidation, else caching is moot
        assert cache.valid[diffused].any()
        assert_same_operator(
            build(cloud, index, config, diffused=diffused, cache=cache),
            build(cloud, index, config, diffused=diffused))


def test_cache_serves_fluctuating_diffused_membership(rng):
    # rows are keyed by particle, so a particle leaving and re-entering the
    # diffused set must come back with its original stencil
    cloud = gaussian_blob(rng, 0.12)
    config = SimulationConfig(h=0.12, nu=0.02, c_diff=0.0)
    index, _, diffused = build_ready(cloud, config)
    cache = StencilCache.for_run(config)
    op_all = build(cloud, index, config, diffused=diffused, cache=cache)
    assert_same_operator(op_all, build(cloud, index, config, diffused=diffused))
    half = diffused[::2]
    op_half = build(cloud, index, config, diffused=half, cache=cache)
    assert_same_operator(
        op_half, build(cloud, index, config, diffused=half))
    assert_same_operator(
        build(cloud, index, config, diffused=diffused, cache=cache), op_all)


def test_cache_rejects_mismatched_settings(rng):
    cloud = gaussian_blob(rng, 0.12)
    config = SimulationConfig(h=0.12, nu=0.02)
    index, _, diffused = build_ready(cloud, config)
    cache = StencilCache.for_run(config, small_first=False)
    with pytest.raises(ValueError, match="different run settings"):
        build(cloud, index, config, diffused=diffused, cache=cache)
