"""Assembly and application of the particle diffusion operator.

Each diffused particle gets a row of non-negative exchange weights toward
its annulus neighbours plus a balancing negative centre weight, so a row
moves circulation without creating or destroying any.  Particles whose
combined circulation fits under the ``c_diff`` budget are skipped for the
step; they still receive circulation from their neighbours' rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .backends import maybe_njit, prange
from .cloud import ParticleCloud, SimulationConfig
from .grid import SpatialIndex, _segment_of
from .stencil import Stencil, _fill_moment_matrix, _phase1_ws

__all__ = [
    "DiffusionOperator",
    "StencilCache",
    "select_excluded",
    "build",
    "apply",
    "stable_dt_apriori",
    "stable_dt_aposteriori",
    "euler_matrix_one_norm",
]

# candidate scratch per row; clouds near unit spacing h hold ~12 annulus
# neighbours, so one pass nearly always suffices and overflow just re-runs
_SCRATCH_CAP = 96


@dataclass
class DiffusionOperator:
    """Sparse row-wise diffusion weights for one particle configuration.

    Row ``t`` scatters circulation from particle ``diffused[t]`` onto
    ``col_idx[row_start[t] : row_start[t] + row_nnz[t]]`` with weights
    ``f_val`` (positive, units 1/length**2) and onto itself with ``f_diag``
    (their negated sum).  ``excluded`` holds every particle without a row.
    """

    h: float
    order: int
    nu: float
    diffused: np.ndarray        # (nd,) int64, ascending
    row_start: np.ndarray       # (nd,) int64 into col_idx / f_val
    row_nnz: np.ndarray         # (nd,) int64
    col_idx: np.ndarray         # (cap,) int64
    f_val: np.ndarray           # (cap,) float64
    f_diag: np.ndarray          # (nd,) float64
    small_row: np.ndarray       # (nd,) bool, True when the reduced set sufficed
    excluded: np.ndarray        # (ne,) int64, ascending
    n_small_fallback: int = 0
    n_fallback_excluded: int = 0

    @property
    def n_rows(self) -> int:
        return self.diffused.shape[0]

    def stencil_for(self, i: int) -> Stencil:
        """Row of particle ``i`` as a standalone stencil."""
        t = int(np.searchsorted(self.diffused, i))
        if t >= self.n_rows or self.diffused[t] != i:
            raise KeyError(f"particle {i} has no diffusion row")
        s = int(self.row_start[t])
        e = s + int(self.row_nnz[t])
        return Stencil(
            center=i,
            indices=self.col_idx[s:e].copy(),
            values=self.f_val[s:e].copy(),
            diag=float(self.f_diag[t]),
            small=bool(self.small_row[t]),
        )


def select_excluded(cloud: ParticleCloud, config: SimulationConfig) -> tuple[np.ndarray, np.ndarray]:
    """Split particles into (excluded, diffused) index arrays, both ascending.

    Particles are taken into the excluded set greedily by ascending
    absolute circulation (ties broken by index) while the running total
    stays within ``c_diff * h**(order+2)`` times the total absolute
    circulation.  Zero-circulation particles are always excluded.
    """
    gam = np.abs(cloud.circulations)
    total = float(gam.sum())
    budget = config.c_diff * config.h ** (config.order + 2) * total
    rank = np.lexsort((np.arange(cloud.n), gam))
    csum = np.cumsum(gam[rank])
    n_excl = int(np.searchsorted(csum, budget, side="right"))
    excluded = np.sort(rank[:n_excl]).astype(np.int64)
    diffused = np.sort(rank[n_excl:]).astype(np.int64)
    return excluded, diffused


@maybe_njit
def _build_rows(px, py, psx, psy, sort_idx, starts, nx, ny, qx0, qy0, cell,
                diffused, h, lo2, hi2, cos_f, sin_f, morder, rhs,
                small_first, scratch_cap,
                col_idx, f_val, row_nnz, f_diag, path, kcount):
    """Solve one stencil per diffused particle into the packed row arrays.

    Row ``t`` writes at most ``morder`` weights (a basic solution cannot
    carry more positive entries) starting at ``t * morder``.  ``path`` per
    row: 0 reduced set ok, 1 full set after failed reduced set, 2 full set
    directly, 3 failed after retry, 4 failed outright, 5 more candidates
    than ``scratch_cap`` (caller re-runs with a bigger cap).
    """
    inv_h = 1.0 / h
    inv_h2 = inv_h * inv_h
    # row scratch, reused across iterations: safe only while the loop body
    # runs serially, and it must stay serial anyway for reproducible sums
    idx_loc = np.empty(scratch_cap, dtype=np.int64)
    dx_loc = np.empty(scratch_cap)
    dy_loc = np.empty(scratch_cap)
    best_d2 = np.empty(8)
    best_slot = np.empty(8, dtype=np.int64)
    sel = np.empty(8, dtype=np.int64)
    dxs = np.empty(8)
    dys = np.empty(8)
    v_small = np.empty((morder, 8))
    f_small = np.empty(8)
    v_full = np.empty((morder, scratch_cap))
    f_full = np.empty(scratch_cap)
    fwork = np.empty(morder * (morder + 4))
    iwork = np.empty(2 * morder + scratch_cap, dtype=np.int64)
    for t in prange(diffused.shape[0]):
        i = diffused[t]
        cx = px[i]
        cy = py[i]
        base = t * morder
        k = 0
        cqx = int(math.floor(cx / cell)) - qx0
        cqy = int(math.floor(cy / cell)) - qy0
        for gx in range(cqx - 1, cqx + 2):
            if gx < 0 or gx >= nx:
                continue
            for gy in range(cqy - 1, cqy + 2):
                if gy < 0 or gy >= ny:
                    continue
                c = gx * ny + gy
                for s in range(starts[c], starts[c + 1]):
                    dx = psx[s] - cx
                    dy = psy[s] - cy
                    d2 = dx * dx + dy * dy
                    if lo2 <= d2 <= hi2:
                        if k < scratch_cap:
                            idx_loc[k] = sort_idx[s]
                            dx_loc[k] = dx
                            dy_loc[k] = dy
                        k += 1
        kcount[t] = k
        row_nnz[t] = 0
        f_diag[t] = 0.0
        if k > scratch_cap:
            path[t] = 5
            continue
        if k == 0:
            path[t] = 4
            continue
        # canonical ascending-index member order
        for a in range(1, k):
            ki = idx_loc[a]
            kx = dx_loc[a]
            ky = dy_loc[a]
            b = a - 1
            while b >= 0 and idx_loc[b] > ki:
                idx_loc[b + 1] = idx_loc[b]
                dx_loc[b + 1] = dx_loc[b]
                dy_loc[b + 1] = dy_loc[b]
                b -= 1
            idx_loc[b + 1] = ki
            dx_loc[b + 1] = kx
            dy_loc[b + 1] = ky

        solved = False
        used_small = False
        retried = False
        ks = 0
        if small_first:
            for s in range(8):
                best_d2[s] = np.inf
                best_slot[s] = -1
            for a in range(k):
                d2 = dx_loc[a] * dx_loc[a] + dy_loc[a] * dy_loc[a]
                s = _segment_of(dx_loc[a], dy_loc[a], cos_f, sin_f)
                if d2 < best_d2[s]:
                    best_d2[s] = d2
                    best_slot[s] = a
            for a in range(k):
                for s in range(8):
                    if best_slot[s] == a:
                        sel[ks] = a
                        ks += 1
                        break
            for q in range(ks):
                dxs[q] = dx_loc[sel[q]]
                dys[q] = dy_loc[sel[q]]
            # v_small runs past ks; the matrix filler sizes off its input
            # and the solver never reads columns at or beyond ks
            _fill_moment_matrix(v_small, dxs[:ks], dys[:ks], inv_h, morder)
            if _phase1_ws(v_small, ks, rhs, f_small, fwork, iwork) == 0:
                solved = True
                used_small = True
            else:
                retried = ks < k

        if not solved and (not small_first or retried):
            _fill_moment_matrix(v_full, dx_loc[:k], dy_loc[:k], inv_h, morder)
            if _phase1_ws(v_full, k, rhs, f_full, fwork, iwork) == 0:
                solved = True

        if not solved:
            path[t] = 3 if retried else 4
            continue

        w = 0
        diag = 0.0
        if used_small:
            for q in range(ks):
                if f_small[q] > 0.0:
                    val = f_small[q] * inv_h2
                    col_idx[base + w] = idx_loc[sel[q]]
                    f_val[base + w] = val
                    diag -= val
                    w += 1
        else:
            for a in range(k):
                if f_full[a] > 0.0:
                    val = f_full[a] * inv_h2
                    col_idx[base + w] = idx_loc[a]
                    f_val[base + w] = val
                    diag -= val
                    w += 1
        row_nnz[t] = w
        f_diag[t] = diag
        path[t] = 0 if used_small else (1 if retried else 2)


@maybe_njit
def _apply_rows(gamma, diffused, row_start, row_nnz, col_idx, f_val, f_diag, out):
    # serial fixed-order scatter keeps results independent of thread count
    for t in range(diffused.shape[0]):
        i = diffused[t]
        g = gamma[i]
        if g == 0.0:
            continue
        base = row_start[t]
        for s in range(base, base + row_nnz[t]):
            out[col_idx[s]] += f_val[s] * g
        out[i] += f_diag[t] * g


@maybe_njit
def _touched_rows(px, py, psx, psy, sort_idx, starts, nx, ny, qx0, qy0, cell,
                  first_new, hi2, valid):
    """Clear ``valid`` for every particle within ``sqrt(hi2)`` of a particle
    appended at index ``first_new`` or later (the newcomers included)."""
    n = px.shape[0]
    for j in range(first_new, n):
        cx = px[j]
        cy = py[j]
        cqx = int(math.floor(cx / cell)) - qx0
        cqy = int(math.floor(cy / cell)) - qy0
        for gx in range(cqx - 1, cqx + 2):
            if gx < 0 or gx >= nx:
                continue
            for gy in range(cqy - 1, cqy + 2):
                if gy < 0 or gy >= ny:
                    continue
                c = gx * ny + gy
                for s in range(starts[c], starts[c + 1]):
                    dx = psx[s] - cx
                    dy = psy[s] - cy
                    if dx * dx + dy * dy <= hi2:
                        valid[sort_idx[s]] = False


@dataclass
class StencilCache:
    """Row reuse between builds over a cloud whose particles never move.

    A row depends only on the geometry inside its annulus, so it stays
    correct until a particle appears within the outer radius of its
    centre.  Positions are append-only in heat mode; the caller reports
    each appended batch through :meth:`invalidate_near` and :func:`build`
    then re-solves only invalid or never-seen centres, copying the rest
    from the per-particle store.  Useless for moving particles; the full
    integrator leaves it off there.
    """

    morder: int
    hi2: float
    frame: float
    small_first: bool
    valid: np.ndarray   # (cap,) bool
    path: np.ndarray    # (cap,) int8
    nnz: np.ndarray     # (cap,) int64
    diag: np.ndarray    # (cap,) float64
    cols: np.ndarray    # (cap, morder) int64
    vals: np.ndarray    # (cap, morder) float64

    @classmethod
    def for_run(cls, config: SimulationConfig, frame: float = 0.0,
                small_first: bool = True) -> "StencilCache":
        m = config.moment_rows
        hi = config.r_outer * config.h
        return cls(
            morder=m, hi2=hi * hi, frame=frame, small_first=small_first,
            valid=np.zeros(0, dtype=bool),
            path=np.zeros(0, dtype=np.int8),
            nnz=np.zeros(0, dtype=np.int64),
            diag=np.zeros(0),
            cols=np.zeros((0, m), dtype=np.int64),
            vals=np.zeros((0, m)),
        )

    def _ensure(self, n: int) -> None:
        cap = self.valid.shape[0]
        if n <= cap:
            return
        new = max(n, 2 * cap)

        def grow(arr, shape, dtype):
            out = np.zeros(shape, dtype=dtype)
            out[:cap] = arr
            return out

        self.valid = grow(self.valid, new, bool)
        self.path = grow(self.path, new, np.int8)
        self.nnz = grow(self.nnz, new, np.int64)
        self.diag = grow(self.diag, new, np.float64)
        self.cols = grow(self.cols, (new, self.morder), np.int64)
        self.vals = grow(self.vals, (new, self.morder), np.float64)

    def invalidate_near(self, index: SpatialIndex, first_new: int) -> None:
        """Drop rows whose annulus may have gained a member.

        ``first_new`` is the cloud index of the first particle appended
        since the previous build; the index must already cover the grown
        cloud.  Membership is symmetric, so a centre is affected exactly
        when it lies within the outer radius of a newcomer.
        """
        self._ensure(index.n_base)
        if first_new >= index.n_base:
            return
        _touched_rows(*index.arrays(), first_new, self.hi2, self.valid)


def _solve_rows(garr, diffused: np.ndarray, h: float, lo2: float, hi2: float,
                frame: float, morder: int, small_first: bool):
    """Run the row builder over ``diffused``, re-running on scratch overflow."""
    nd = diffused.shape[0]
    col_idx = np.zeros(nd * morder, dtype=np.int64)
    f_val = np.zeros(nd * morder)
    row_nnz = np.zeros(nd, dtype=np.int64)
    f_diag = np.zeros(nd)
    path = np.zeros(nd, dtype=np.int8)
    kcount = np.zeros(nd, dtype=np.int64)
    rhs = np.zeros(morder)
    rhs[2] = 2.0
    rhs[4] = 2.0
    cap = _SCRATCH_CAP
    while True:
        _build_rows(*garr, diffused, h, lo2, hi2,
                    math.cos(frame), math.sin(frame),
                    morder, rhs, small_first, cap,
                    col_idx, f_val, row_nnz, f_diag, path, kcount)
        if nd == 0 or int(kcount.max()) <= cap:
            break
        cap = int(kcount.max())
    return col_idx, f_val, row_nnz, f_diag, path


def build(cloud: ParticleCloud, index: SpatialIndex, config: SimulationConfig,
          diffused: np.ndarray | None = None, frame: float = 0.0,
          small_first: bool = True,
          cache: StencilCache | None = None) -> DiffusionOperator:
    """Stencil rows for every diffused particle.

    ``diffused`` defaults to the :func:`select_excluded` split.  The index
    must be freshly built over the cloud's current positions with no
    pending insertions; coverage insertion happens before this call.  With
    a ``cache`` (fixed-position clouds only), rows are solved once per
    geometry change instead of once per call.
    """
    if index.n_extra:
        raise ValueError("index has pending insertions; rebuild it before building rows")
    if index.n_base != cloud.n:
        raise ValueError(
            f"index covers {index.n_base} particles but cloud has {cloud.n}; rebuild it"
        )
    if diffused is None:
        _, diffused = select_excluded(cloud, config)
    diffused = np.ascontiguousarray(diffused, dtype=np.int64)

    lo, hi = config.annulus
    lo2, hi2 = lo * lo, hi * hi
    nd = diffused.shape[0]
    garr = index.arrays()
    morder = 5 if config.order == 1 else 9
    row_start = np.arange(nd, dtype=np.int64) * morder
    if cache is not None:
        if (cache.morder != morder or cache.hi2 != hi2
                or cache.frame != frame or cache.small_first != small_first):
            raise ValueError("stencil cache was created for different run settings")
        cache._ensure(cloud.n)
        todo = diffused[~cache.valid[diffused]]
        if todo.shape[0]:
            t_col, t_val, t_nnz, t_diag, t_path = _solve_rows(
                garr, todo, config.h, lo2, hi2, frame, morder, small_first)
            cache.cols[todo] = t_col.reshape(-1, morder)
            cache.vals[todo] = t_val.reshape(-1, morder)
            cache.nnz[todo] = t_nnz
            cache.diag[todo] = t_diag
            cache.path[todo] = t_path
            cache.valid[todo] = True
        col_idx = cache.cols[diffused].reshape(-1)
        f_val = cache.vals[diffused].reshape(-1)
        row_nnz = cache.nnz[diffused]
        f_diag = cache.diag[diffused]
        path = cache.path[diffused]
    else:
        col_idx, f_val, row_nnz, f_diag, path = _solve_rows(
            garr, diffused, config.h, lo2, hi2, frame, morder, small_first)

    failed = path >= 3
    ok = ~failed
    all_idx = np.arange(cloud.n, dtype=np.int64)
    diffused_mask = np.zeros(cloud.n, dtype=bool)
    diffused_mask[diffused[ok]] = True
    return DiffusionOperator(
        h=config.h,
        order=config.order,
        nu=config.nu,
        diffused=diffused[ok],
        row_start=row_start[ok],
        row_nnz=row_nnz[ok],
        col_idx=col_idx,
        f_val=f_val,
        f_diag=f_diag[ok],
        small_row=(path[ok] == 0),
        excluded=all_idx[~diffused_mask],
        n_small_fallback=int(np.sum((path == 1) | (path == 3))),
        n_fallback_excluded=int(np.sum(failed)),
    )


def apply(op: DiffusionOperator, cloud: ParticleCloud) -> np.ndarray:
    """Circulation exchange rates ``dGamma/dt = nu * F^T Gamma``.

    Excluded particles contribute nothing as sources but appear as targets
    of their neighbours' rows.  Row sums vanish identically, so the total
    circulation is preserved to round-off regardless of the weights.
    """
    out = np.zeros(cloud.n)
    _apply_rows(cloud.circulations, op.diffused, op.row_start, op.row_nnz,
                op.col_idx, op.f_val, op.f_diag, out)
    if op.nu != 1.0:
        out *= op.nu
    return out


def stable_dt_apriori(config: SimulationConfig) -> float:
    """Worst-case stable Euler step: inner radius squared over ``4 nu``."""
    if config.nu == 0.0:
        return math.inf
    rin = config.r_inner * config.h
    return rin * rin / (4.0 * config.nu)


def stable_dt_aposteriori(op: DiffusionOperator, nu: float) -> float:
    """Largest Euler step with unit column sums for this operator.

    Equals ``min_i -1 / (nu * f_ii)`` over the built rows; infinite for an
    empty operator or inviscid flow.
    """
    if nu == 0.0 or op.n_rows == 0:
        return math.inf
    worst = float(np.min(op.f_diag))
    if worst >= 0.0:
        return math.inf
    return -1.0 / (nu * worst)


def euler_matrix_one_norm(op: DiffusionOperator, nu: float, dt: float,
                          n_particles: int) -> float:
    """One-norm of the explicit Euler update matrix ``I + nu dt F^T``.

    Column ``j`` of the update matrix is driven by row ``j`` of the
    operator, so the norm is evaluated row-wise without forming a dense
    matrix.
    """
    worst = 1.0
    for t in range(op.n_rows):
        s = int(op.row_start[t])
        e = s + int(op.row_nnz[t])
        col = abs(1.0 + nu * dt * float(op.f_diag[t]))
        col += nu * dt * float(np.sum(op.f_val[s:e]))
        if col > worst:
            worst = col
    return worst
