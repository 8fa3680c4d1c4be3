"""Non-negative diffusion stencils from local moment conditions.

For a particle with neighbour offsets ``r_j`` (scaled by the spacing h),
a stencil is a non-negative weight vector ``f`` satisfying

    sum_j f_j * rho_j^alpha = 2   for alpha in {(2,0), (0,2)}
    sum_j f_j * rho_j^alpha = 0   for every other alpha, 1 <= |alpha| <= order + 1

with ``rho_j = r_j / h``.  Rows are ordered by total degree, then by
descending power of x: (1,0), (0,1), (2,0), (1,1), (0,2), and for order 2
additionally (3,0), (2,1), (1,2), (0,3).  The weights are found with a
phase-I simplex over exactly this system; a solution exists only for
sufficiently well spread neighbourhoods, so infeasibility is an expected
outcome that callers must handle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backends import maybe_njit
from .grid import NeighborhoodView, small_neighborhood

__all__ = [
    "MomentSystem",
    "Stencil",
    "InfeasibleStencilError",
    "SingularMatrixError",
    "assemble",
    "assemble_offsets",
    "solve_nonnegative",
    "brute_force_feasible",
    "compute_stencil",
    "lu_solve",
    "moment_residuals",
]

# second-degree diagonal rows carry the only non-zero targets
_RHS_ROWS = (2, 4)
_RHS_VALUE = 2.0

# simplex/LU tolerances, in normalised (h-scaled) coordinates
PIVOT_TOL = 1e-13
FEASIBILITY_TOL = 1e-10
_STOP_TOL = 1e-13
NEGATIVE_CLAMP = -1e-12


class InfeasibleStencilError(Exception):
    """No non-negative weight vector satisfies the moment conditions."""


class SingularMatrixError(Exception):
    """A pivot fell below the factorisation tolerance."""


def moment_rows(order: int) -> np.ndarray:
    """Multi-index table for the given order, in row order."""
    rows = [(1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]
    if order == 2:
        rows += [(3, 0), (2, 1), (1, 2), (0, 3)]
    elif order != 1:
        raise ValueError(f"order must be 1 or 2, got {order}")
    return np.asarray(rows, dtype=np.int64)


_FOURTH_MOMENT_ROWS = np.asarray(
    [(4, 0), (3, 1), (2, 2), (1, 3), (0, 4)], dtype=np.int64
)


@dataclass
class MomentSystem:
    """Normalised moment matrix ``V`` (rows) against targets ``rhs``."""

    matrix: np.ndarray       # (m, k)
    rhs: np.ndarray          # (m,)
    h: float
    order: int
    indices: np.ndarray | None = None   # particle index per column, if known

    @property
    def m(self) -> int:
        return self.matrix.shape[0]

    @property
    def k(self) -> int:
        return self.matrix.shape[1]


@dataclass
class Stencil:
    """Diffusion weights of one particle, already denormalised by ``1/h**2``.

    ``values`` holds the strictly positive off-centre weights; ``diag`` is
    the centre weight, the negative of their sum, so each row conserves
    circulation identically.
    """

    center: int
    indices: np.ndarray      # (nnz,) ascending particle indices
    values: np.ndarray       # (nnz,) positive weights
    diag: float
    small: bool

    @property
    def nnz(self) -> int:
        return self.indices.shape[0]


@maybe_njit
def _lu_factor(a, piv):
    # in-place Doolittle factorisation with partial pivoting; False if singular
    m = a.shape[0]
    for col in range(m):
        p = col
        big = abs(a[col, col])
        for r in range(col + 1, m):
            v = abs(a[r, col])
            if v > big:
                big = v
                p = r
        if big < PIVOT_TOL:
            return False
        piv[col] = p
        if p != col:
            for c in range(m):
                tmp = a[col, c]
                a[col, c] = a[p, c]
                a[p, c] = tmp
        inv = 1.0 / a[col, col]
        for r in range(col + 1, m):
            mult = a[r, col] * inv
            a[r, col] = mult
            for c in range(col + 1, m):
                a[r, c] -= mult * a[col, c]
    return True


@maybe_njit
def _lu_solve_inplace(a, piv, x):
    m = a.shape[0]
    for col in range(m):
        p = piv[col]
        if p != col:
            tmp = x[col]
            x[col] = x[p]
            x[p] = tmp
    for r in range(1, m):
        s = x[r]
        for c in range(r):
            s -= a[r, c] * x[c]
        x[r] = s
    for r in range(m - 1, -1, -1):
        s = x[r]
        for c in range(r + 1, m):
            s -= a[r, c] * x[c]
        x[r] = s / a[r, r]


@maybe_njit
def _lu_solve_t_inplace(a, piv, x):
    # solves A^T y = c given the row-pivoted factorisation of A
    m = a.shape[0]
    for r in range(m):
        s = x[r]
        for c in range(r):
            s -= a[c, r] * x[c]
        x[r] = s / a[r, r]
    for r in range(m - 1, -1, -1):
        s = x[r]
        for c in range(r + 1, m):
            s -= a[c, r] * x[c]
        x[r] = s
    for col in range(m - 1, -1, -1):
        p = piv[col]
        if p != col:
            tmp = x[col]
            x[col] = x[p]
            x[p] = tmp


@maybe_njit
def _fill_moment_matrix(v, dxs, dys, inv_h, m):
    # columns are monomials of the scaled offsets, rows as in moment_rows()
    k = dxs.shape[0]
    for j in range(k):
        ux = dxs[j] * inv_h
        uy = dys[j] * inv_h
        v[0, j] = ux
        v[1, j] = uy
        v[2, j] = ux * ux
        v[3, j] = ux * uy
        v[4, j] = uy * uy
        if m == 9:
            v[5, j] = ux * ux * ux
            v[6, j] = ux * ux * uy
            v[7, j] = ux * uy * uy
            v[8, j] = uy * uy * uy


@maybe_njit
def _phase1_ws(v, k, b, f_out, fwork, iwork):
    """Phase-I simplex for ``v[:, :k] @ f = b, f >= 0``, allocation-free.

    Artificial variables with sign-matched identity columns form the start
    basis; Bland's rule (lowest eligible index enters, lowest-index basic
    variable leaves on ties) prevents cycling through the degenerate zero
    rows.  The basis is refactorised from scratch every iteration.

    ``v`` may be wider than ``k``; the extra columns are never read.  All
    intermediate state lives in the caller-provided workspaces (``fwork``
    of at least ``m*(m+4)`` floats, ``iwork`` of at least ``2*m + k``
    ints), so a hot caller pays no per-solve allocations.

    Returns 0 when a feasible ``f`` was written to ``f_out``, 1 when the
    optimum leaves artificial residual above tolerance (infeasible), 2 on
    numerical failure.
    """
    m = v.shape[0]
    sign = fwork[:m]
    for r in range(m):
        sign[r] = 1.0 if b[r] >= 0.0 else -1.0

    basis = iwork[:m]
    for r in range(m):
        basis[r] = k + r
    in_basis = iwork[2 * m:2 * m + k]
    for j in range(k):
        in_basis[j] = 0

    lu = fwork[m:m + m * m].reshape(m, m)
    piv = iwork[m:2 * m]
    x = fwork[m + m * m:2 * m + m * m]
    y = fwork[2 * m + m * m:3 * m + m * m]
    d = fwork[3 * m + m * m:4 * m + m * m]

    max_iter = 100 * (m + k) + 500
    for _ in range(max_iter):
        # rebuild and refactorise the basis
        for r in range(m):
            bj = basis[r]
            if bj < k:
                for row in range(m):
                    lu[row, r] = v[row, bj]
            else:
                for row in range(m):
                    lu[row, r] = 0.0
                lu[bj - k, r] = sign[bj - k]
        if not _lu_factor(lu, piv):
            return 2

        for r in range(m):
            x[r] = b[r]
        _lu_solve_inplace(lu, piv, x)

        obj = 0.0
        for r in range(m):
            if basis[r] >= k:
                obj += x[r]

        if obj <= _STOP_TOL:
            break

        # duals of the artificial cost vector
        for r in range(m):
            y[r] = 1.0 if basis[r] >= k else 0.0
        _lu_solve_t_inplace(lu, piv, y)

        ynorm = 1.0
        for r in range(m):
            a = abs(y[r])
            if a > ynorm:
                ynorm = a
        rc_tol = 1e-11 * ynorm

        entering = -1
        for j in range(k):
            if in_basis[j]:
                continue
            rc = 0.0
            for r in range(m):
                rc += y[r] * v[r, j]
            if -rc < -rc_tol:
                entering = j
                break
        if entering == -1:
            break

        for r in range(m):
            d[r] = v[r, entering]
        _lu_solve_inplace(lu, piv, d)

        dnorm = 1.0
        for r in range(m):
            a = abs(d[r])
            if a > dnorm:
                dnorm = a
        d_tol = 1e-11 * dnorm

        leave = -1
        best = 0.0
        for r in range(m):
            if d[r] > d_tol:
                num = x[r]
                if num < 0.0:
                    num = 0.0
                ratio = num / d[r]
                if leave == -1 or ratio < best or (ratio == best and basis[r] < basis[leave]):
                    best = ratio
                    leave = r
        if leave == -1:
            # cannot happen for a bounded phase-I problem; bail out safely
            return 2

        if basis[leave] < k:
            in_basis[basis[leave]] = 0
        basis[leave] = entering
        in_basis[entering] = 1

    # final basic solution and classification
    for r in range(m):
        bj = basis[r]
        if bj < k:
            for row in range(m):
                lu[row, r] = v[row, bj]
        else:
            for row in range(m):
                lu[row, r] = 0.0
            lu[bj - k, r] = sign[bj - k]
    if not _lu_factor(lu, piv):
        return 2
    for r in range(m):
        x[r] = b[r]
    _lu_solve_inplace(lu, piv, x)

    obj = 0.0
    for r in range(m):
        if basis[r] >= k:
            obj += abs(x[r])
    if obj > FEASIBILITY_TOL:
        return 1

    for j in range(k):
        f_out[j] = 0.0
    for r in range(m):
        if basis[r] < k:
            val = x[r]
            if NEGATIVE_CLAMP <= val < 0.0:
                val = 0.0
            if val < 0.0:
                return 2
            f_out[basis[r]] = val
    return 0


@maybe_njit
def _phase1(v, b, f_out):
    """Allocating convenience front end for :func:`_phase1_ws`."""
    m, k = v.shape
    fwork = np.empty(m * (m + 4))
    iwork = np.empty(2 * m + k, dtype=np.int64)
    return _phase1_ws(v, k, b, f_out, fwork, iwork)


def assemble_offsets(offsets: np.ndarray, h: float, order: int,
                     indices: np.ndarray | None = None,
                     with_fourth_moments: bool = False) -> MomentSystem:
    """Moment system for raw neighbour offsets.

    ``with_fourth_moments`` appends the five degree-4 rows with zero
    targets; no non-negative stencil over a real annulus can satisfy those
    together with the degree-2 rows, which is what makes redistribution a
    second-order-at-best construction.
    """
    offs = np.ascontiguousarray(offsets, dtype=np.float64).reshape(-1, 2)
    if not h > 0:
        raise ValueError(f"h must be positive, got {h}")
    rows = moment_rows(order)
    m = rows.shape[0]
    k = offs.shape[0]
    v = np.empty((m, k))
    _fill_moment_matrix(v, np.ascontiguousarray(offs[:, 0]),
                        np.ascontiguousarray(offs[:, 1]), 1.0 / h, m)
    rhs = np.zeros(m)
    rhs[_RHS_ROWS[0]] = _RHS_VALUE
    rhs[_RHS_ROWS[1]] = _RHS_VALUE
    if with_fourth_moments:
        scaled = offs / h
        extra = np.empty((_FOURTH_MOMENT_ROWS.shape[0], k))
        for t, (ax, ay) in enumerate(_FOURTH_MOMENT_ROWS):
            extra[t] = scaled[:, 0] ** ax * scaled[:, 1] ** ay
        v = np.vstack([v, extra])
        rhs = np.concatenate([rhs, np.zeros(extra.shape[0])])
    return MomentSystem(matrix=v, rhs=rhs, h=h, order=order, indices=indices)


def assemble(view: NeighborhoodView, h: float, order: int) -> MomentSystem:
    """Moment system of a neighbourhood view."""
    return assemble_offsets(view.offsets, h, order, indices=view.indices)


def solve_nonnegative(system: MomentSystem) -> np.ndarray:
    """Normalised stencil weights for ``system``.

    Raises :class:`InfeasibleStencilError` when no non-negative solution
    exists (or the solve fails numerically, which is treated the same way).
    """
    f = np.empty(system.k)
    status = _phase1(np.ascontiguousarray(system.matrix),
                     np.ascontiguousarray(system.rhs), f)
    if status != 0:
        raise InfeasibleStencilError(
            f"no non-negative solution over {system.k} members (status {status})"
        )
    return f


def brute_force_feasible(system: MomentSystem,
                         residual_tol: float = 1e-8) -> np.ndarray | None:
    """Vertex-enumeration reference solver, exponential in the member count.

    Tries every column subset up to size ``min(m, k)`` and accepts the
    first least-squares solution that is consistent and non-negative.
    Only suitable for small systems; the simplex path is the real solver.
    """
    from itertools import combinations

    v, b = system.matrix, system.rhs
    m, k = v.shape
    if k == 0:
        return None
    for size in range(1, min(m, k) + 1):
        for cols in combinations(range(k), size):
            sub = v[:, cols]
            sol, *_ = np.linalg.lstsq(sub, b, rcond=None)
            if sol.min() < NEGATIVE_CLAMP:
                continue
            if np.linalg.norm(sub @ sol - b) > residual_tol:
                continue
            f = np.zeros(k)
            f[list(cols)] = np.clip(sol, 0.0, None)
            return f
    return None


def lu_solve(matrix: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve a small dense square system by partially pivoted elimination.

    Raises :class:`SingularMatrixError` when a pivot drops below the
    factorisation tolerance.
    """
    a = np.array(matrix, dtype=np.float64, copy=True)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"matrix must be square, got {a.shape}")
    x = np.array(rhs, dtype=np.float64, copy=True)
    if x.shape != (a.shape[0],):
        raise ValueError(f"rhs shape {x.shape} does not match matrix {a.shape}")
    piv = np.empty(a.shape[0], dtype=np.int64)
    if not _lu_factor(a, piv):
        raise SingularMatrixError("pivot below tolerance")
    _lu_solve_inplace(a, piv, x)
    return x


def _stencil_from_weights(center: int, indices: np.ndarray, weights: np.ndarray,
                          h: float, small: bool) -> Stencil:
    keep = weights > 0.0
    vals = weights[keep] / (h * h)
    idx = indices[keep]
    diag = 0.0
    for vv in vals:
        diag -= vv
    return Stencil(center=center, indices=idx.astype(np.int64),
                   values=vals, diag=diag, small=small)


def compute_stencil(view: NeighborhoodView, h: float, order: int,
                    frame: float = 0.0,
                    small_first: bool = True) -> tuple[Stencil, bool]:
    """Stencil for one particle, trying the reduced neighbourhood first.

    Returns ``(stencil, retried)`` where ``retried`` notes that the
    per-segment reduction was infeasible and the full neighbourhood was
    used instead.  Raises :class:`InfeasibleStencilError` when both fail.
    """
    if small_first:
        sub = small_neighborhood(view, frame)
        if 0 < sub.size:
            sys_small = assemble(sub, h, order)
            f = np.empty(sys_small.k)
            if _phase1(sys_small.matrix, sys_small.rhs, f) == 0:
                return _stencil_from_weights(view.center, sub.indices, f, h, True), False
        if sub.size == view.size:
            raise InfeasibleStencilError(
                f"particle {view.center}: no feasible stencil over {view.size} members"
            )
    sys_full = assemble(view, h, order)
    f = np.empty(sys_full.k)
    if _phase1(sys_full.matrix, sys_full.rhs, f) != 0:
        raise InfeasibleStencilError(
            f"particle {view.center}: no feasible stencil over {view.size} members"
        )
    return _stencil_from_weights(view.center, view.indices, f, h, False), small_first


def moment_residuals(stencil: Stencil, offsets: np.ndarray, h: float,
                     order: int) -> np.ndarray:
    """Normalised moment residuals of a stencil over its member offsets.

    Row ``alpha`` evaluates ``sum_j f'_j rho_j^alpha - target`` with
    ``f' = f h**2`` and ``rho = r / h``, i.e. in the same scaling the solver
    worked in, so one tolerance covers every row.  The centre weight never
    contributes because ``r = 0`` for it.
    """
    rows = moment_rows(order)
    offs = np.asarray(offsets, dtype=np.float64).reshape(-1, 2) / h
    fn = stencil.values * (h * h)
    res = np.empty(rows.shape[0])
    for t, (ax, ay) in enumerate(rows):
        res[t] = float(np.sum(fn * offs[:, 0] ** ax * offs[:, 1] ** ay))
    res[_RHS_ROWS[0]] -= _RHS_VALUE
    res[_RHS_ROWS[1]] -= _RHS_VALUE
    return res
