"""Velocity induced by the particle cloud.

The smoothed interaction kernel is

    K_eps(x) = (-x2, x1) / (2 pi |x|^2) * (1 - exp(-|x|^2 / eps^2))

and the velocity at a target t is ``sum_j K_eps(t - x_j) Gamma_j``; a
positive point circulation spins its surroundings counter-clockwise.  The
sharp kernel used in analysis is exposed as :func:`kernel` with its
argument pointing from evaluation point to source, which is the same field
with the opposite offset convention.

Two evaluators are provided: an exact direct sum and a quadtree far-field
expansion (complex multipoles) whose opening rule keeps sources closer
than ``6.5 eps`` to a target out of expansions, so expansions only ever
stand in for the kernel where its smoothing factor is exactly 1.0 in
double precision.
"""

from __future__ import annotations

import math

import numpy as np

from .backends import JIT_ENABLED, maybe_njit, prange
from .cloud import ParticleCloud

__all__ = [
    "kernel",
    "kernel_smoothed",
    "velocity_direct",
    "velocity_treecode",
]

TWO_PI = 2.0 * math.pi
# relative cutoff below which an offset counts as a self interaction
CORE_CUTOFF = 1e-12
# multiples of eps beyond which 1 - exp(-r^2/eps^2) is 1.0 in double precision
NEAR_FIELD_FACTOR = 6.5


def kernel(offset) -> np.ndarray:
    """Sharp interaction kernel ``(x2, -x1) / (2 pi |x|^2)``, zero at the origin.

    With the offset taken as source position minus evaluation point, this
    is the velocity field of a unit counter-clockwise point circulation.
    """
    x, y = float(offset[0]), float(offset[1])
    r2 = x * x + y * y
    if r2 == 0.0:
        return np.zeros(2)
    s = 1.0 / (TWO_PI * r2)
    return np.array([y * s, -x * s])


def kernel_smoothed(offset, eps: float) -> np.ndarray:
    """Gaussian-smoothed kernel ``(-x2, x1)/(2 pi |x|^2) (1 - exp(-|x/eps|^2))``.

    Offsets shorter than ``1e-12 eps`` return the zero vector.  The offset
    convention is evaluation point minus source, opposite to
    :func:`kernel`; both describe the same counter-clockwise field.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    x, y = float(offset[0]), float(offset[1])
    r2 = x * x + y * y
    cut = CORE_CUTOFF * eps
    if r2 < cut * cut:
        return np.zeros(2)
    s = (1.0 - math.exp(-r2 / (eps * eps))) / (TWO_PI * r2)
    return np.array([-y * s, x * s])


@maybe_njit(parallel=True)
def _direct_kernel(px, py, gam, tx, ty, eps, out):
    inv_eps2 = 1.0 / (eps * eps)
    tiny2 = (CORE_CUTOFF * eps) ** 2
    n = px.shape[0]
    for t in prange(tx.shape[0]):
        ux = 0.0
        uy = 0.0
        cx = tx[t]
        cy = ty[t]
        for j in range(n):
            dx = cx - px[j]
            dy = cy - py[j]
            r2 = dx * dx + dy * dy
            if r2 < tiny2:
                continue
            w = gam[j] * (1.0 - math.exp(-r2 * inv_eps2)) / (TWO_PI * r2)
            ux -= dy * w
            uy += dx * w
        out[t, 0] = ux
        out[t, 1] = uy


def _direct_numpy(px, py, gam, tx, ty, eps, out):
    # vectorised fallback; summation order differs from the loop kernel by
    # pairwise association only
    inv_eps2 = 1.0 / (eps * eps)
    tiny2 = (CORE_CUTOFF * eps) ** 2
    n = px.shape[0]
    if n == 0:
        out[:] = 0.0
        return
    chunk = max(1, int(4_000_000 // n))
    for s in range(0, tx.shape[0], chunk):
        e = min(s + chunk, tx.shape[0])
        dx = tx[s:e, None] - px[None, :]
        dy = ty[s:e, None] - py[None, :]
        r2 = dx * dx + dy * dy
        with np.errstate(divide="ignore", invalid="ignore"):
            w = gam[None, :] * (-np.expm1(-r2 * inv_eps2)) / (TWO_PI * r2)
        w = np.where(r2 < tiny2, 0.0, w)
        out[s:e, 0] = -(dy * w).sum(axis=1)
        out[s:e, 1] = (dx * w).sum(axis=1)


def velocity_direct(cloud: ParticleCloud, targets: np.ndarray, eps: float) -> np.ndarray:
    """Exact smoothed velocity sum at each target row, O(targets * particles)."""
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    tgt = np.ascontiguousarray(targets, dtype=np.float64).reshape(-1, 2)
    out = np.empty_like(tgt)
    px = np.ascontiguousarray(cloud.positions[:, 0])
    py = np.ascontiguousarray(cloud.positions[:, 1])
    tx = np.ascontiguousarray(tgt[:, 0])
    ty = np.ascontiguousarray(tgt[:, 1])
    if JIT_ENABLED:
        _direct_kernel(px, py, cloud.circulations, tx, ty, eps, out)
    else:
        _direct_numpy(px, py, cloud.circulations, tx, ty, eps, out)
    return out


@maybe_njit
def _tree_build(px, py, perm, leaf_cap, min_half,
                node_start, node_end, node_cx, node_cy, node_half,
                children, stack):
    """Quadtree over the points; returns the node count or -1 on overflow."""
    n = px.shape[0]
    cap = node_start.shape[0]
    xmin = px[0]
    xmax = px[0]
    ymin = py[0]
    ymax = py[0]
    for i in range(1, n):
        if px[i] < xmin:
            xmin = px[i]
        if px[i] > xmax:
            xmax = px[i]
        if py[i] < ymin:
            ymin = py[i]
        if py[i] > ymax:
            ymax = py[i]
    half = 0.5 * max(xmax - xmin, ymax - ymin)
    half = half * (1.0 + 1e-12) + 1e-300

    node_start[0] = 0
    node_end[0] = n
    node_cx[0] = 0.5 * (xmin + xmax)
    node_cy[0] = 0.5 * (ymin + ymax)
    node_half[0] = half
    for q in range(4):
        children[0, q] = -1
    n_nodes = 1
    sp = 0
    stack[sp] = 0
    sp += 1
    min_abs_half = min_half * half

    tmp = np.empty(n, dtype=np.int64)
    while sp > 0:
        sp -= 1
        nid = stack[sp]
        s = node_start[nid]
        e = node_end[nid]
        if e - s <= leaf_cap or node_half[nid] <= min_abs_half:
            continue
        cx = node_cx[nid]
        cy = node_cy[nid]
        cnt0 = 0
        cnt1 = 0
        cnt2 = 0
        cnt3 = 0
        for t in range(s, e):
            i = perm[t]
            q = 0
            if px[i] > cx:
                q += 1
            if py[i] > cy:
                q += 2
            if q == 0:
                cnt0 += 1
            elif q == 1:
                cnt1 += 1
            elif q == 2:
                cnt2 += 1
            else:
                cnt3 += 1
        o0 = s
        o1 = o0 + cnt0
        o2 = o1 + cnt1
        o3 = o2 + cnt2
        w0 = o0
        w1 = o1
        w2 = o2
        w3 = o3
        for t in range(s, e):
            i = perm[t]
            q = 0
            if px[i] > cx:
                q += 1
            if py[i] > cy:
                q += 2
            if q == 0:
                tmp[w0] = i
                w0 += 1
            elif q == 1:
                tmp[w1] = i
                w1 += 1
            elif q == 2:
                tmp[w2] = i
                w2 += 1
            else:
                tmp[w3] = i
                w3 += 1
        for t in range(s, e):
            perm[t] = tmp[t]

        qh = 0.5 * node_half[nid]
        ranges = (o0, o1, o2, o3, e)
        for q in range(4):
            qs = ranges[q]
            qe = ranges[q + 1]
            if qe == qs:
                continue
            if n_nodes >= cap:
                return -1
            cid = n_nodes
            n_nodes += 1
            node_start[cid] = qs
            node_end[cid] = qe
            node_cx[cid] = cx + (qh if q % 2 == 1 else -qh)
            node_cy[cid] = cy + (qh if q >= 2 else -qh)
            node_half[cid] = qh
            for qq in range(4):
                children[cid, qq] = -1
            children[nid, q] = cid
            stack[sp] = cid
            sp += 1
    return n_nodes


@maybe_njit
def _tree_moments(px, py, gam, perm, n_nodes, node_start, node_end,
                  node_cx, node_cy, coef, rmax):
    p = coef.shape[1]
    for nid in range(n_nodes):
        cx = node_cx[nid]
        cy = node_cy[nid]
        rm = 0.0
        for k in range(p):
            coef[nid, k] = 0.0 + 0.0j
        for t in range(node_start[nid], node_end[nid]):
            i = perm[t]
            z = complex(px[i] - cx, py[i] - cy)
            a = abs(z)
            if a > rm:
                rm = a
            g = gam[i]
            zk = complex(1.0, 0.0)
            for k in range(p):
                coef[nid, k] += g * zk
                zk *= z
        rmax[nid] = rm


@maybe_njit(parallel=True)
def _tree_eval(px, py, gam, perm, node_start, node_end, node_cx, node_cy,
               children, coef, rmax, tx, ty, eps, theta, out):
    inv_eps2 = 1.0 / (eps * eps)
    tiny2 = (CORE_CUTOFF * eps) ** 2
    near_cut = NEAR_FIELD_FACTOR * eps
    p = coef.shape[1]
    for t in prange(tx.shape[0]):
        cx = tx[t]
        cy = ty[t]
        ux = 0.0
        uy = 0.0
        stack = np.empty(256, dtype=np.int64)
        stack[0] = 0
        sp = 1
        while sp > 0:
            sp -= 1
            nid = stack[sp]
            dx = cx - node_cx[nid]
            dy = cy - node_cy[nid]
            d = math.sqrt(dx * dx + dy * dy)
            rm = rmax[nid]
            gap = d - rm
            if gap >= near_cut and rm <= theta * gap:
                # far field: Horner evaluation of the multipole series
                w = complex(dx, dy)
                invw = 1.0 / w
                s = coef[nid, p - 1]
                for k in range(p - 2, -1, -1):
                    s = s * invw + coef[nid, k]
                s *= invw
                ux += s.imag / TWO_PI
                uy += s.real / TWO_PI
            elif children[nid, 0] == -1 and children[nid, 1] == -1 \
                    and children[nid, 2] == -1 and children[nid, 3] == -1:
                for q in range(node_start[nid], node_end[nid]):
                    j = perm[q]
                    ddx = cx - px[j]
                    ddy = cy - py[j]
                    r2 = ddx * ddx + ddy * ddy
                    if r2 < tiny2:
                        continue
                    wj = gam[j] * (1.0 - math.exp(-r2 * inv_eps2)) / (TWO_PI * r2)
                    ux -= ddy * wj
                    uy += ddx * wj
            else:
                for q in range(4):
                    c = children[nid, q]
                    if c >= 0:
                        stack[sp] = c
                        sp += 1
        out[t, 0] = ux
        out[t, 1] = uy


def velocity_treecode(cloud: ParticleCloud, targets: np.ndarray, eps: float,
                      theta: float = 0.5, p: int = 16,
                      leaf_cap: int = 16) -> np.ndarray:
    """Quadtree-accelerated smoothed velocity sum.

    A node of extent ``r`` is expanded at distance ``d`` only when
    ``r <= theta * (d - r)`` and no source inside it can sit within the
    ``6.5 eps`` near field of the target, so accuracy is controlled by
    ``theta`` and the expansion order ``p`` alone.  ``theta = 0`` descends
    to direct summation.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if not 0 <= theta < 1:
        raise ValueError(f"theta must be in [0, 1), got {theta}")
    if not 1 <= p <= 64:
        raise ValueError(f"expansion order must be in [1, 64], got {p}")
    tgt = np.ascontiguousarray(targets, dtype=np.float64).reshape(-1, 2)
    out = np.empty_like(tgt)
    n = cloud.n
    if n == 0:
        out[:] = 0.0
        return out
    px = np.ascontiguousarray(cloud.positions[:, 0])
    py = np.ascontiguousarray(cloud.positions[:, 1])
    gam = cloud.circulations

    cap = 4 * n + 1024
    while True:
        perm = np.arange(n, dtype=np.int64)
        node_start = np.empty(cap, dtype=np.int64)
        node_end = np.empty(cap, dtype=np.int64)
        node_cx = np.empty(cap)
        node_cy = np.empty(cap)
        node_half = np.empty(cap)
        children = np.empty((cap, 4), dtype=np.int64)
        stack = np.empty(cap, dtype=np.int64)
        n_nodes = _tree_build(px, py, perm, leaf_cap, 2.0 ** -45,
                              node_start, node_end, node_cx, node_cy,
                              node_half, children, stack)
        if n_nodes > 0:
            break
        cap *= 2

    coef = np.empty((n_nodes, p), dtype=np.complex128)
    rmax = np.empty(n_nodes)
    _tree_moments(px, py, gam, perm, n_nodes, node_start, node_end,
                  node_cx, node_cy, coef, rmax)
    tx = np.ascontiguousarray(tgt[:, 0])
    ty = np.ascontiguousarray(tgt[:, 1])
    _tree_eval(px, py, gam, perm, node_start[:n_nodes], node_end[:n_nodes],
               node_cx[:n_nodes], node_cy[:n_nodes], children[:n_nodes],
               coef, rmax, tx, ty, eps, theta, out)
    return out
