"""Uniform hash grid over particle positions and the neighbourhood logic built on it.

The grid cell edge equals the outer annulus radius, so every annulus query
is answered from the 3x3 block of cells around the query point.  The grid
is an immutable snapshot of the positions it was built from; after
particles move it must be rebuilt.  Freshly inserted particles are held in
a small overflow list so that queries issued during an insertion pass see
them immediately.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .backends import maybe_njit

__all__ = [
    "NeighborhoodView",
    "SpatialIndex",
    "segment_id",
    "neighborhood",
    "small_neighborhood",
    "ensure_coverage",
]

SEGMENTS = 8
_SEG_WIDTH = 2.0 * math.pi / SEGMENTS
# insertion sits on the centre line of an empty segment at this multiple of h
INSERT_RADIUS_FACTOR = 1.5

_MAX_CELLS = 50_000_000


@maybe_njit
def _segment_of(dx, dy, cos_f, sin_f):
    # rotate the offset into the frame, then bin the angle into [k*45, (k+1)*45)
    rx = dx * cos_f + dy * sin_f
    ry = -dx * sin_f + dy * cos_f
    ang = math.atan2(ry, rx)
    if ang < 0.0:
        ang += 2.0 * math.pi
    k = int(ang / (0.25 * math.pi))
    if k > 7:
        k = 7
    return k


@maybe_njit
def _fill_annulus(
    px, py, psx, psy, order, starts, nx, ny, qx0, qy0, cell,
    epx, epy, eidx, ecount,
    cx, cy, lo2, hi2, out,
):
    # gather particle indices with lo2 <= |x - c|^2 <= hi2 (closed bounds)
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
                    out[k] = order[s]
                    k += 1
    for e in range(ecount):
        dx = epx[e] - cx
        dy = epy[e] - cy
        d2 = dx * dx + dy * dy
        if lo2 <= d2 <= hi2:
            out[k] = eidx[e]
            k += 1
    return k


@maybe_njit
def _coverage_pass(
    px, py, psx, psy, order, starts, nx, ny, qx0, qy0, cell,
    diffused, h, lo2, hi2, dir_x, dir_y, cos_f, sin_f,
    ins_x, ins_y,
):
    """Serial insertion sweep over the diffused particles, ascending index.

    Points inserted earlier in the sweep count as segment members for
    later particles.  Returns the number of insertions written to
    ``ins_x``/``ins_y`` (capacity 8 per diffused particle).
    """
    n_ins = 0
    rad = INSERT_RADIUS_FACTOR * h
    for t in range(diffused.shape[0]):
        i = diffused[t]
        cx = px[i]
        cy = py[i]
        occ = np.zeros(SEGMENTS, dtype=np.bool_)
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
                        occ[_segment_of(dx, dy, cos_f, sin_f)] = True
        full = True
        for k in range(SEGMENTS):
            if not occ[k]:
                full = False
                break
        if full:
            # earlier insertions only ever add coverage, so nothing to scan
            continue
        for e in range(n_ins):
            dx = ins_x[e] - cx
            dy = ins_y[e] - cy
            d2 = dx * dx + dy * dy
            if lo2 <= d2 <= hi2:
                occ[_segment_of(dx, dy, cos_f, sin_f)] = True
        for k in range(SEGMENTS):
            if not occ[k]:
                ins_x[n_ins] = cx + rad * dir_x[k]
                ins_y[n_ins] = cy + rad * dir_y[k]
                n_ins += 1
    return n_ins


def segment_id(offset, frame: float = 0.0) -> int:
    """Index of the 45 degree sector containing ``offset``.

    Sector ``k`` covers angles ``[k*45, (k+1)*45)`` degrees measured from
    the positive x axis of a frame rotated by ``frame`` radians.
    """
    dx, dy = float(offset[0]), float(offset[1])
    if dx == 0.0 and dy == 0.0:
        raise ValueError("zero offset has no segment")
    return int(_segment_of(dx, dy, math.cos(frame), math.sin(frame)))


def insertion_directions(frame: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Unit vectors along the centre lines of the 8 segments."""
    ang = frame + _SEG_WIDTH * (np.arange(SEGMENTS) + 0.5)
    return np.cos(ang), np.sin(ang)


@dataclass
class NeighborhoodView:
    """Annulus neighbours of one particle, in ascending particle index order."""

    center: int
    indices: np.ndarray   # (k,) int64
    offsets: np.ndarray   # (k, 2) neighbour position minus centre position

    @property
    def size(self) -> int:
        return self.indices.shape[0]


class SpatialIndex:
    """Counting-sort hash grid with cell edge ``cell``.

    ``build`` snapshots the positions array; ``insert`` registers extra
    points without a rebuild (linear scan on query, intended for the small
    bursts produced by coverage insertion).
    """

    def __init__(self, px, py, order, starts, nx, ny, qx0, qy0, cell):
        self._px = px
        self._py = py
        # cell-sorted copies keep the kernels' inner gathers sequential
        self._psx = np.ascontiguousarray(px[order])
        self._psy = np.ascontiguousarray(py[order])
        self._order = order
        self._starts = starts
        self._nx = nx
        self._ny = ny
        self._qx0 = qx0
        self._qy0 = qy0
        self.cell = cell
        self._epx = np.empty(16)
        self._epy = np.empty(16)
        self._eidx = np.empty(16, dtype=np.int64)
        self._ecount = 0

    @classmethod
    def build(cls, positions: np.ndarray, cell: float) -> "SpatialIndex":
        if not (cell > 0 and math.isfinite(cell)):
            raise ValueError(f"cell size must be positive, got {cell}")
        pos = np.ascontiguousarray(positions, dtype=np.float64)
        n = pos.shape[0]
        if n == 0:
            return cls(
                np.empty(0), np.empty(0), np.empty(0, np.int64),
                np.zeros(2, np.int64), 1, 1, 0, 0, cell,
            )
        q = np.floor(pos / cell).astype(np.int64)
        qx0, qy0 = int(q[:, 0].min()), int(q[:, 1].min())
        nx = int(q[:, 0].max()) - qx0 + 1
        ny = int(q[:, 1].max()) - qy0 + 1
        if nx * ny > _MAX_CELLS:
            raise ValueError(f"grid of {nx}x{ny} cells is too spread out")
        key = (q[:, 0] - qx0) * ny + (q[:, 1] - qy0)
        order = np.argsort(key, kind="stable").astype(np.int64)
        counts = np.bincount(key, minlength=nx * ny)
        starts = np.zeros(nx * ny + 1, dtype=np.int64)
        np.cumsum(counts, out=starts[1:])
        return cls(
            np.ascontiguousarray(pos[:, 0]), np.ascontiguousarray(pos[:, 1]),
            order, starts, nx, ny, qx0, qy0, cell,
        )

    @property
    def n_base(self) -> int:
        return self._px.shape[0]

    @property
    def n_extra(self) -> int:
        return self._ecount

    def insert(self, position, index: int) -> None:
        """Register a point appended after the build, visible to queries at once."""
        if self._ecount == self._epx.shape[0]:
            grow = self._ecount * 2
            self._epx = np.resize(self._epx, grow)
            self._epy = np.resize(self._epy, grow)
            self._eidx = np.resize(self._eidx, grow)
        self._epx[self._ecount] = position[0]
        self._epy[self._ecount] = position[1]
        self._eidx[self._ecount] = index
        self._ecount += 1

    def arrays(self):
        """Grid internals consumed by the compiled kernels."""
        return (
            self._px, self._py, self._psx, self._psy, self._order,
            self._starts, self._nx, self._ny, self._qx0, self._qy0, self.cell,
        )

    def extra_arrays(self):
        return self._epx, self._epy, self._eidx, self._ecount

    def _candidate_cap(self, cx: float, cy: float) -> int:
        cqx = int(math.floor(cx / self.cell)) - self._qx0
        cqy = int(math.floor(cy / self.cell)) - self._qy0
        cap = self._ecount
        for gx in range(max(cqx - 1, 0), min(cqx + 2, self._nx)):
            for gy in range(max(cqy - 1, 0), min(cqy + 2, self._ny)):
                c = gx * self._ny + gy
                cap += int(self._starts[c + 1] - self._starts[c])
        return cap

    def query_annulus(self, center, r_lo: float, r_hi: float) -> np.ndarray:
        """Indices of points with ``r_lo <= |x - center| <= r_hi``, ascending."""
        if not 0 <= r_lo <= r_hi:
            raise ValueError(f"need 0 <= r_lo <= r_hi, got {r_lo}, {r_hi}")
        if r_hi > self.cell * (1 + 1e-12):
            raise ValueError(f"query radius {r_hi} exceeds grid cell {self.cell}")
        cx, cy = float(center[0]), float(center[1])
        out = np.empty(self._candidate_cap(cx, cy), dtype=np.int64)
        k = _fill_annulus(
            *self.arrays(), *self.extra_arrays(),
            cx, cy, r_lo * r_lo, r_hi * r_hi, out,
        )
        found = out[:k]
        found.sort()
        return found


def neighborhood(
    index: SpatialIndex, positions: np.ndarray, i: int, h: float,
    r_inner: float = 0.5, r_outer: float = 2.0,
) -> NeighborhoodView:
    """Full annulus neighbourhood of particle ``i`` (the particle itself is
    below the inner radius and therefore never a member)."""
    center = positions[i]
    idx = index.query_annulus(center, r_inner * h, r_outer * h)
    idx = idx[idx != i]  # guard against r_inner == 0 style configurations
    # offsets may involve extras not present in `positions` yet; resolve via index
    offs = np.empty((idx.shape[0], 2))
    npos = positions.shape[0]
    for t, j in enumerate(idx):
        if j < npos:
            offs[t, 0] = positions[j, 0] - center[0]
            offs[t, 1] = positions[j, 1] - center[1]
        else:
            e = int(np.nonzero(index._eidx[: index._ecount] == j)[0][0])
            offs[t, 0] = index._epx[e] - center[0]
            offs[t, 1] = index._epy[e] - center[1]
    return NeighborhoodView(center=i, indices=idx, offsets=offs)


def small_neighborhood(view: NeighborhoodView, frame: float = 0.0) -> NeighborhoodView:
    """Reduce a neighbourhood to the closest member of each occupied segment.

    Distance ties keep the lower particle index.  At most 8 members remain.
    """
    cos_f, sin_f = math.cos(frame), math.sin(frame)
    best_d2 = np.full(SEGMENTS, np.inf)
    best_t = np.full(SEGMENTS, -1, dtype=np.int64)
    for t in range(view.size):
        dx, dy = view.offsets[t]
        d2 = dx * dx + dy * dy
        s = _segment_of(dx, dy, cos_f, sin_f)
        if d2 < best_d2[s]:
            best_d2[s] = d2
            best_t[s] = t
    keep = np.sort(best_t[best_t >= 0])
    return NeighborhoodView(
        center=view.center,
        indices=view.indices[keep].copy(),
        offsets=view.offsets[keep].copy(),
    )


def ensure_coverage(
    index: SpatialIndex, cloud, i: int, h: float,
    r_inner: float = 0.5, r_outer: float = 2.0, frame: float = 0.0,
) -> list[int]:
    """Insert zero-circulation particles into the empty segments around ``i``.

    New particles go on the segment centre line at ``1.5 h`` from particle
    ``i``; cloud and index are updated immediately.  Returns new indices.
    """
    view = neighborhood(index, cloud.positions, i, h, r_inner, r_outer)
    cos_f, sin_f = math.cos(frame), math.sin(frame)
    occupied = np.zeros(SEGMENTS, dtype=bool)
    for t in range(view.size):
        occupied[_segment_of(view.offsets[t, 0], view.offsets[t, 1], cos_f, sin_f)] = True
    dir_x, dir_y = insertion_directions(frame)
    center = cloud.positions[i]
    new_indices = []
    for k in range(SEGMENTS):
        if occupied[k]:
            continue
        p = (
            center[0] + INSERT_RADIUS_FACTOR * h * dir_x[k],
            center[1] + INSERT_RADIUS_FACTOR * h * dir_y[k],
        )
        j = cloud.append_empty(p)
        index.insert(p, j)
        new_indices.append(j)
    return new_indices
