"""Particle cloud state and run configuration.

A cloud is a flat record of N point vortices: positions ``(N, 2)`` and the
circulation each particle carries ``(N,)``.  Particles are never reordered
or removed during a run; new zero-circulation particles are appended where
diffusion needs somewhere to send circulation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = ["ParticleCloud", "SimulationConfig", "read_snapshot", "write_snapshot"]


def _as_points(values) -> np.ndarray:
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"positions must have shape (N, 2), got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("positions must be finite")
    return arr


def _as_weights(values, n: int) -> np.ndarray:
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] != n:
        raise ValueError(f"circulations must have shape ({n},), got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("circulations must be finite")
    return arr


@dataclass
class ParticleCloud:
    """Positions and circulations of the vortex particles.

    Arrays are owned by the instance and mutated in place by the stepping
    code.  ``N == 0`` is allowed so empty snapshot files can round trip,
    but a simulation refuses to start from an empty cloud.
    """

    positions: np.ndarray
    circulations: np.ndarray

    def __post_init__(self) -> None:
        self.positions = _as_points(self.positions)
        self.circulations = _as_weights(self.circulations, self.positions.shape[0])

    @classmethod
    def point_vortex(cls, gamma: float) -> "ParticleCloud":
        """Single particle at the origin carrying all circulation."""
        return cls(np.zeros((1, 2)), np.array([float(gamma)]))

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    def append_empty(self, position) -> int:
        """Append one zero-circulation particle, returning its index."""
        p = np.asarray(position, dtype=np.float64).reshape(1, 2)
        if not np.isfinite(p).all():
            raise ValueError("position must be finite")
        self.positions = np.concatenate([self.positions, p])
        self.circulations = np.concatenate([self.circulations, np.zeros(1)])
        return self.n - 1

    def extend_empty(self, positions) -> int:
        """Append a block of zero-circulation particles, returning the first new index."""
        p = _as_points(positions)
        first = self.n
        if p.shape[0]:
            self.positions = np.concatenate([self.positions, p])
            self.circulations = np.concatenate([self.circulations, np.zeros(p.shape[0])])
        return first

    def copy(self) -> "ParticleCloud":
        return ParticleCloud(self.positions.copy(), self.circulations.copy())


@dataclass(frozen=True)
class SimulationConfig:
    """Physical and numerical parameters of a run.

    ``r_inner`` and ``r_outer`` scale the particle spacing ``h`` to the
    annulus from which diffusion neighbourhoods are drawn.  ``c_diff``
    budgets how much circulation (relative, times ``h**(order + 2)``) may
    sit on particles that are skipped by the diffusion operator.
    """

    h: float
    nu: float
    gamma: float = 2.0 * math.pi
    order: int = 1
    c_diff: float = 1.0
    r_inner: float = 0.5
    r_outer: float = 2.0
    eps_factor: float = 3.0
    dt_safety: float = 0.125
    cfl_safety: float = 0.125
    t_end: float = 1.0

    def __post_init__(self) -> None:
        if not (self.h > 0 and math.isfinite(self.h)):
            raise ValueError(f"h must be positive and finite, got {self.h}")
        if not (self.nu >= 0 and math.isfinite(self.nu)):
            raise ValueError(f"nu must be non-negative, got {self.nu}")
        if not math.isfinite(self.gamma):
            raise ValueError("gamma must be finite")
        if self.order not in (1, 2):
            raise ValueError(f"order must be 1 or 2, got {self.order}")
        if not (self.c_diff >= 0 and math.isfinite(self.c_diff)):
            raise ValueError(f"c_diff must be non-negative, got {self.c_diff}")
        if not (0 < self.r_inner < self.r_outer and math.isfinite(self.r_outer)):
            raise ValueError(
                f"need 0 < r_inner < r_outer, got {self.r_inner}, {self.r_outer}"
            )
        if not (self.eps_factor > 0 and math.isfinite(self.eps_factor)):
            raise ValueError(f"eps_factor must be positive, got {self.eps_factor}")
        if not 0 < self.dt_safety <= 1:
            raise ValueError(f"dt_safety must be in (0, 1], got {self.dt_safety}")
        if not 0 < self.cfl_safety <= 1:
            raise ValueError(f"cfl_safety must be in (0, 1], got {self.cfl_safety}")
        if not (self.t_end >= 0 and math.isfinite(self.t_end)):
            raise ValueError(f"t_end must be non-negative, got {self.t_end}")

    @property
    def eps(self) -> float:
        """Velocity smoothing radius."""
        return self.eps_factor * self.h

    @property
    def moment_rows(self) -> int:
        """Number of moment conditions for the configured order."""
        return 5 if self.order == 1 else 9

    @property
    def annulus(self) -> tuple[float, float]:
        """Closed radial bounds of the neighbourhood annulus."""
        return (self.r_inner * self.h, self.r_outer * self.h)


_SNAPSHOT_HEADER = "x,y,gamma"


def write_snapshot(cloud: ParticleCloud, path) -> None:
    """Write the cloud as CSV with enough digits to round trip exactly."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write(_SNAPSHOT_HEADER + "\n")
        pos, gam = cloud.positions, cloud.circulations
        for i in range(cloud.n):
            fh.write(f"{pos[i, 0]:.17g},{pos[i, 1]:.17g},{gam[i]:.17g}\n")


def read_snapshot(path) -> ParticleCloud:
    """Read a snapshot CSV written by :func:`write_snapshot`."""
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().strip()
        if header != _SNAPSHOT_HEADER:
            raise ValueError(f"bad snapshot header {header!r}, expected {_SNAPSHOT_HEADER!r}")
        xs, ys, gs = [], [], []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 fields, got {len(parts)}")
            try:
                xs.append(float(parts[0]))
                ys.append(float(parts[1]))
                gs.append(float(parts[2]))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    positions = np.column_stack([xs, ys]) if xs else np.zeros((0, 2))
    return ParticleCloud(positions, np.asarray(gs))
