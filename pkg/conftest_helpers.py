"""Shared builders for randomized but reproducible test inputs."""

import numpy as np
import pytest

from vrm2d.cloud import ParticleCloud
from vrm2d.grid import SEGMENTS

SEG_WIDTH = 2.0 * np.pi / SEGMENTS


def segment_offsets(rng, h, per_segment=1, r_lo=0.55, r_hi=1.95, margin=0.02):
    """Random annulus offsets with ``per_segment`` members in every segment.

    Angles keep ``margin`` radians clear of the segment edges and radii stay
    inside [r_lo, r_hi] * h, so every segment is unambiguously occupied and
    a non-negative stencil exists by the coverage argument.
    """
    ks = np.repeat(np.arange(SEGMENTS), per_segment)
    ang = (ks + margin / SEG_WIDTH
           + (1.0 - 2.0 * margin / SEG_WIDTH) * rng.random(ks.size)) * SEG_WIDTH
    rad = h * (r_lo + (r_hi - r_lo) * rng.random(ks.size))
    return np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])


def random_annulus_offsets(rng, h, k, r_lo=0.5, r_hi=2.0):
    """k offsets uniform in angle and radius over the annulus, no coverage
    guarantee."""
    ang = 2.0 * np.pi * rng.random(k)
    rad = h * (r_lo + (r_hi - r_lo) * rng.random(k))
    return np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])


def gaussian_blob(rng, h, half_width=0.6, sigma2=0.08, jitter=0.25):
    """Jittered square lattice carrying a Gaussian circulation profile.

    A stand-in for a mid-run vortex cloud: spacing ~h, smooth strengths,
    no particle closer than (1 - 2*jitter)*h to a neighbour.
    """
    side = np.arange(-half_width, half_width + 0.5 * h, h)
    xg, yg = np.meshgrid(side, side)
    pos = np.column_stack([xg.ravel(), yg.ravel()])
    pos = pos + (jitter * h) * (2.0 * rng.random(pos.shape) - 1.0)
    r2 = (pos ** 2).sum(axis=1)
    gam = h * h * np.exp(-r2 / sigma2)
    return ParticleCloud(pos, gam)


@pytest.fixture
def rng():
    return np.random.default_rng(20260816)
