"""Kernel compilation backend.

Hot loops are written once as plain Python functions and compiled with
numba when it is available.  Setting the environment variable
``VRM2D_DISABLE_NUMBA=1`` (or running without numba installed) keeps them
as interpreted Python; the numerically heavy entry points then switch to
vectorised numpy implementations where one exists.  Results are identical
up to summation order.
"""

from __future__ import annotations

import os


def _flag(name: str) -> bool:
    return os.environ.get(name, "").strip().lower() in ("1", "true", "yes", "on")


try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    HAVE_NUMBA = False

JIT_ENABLED = HAVE_NUMBA and not _flag("VRM2D_DISABLE_NUMBA")

if JIT_ENABLED:
    prange = numba.prange

    def maybe_njit(*args, **kwargs):
        kwargs.setdefault("cache", True)
        return numba.njit(*args, **kwargs)

else:
    prange = range

    def maybe_njit(*args, **kwargs):
        # passthrough decorator, tolerates both bare and parametrised use
        if args and callable(args[0]) and not kwargs:
            return args[0]

        def wrap(func):
            return func

        return wrap


def py_func(kernel):
    """Return the uncompiled Python version of a kernel (itself if not compiled)."""
    return getattr(kernel, "py_func", kernel)


def set_threads(n: int) -> int:
    """Set the worker thread count, clamped to what the runtime allows.

    Returns the thread count actually in effect.  A no-op without numba.
    """
    if n < 1:
        raise ValueError(f"thread count must be >= 1, got {n}")
    if not JIT_ENABLED:
        return 1
    limit = numba.config.NUMBA_NUM_THREADS
    eff = min(n, limit)
    numba.set_num_threads(eff)
    return eff


def warmup() -> None:
    """Trigger compilation of every kernel on tiny inputs.

    Useful before timing anything; compiled code is cached on disk so the
    cost is paid once per source change.
    """
    if not JIT_ENABLED:
        return
    # late imports to avoid cycles
    from . import integrator
    from .cloud import SimulationConfig

    cfg = SimulationConfig(h=0.5, nu=0.02, t_end=0.2)
    integrator.run(cfg, "heat")
    integrator.run(cfg, "ns", opts=integrator.RunOptions(velocity="treecode", p=4))
    integrator.run(cfg, "ns", opts=integrator.RunOptions(velocity="direct"))
