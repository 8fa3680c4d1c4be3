"""Command line harness for runs, convergence studies, benchmarks, and checks.

Settings resolve in three layers: built-in defaults, then a ``key = value``
config file, then command line flags.  Every command writes its outputs
into ``--out`` (created if missing): a per-step ``diagnostics.csv`` where
applicable, snapshot CSVs, a ``summary.json`` with the headline numbers,
and a ``manifest.json`` echoing the effective settings and output paths.
"""

from __future__ import annotations

import json
import math
import os
import statistics
import subprocess
import sys
from pathlib import Path
from time import perf_counter

import click
import numpy as np

from .backends import JIT_ENABLED, set_threads, warmup
from .cloud import ParticleCloud, SimulationConfig, read_snapshot, write_snapshot
from .diagnostics import DiagnosticsWriter, invariants, velocity_error_l2
from .diffusion import build as build_operator, select_excluded
from .grid import SpatialIndex
from .integrator import RunOptions, _coverage_sweep, run
from .velocity import velocity_direct, velocity_treecode

_DEFAULTS = {
    "h": None,               # required: no sensible universal spacing
    "nu": 1.0 / 50.0,
    "gamma": 2.0 * math.pi,
    "order": 1,
    "c_diff": 1.0,
    "r": 0.5,
    "R": 2.0,
    "eps_factor": 3.0,
    "t_end": 1.0,
    "dt_safety": 0.125,
    "cfl_safety": 0.125,
    "velocity": "treecode",
    "theta": 0.5,
    "order_p": 16,
    "threads": None,
    "snapshot_every": 0,
}

_COERCE = {
    "h": float, "nu": float, "gamma": float, "order": int, "c_diff": float,
    "r": float, "R": float, "eps_factor": float, "t_end": float,
    "dt_safety": float, "cfl_safety": float, "velocity": str, "theta": float,
    "order_p": int, "threads": int, "snapshot_every": int,
}


def _parse_config_file(path: str) -> dict:
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise click.ClickException(f"{path}:{lineno}: expected 'key = value'")
            key, _, val = line.partition("=")
            key = key.strip().replace("-", "_")
            val = val.strip()
            if key not in _COERCE:
                raise click.ClickException(f"{path}:{lineno}: unknown setting {key!r}")
            try:
                values[key] = _COERCE[key](val)
            except ValueError:
                raise click.ClickException(
                    f"{path}:{lineno}: bad value {val!r} for {key}") from None
    return values


def _merge_settings(flags: dict) -> dict:
    merged = dict(_DEFAULTS)
    config_file = flags.pop("config_file", None)
    if config_file:
        merged.update(_parse_config_file(config_file))
    merged.update({k: v for k, v in flags.items() if v is not None})
    return merged


def _materialize(merged: dict) -> tuple[SimulationConfig, RunOptions]:
    if merged["h"] is None:
        raise click.UsageError("no spacing given: pass --h or set h in the config file")
    try:
        config = SimulationConfig(
            h=merged["h"], nu=merged["nu"], gamma=merged["gamma"],
            order=merged["order"], c_diff=merged["c_diff"],
            r_inner=merged["r"], r_outer=merged["R"],
            eps_factor=merged["eps_factor"], dt_safety=merged["dt_safety"],
            cfl_safety=merged["cfl_safety"], t_end=merged["t_end"],
        )
        ropts = RunOptions(velocity=merged["velocity"], theta=merged["theta"],
                           p=merged["order_p"])
    except ValueError as exc:
        raise click.UsageError(str(exc)) from None
    return config, ropts


def _apply_threads(merged: dict) -> int | None:
    threads = merged.get("threads")
    if threads is None:
        return None
    try:
        return set_threads(threads)
    except ValueError as exc:
        raise click.UsageError(str(exc)) from None


def _config_echo(merged: dict) -> dict:
    return {k: merged[k] for k in _DEFAULTS}


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w", encoding="ascii") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _run_summary(cloud: ParticleCloud, records, config: SimulationConfig,
                 mode: str) -> dict:
    """Headline numbers for one completed run."""
    gamma = config.gamma
    i0_ref = abs(gamma) if gamma != 0.0 else 1.0
    gam_norm = float(np.abs(cloud.circulations).sum())
    i0_drift = max((abs(r.i0 - gamma) for r in records), default=0.0)
    i1_drift = max((math.hypot(r.i1x, r.i1y) for r in records), default=0.0)
    # a run seeded at the origin starts with I2 = 0, so the exact law
    # dI2/dt = 4 nu I0 integrates to 4 nu gamma t
    i2_exact = 4.0 * config.nu * gamma * config.t_end
    i2_final = records[-1].i2 if records else 0.0
    i2_err = abs(i2_final - i2_exact)
    e_u = velocity_error_l2(cloud, config.t_end, gamma, config.nu, config.eps) \
        if config.t_end > 0 and config.nu > 0 else None
    return {
        "mode": mode,
        "h": config.h,
        "nu": config.nu,
        "order": config.order,
        "steps": len(records),
        "n_final": cloud.n,
        "e_u": e_u,
        "i0_drift_max_rel": i0_drift / i0_ref,
        "i1_drift_max": i1_drift,
        "gamma_one_norm": gam_norm,
        "i2_error_abs": i2_err,
        "i2_error_rel": i2_err / abs(i2_exact) if i2_exact != 0.0 else None,
        "n_inserted_total": sum(r.n_inserted for r in records),
        "n_small_fallback_total": sum(r.n_small_fallback for r in records),
        "n_fallback_excluded_total": sum(r.n_fallback_excluded for r in records),
    }


def _execute_run(mode: str, config: SimulationConfig, ropts: RunOptions,
                 out_dir: Path, snapshot_every: int) -> tuple[dict, dict]:
    out_dir.mkdir(parents=True, exist_ok=True)
    diag_path = out_dir / "diagnostics.csv"
    snapshots: list[str] = []

    def snap(step: int, cloud: ParticleCloud) -> None:
        if step % snapshot_every == 0:
            name = f"snapshot_{step:06d}.csv"
            write_snapshot(cloud, out_dir / name)
            snapshots.append(name)

    t0 = perf_counter()
    with DiagnosticsWriter(diag_path) as writer:
        cloud, records = run(config, mode, opts=ropts, writer=writer,
                             snapshot_cb=snap if snapshot_every > 0 else None)
    wall = perf_counter() - t0
    write_snapshot(cloud, out_dir / "snapshot_final.csv")
    summary = _run_summary(cloud, records, config, mode)
    summary["wall_seconds"] = wall
    _write_json(out_dir / "summary.json", summary)
    outputs = {
        "diagnostics": diag_path.name,
        "snapshot_final": "snapshot_final.csv",
        "snapshots": snapshots,
        "summary": "summary.json",
    }
    return summary, outputs


def _finalize(out_dir: Path, merged: dict, mode: str, summary: dict,
              outputs: dict, threads_effective: int | None) -> None:
    _write_json(out_dir / "summary.json", summary)
    manifest = {
        "command": " ".join(sys.argv[1:]) if sys.argv else "",
        "mode": mode,
        "settings": _config_echo(merged),
        "outputs": outputs,
        "threads_requested": merged.get("threads"),
        "threads_effective": threads_effective,
        "jit_enabled": JIT_ENABLED,
    }
    _write_json(out_dir / "manifest.json", manifest)


def _common_options(fn):
    options = [
        click.option("--h", "h", type=float, default=None,
                     help="Mean particle spacing."),
        click.option("--nu", type=float, default=None, help="Kinematic viscosity."),
        click.option("--gamma", type=float, default=None, help="Total circulation."),
        click.option("--order", type=click.IntRange(1, 2), default=None,
                     help="Consistency order of the diffusion stencils."),
        click.option("--c-diff", "c_diff", type=float, default=None,
                     help="Skip-budget constant for the reduced operator."),
        click.option("--r", "r", type=float, default=None,
                     help="Inner annulus factor."),
        click.option("--R", "R", type=float, default=None,
                     help="Outer annulus factor."),
        click.option("--eps-factor", type=float, default=None,
                     help="Velocity smoothing radius over h."),
        click.option("--t-end", type=float, default=None, help="Final time."),
        click.option("--dt-safety", type=float, default=None,
                     help="Safety factor on the viscous step bound."),
        click.option("--cfl-safety", type=float, default=None,
                     help="Safety factor on the convective step bound."),
        click.option("--velocity", type=click.Choice(["direct", "treecode"]),
                     default=None, help="Velocity backend for time stepping."),
        click.option("--theta", type=float, default=None,
                     help="Treecode opening angle."),
        click.option("--order-p", type=int, default=None,
                     help="Treecode expansion order."),
        click.option("--threads", type=int, default=None,
                     help="Worker thread count (clamped to the runtime limit)."),
        click.option("--out", "out", type=click.Path(file_okay=False),
                     default=None, help="Output directory."),
        click.option("--config", "config_file",
                     type=click.Path(exists=True, dir_okay=False),
                     default=None, help="key = value settings file."),
        click.option("--snapshot-every", type=int, default=None,
                     help="Write a snapshot every K steps (0: final only)."),
    ]
    for opt in reversed(options):
        fn = opt(fn)
    return fn


@click.group()
def main() -> None:
    """Mesh-free 2D vortex particle simulations with redistribution diffusion."""


@main.command("run")
@click.argument("mode", type=click.Choice(["heat", "ns"]))
@_common_options
def cmd_run(mode: str, out: str | None, **flags) -> None:
    """Run one simulation to t_end and write its diagnostics."""
    merged = _merge_settings(flags)
    config, ropts = _materialize(merged)
    threads_eff = _apply_threads(merged)
    out_dir = Path(out or f"vrm2d-out/{mode}-h{config.h:g}")
    summary, outputs = _execute_run(mode, config, ropts, out_dir,
                                    merged["snapshot_every"])
    _finalize(out_dir, merged, mode, summary, outputs, threads_eff)
    e_u = summary["e_u"]
    click.echo(
        f"{mode} h={config.h:g}: steps={summary['steps']} N={summary['n_final']}"
        + (f" e_u={e_u:.6e}" if e_u is not None else "")
        + f" wall={summary['wall_seconds']:.1f}s")


_HEAT_H_DEFAULT = "0.16,0.08,0.04,0.02"
_NS_H_DEFAULT = "0.16,0.08,0.04"


def _fit_slope(hs, errs) -> float | None:
    pairs = [(h, e) for h, e in zip(hs, errs) if e is not None and e > 0.0]
    if len(pairs) < 2:
        return None
    lx = np.log([p[0] for p in pairs])
    ly = np.log([p[1] for p in pairs])
    return float(np.polyfit(lx, ly, 1)[0])


@main.command("convergence")
@click.option("--mode", type=click.Choice(["heat", "ns"]), default="heat",
              show_default=True)
@click.option("--h-list", "h_list", default=None,
              help="Comma separated spacings, coarse to fine "
                   f"[default heat: {_HEAT_H_DEFAULT}; ns: {_NS_H_DEFAULT}].")
@_common_options
def cmd_convergence(mode: str, h_list: str | None, out: str | None, **flags) -> None:
    """Run a spacing sweep and fit the velocity-error convergence slope."""
    merged = _merge_settings(flags)
    threads_eff = _apply_threads(merged)
    raw = h_list or (_HEAT_H_DEFAULT if mode == "heat" else _NS_H_DEFAULT)
    try:
        hs = [float(tok) for tok in raw.split(",") if tok.strip()]
    except ValueError:
        raise click.UsageError(f"bad --h-list {raw!r}") from None
    if len(hs) < 3:
        raise click.UsageError("need at least 3 spacings for a slope")
    out_dir = Path(out or f"vrm2d-out/convergence-{mode}")
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for h in hs:
        sub = dict(merged)
        sub["h"] = h
        config, ropts = _materialize(sub)
        summary, _ = _execute_run(mode, config, ropts, out_dir / f"h{h:g}",
                                  merged["snapshot_every"])
        rows.append(summary)
        eu = summary["e_u"]
        click.echo(f"  h={h:g}: e_u={eu:.6e} N={summary['n_final']}"
                   f" wall={summary['wall_seconds']:.1f}s")

    slope = _fit_slope(hs, [r["e_u"] for r in rows])
    i2_slope = _fit_slope(hs, [r["i2_error_abs"] for r in rows])
    with open(out_dir / "convergence.csv", "w", encoding="ascii") as fh:
        fh.write("h,e_u,n_final,i2_error_abs,i0_drift_max_rel,i1_drift_max,steps,wall_seconds\n")
        for h, r in zip(hs, rows):
            fh.write(f"{h:.17g},{r['e_u']!r},{r['n_final']},{r['i2_error_abs']!r},"
                     f"{r['i0_drift_max_rel']!r},{r['i1_drift_max']!r},"
                     f"{r['steps']},{r['wall_seconds']:.3f}\n")
    summary = {
        "mode": mode,
        "h_list": hs,
        "slope_e_u": slope,
        "slope_i2_error": i2_slope,
        "runs": rows,
    }
    outputs = {
        "table": "convergence.csv",
        "summary": "summary.json",
        "runs": [f"h{h:g}" for h in hs],
    }
    _finalize(out_dir, merged, mode, summary, outputs, threads_eff)
    click.echo(f"{mode} convergence: e_u slope={slope:.3f}"
               + (f", I2-error slope={i2_slope:.3f}" if i2_slope is not None else ""))


def _median_time(fn, repeats: int) -> float:
    fn()  # untimed warm call: compilation and caches
    samples = []
    for _ in range(repeats):
        t0 = perf_counter()
        fn()
        samples.append(perf_counter() - t0)
    return statistics.median(samples)


def bench_cloud(cloud: ParticleCloud, config: SimulationConfig,
                ropts: RunOptions, repeats: int = 5) -> dict:
    """Median timings of operator builds and velocity sweeps on a frozen cloud.

    The cloud is coverage-completed once up front so both build variants
    solve the same geometry.  Used by the bench command and its tests.
    """
    cell = config.r_outer * config.h
    index = SpatialIndex.build(cloud.positions, cell)
    _, diffused = select_excluded(cloud, config)
    if _coverage_sweep(cloud, index, diffused, config, ropts.frame):
        index = SpatialIndex.build(cloud.positions, cell)

    def build_small():
        build_operator(cloud, index, config, diffused=diffused,
                       frame=ropts.frame, small_first=True)

    def build_full():
        build_operator(cloud, index, config, diffused=diffused,
                       frame=ropts.frame, small_first=False)

    targets = cloud.positions

    def vel_direct():
        velocity_direct(cloud, targets, config.eps)

    def vel_tree():
        velocity_treecode(cloud, targets, config.eps,
                          theta=ropts.theta, p=ropts.p)

    t_small = _median_time(build_small, repeats)
    t_full = _median_time(build_full, repeats)
    t_dir = _median_time(vel_direct, repeats)
    t_tree = _median_time(vel_tree, repeats)
    return {
        "n": cloud.n,
        "n_diffused": int(diffused.shape[0]),
        "repeats": repeats,
        "build_small_seconds": t_small,
        "build_full_seconds": t_full,
        "full_over_small": t_full / t_small if t_small > 0 else None,
        "velocity_direct_seconds": t_dir,
        "velocity_treecode_seconds": t_tree,
    }


def _python_baseline(out_dir: Path, cloud: ParticleCloud, merged: dict,
                     repeats: int, jit_result: dict) -> dict:
    """Re-run the identical bench in a subprocess with the jit disabled.

    The coverage-completed cloud and the effective settings are written out
    and handed to the child, so both processes time the same geometry; the
    only difference is the kernel implementation the env flag selects.
    """
    ref = out_dir / "bench_cloud.csv"
    write_snapshot(cloud, ref)
    cfg = out_dir / "bench_settings.cfg"
    with open(cfg, "w", encoding="ascii") as fh:
        for key in _COERCE:
            val = merged.get(key)
            if val is not None and key not in ("threads", "snapshot_every"):
                fh.write(f"{key} = {val}\n")
    sub_out = out_dir / "python-fallback"
    env = dict(os.environ, VRM2D_DISABLE_NUMBA="1")
    proc = subprocess.run(
        [sys.executable, "-m", "vrm2d.cli", "bench",
         "--snapshot", str(ref), "--config", str(cfg),
         "--repeats", str(repeats), "--out", str(sub_out)],
        env=env, capture_output=True, text=True)
    if proc.returncode != 0:
        tail = proc.stderr.strip().splitlines()[-1] if proc.stderr.strip() else "?"
        raise click.ClickException(f"python-fallback bench failed: {tail}")
    with open(sub_out / "summary.json", "r", encoding="ascii") as fh:
        fallback = json.load(fh)
    with open(sub_out / "manifest.json", "r", encoding="ascii") as fh:
        child_jit = json.load(fh)["jit_enabled"]
    phases = ("build_small", "build_full", "velocity_direct", "velocity_treecode")
    return {
        "summary_dir": sub_out.name,
        "jit_enabled_child": child_jit,
        "seconds": {name: fallback[name + "_seconds"] for name in phases},
        "speedup": {name: fallback[name + "_seconds"] / jit_result[name + "_seconds"]
                    for name in phases},
    }


@main.command("bench")
@click.option("--snapshot", "snapshot_path",
              type=click.Path(exists=True, dir_okay=False), default=None,
              help="Bench this cloud instead of generating one with a heat run.")
@click.option("--repeats", type=click.IntRange(min=1), default=5, show_default=True)
@click.option("--python-baseline", "python_baseline", is_flag=True, default=False,
              help="Also time the pure-numpy kernel path (subprocess with the "
                   "jit disabled) and record the speedups.")
@_common_options
def cmd_bench(snapshot_path: str | None, repeats: int, python_baseline: bool,
              out: str | None, **flags) -> None:
    """Time operator builds (reduced vs full neighborhoods) and velocity backends."""
    merged = _merge_settings(flags)
    config, ropts = _materialize(merged)
    threads_eff = _apply_threads(merged)
    out_dir = Path(out or "vrm2d-out/bench")
    out_dir.mkdir(parents=True, exist_ok=True)
    warmup()
    if snapshot_path:
        cloud = read_snapshot(snapshot_path)
        if cloud.n == 0:
            raise click.UsageError(f"snapshot {snapshot_path} holds no particles")
        source = snapshot_path
    else:
        cloud, _ = run(config, "heat", opts=ropts)
        source = f"heat run at h={config.h:g}"
    result = bench_cloud(cloud, config, ropts, repeats)
    result["cloud_source"] = source
    if python_baseline:
        result["python_fallback"] = _python_baseline(out_dir, cloud, merged,
                                                     repeats, result)
    with open(out_dir / "bench.csv", "w", encoding="ascii") as fh:
        fh.write("name,n,median_seconds\n")
        for name in ("build_small", "build_full", "velocity_direct", "velocity_treecode"):
            fh.write(f"{name},{result['n']},{result[name + '_seconds']!r}\n")
    outputs = {"table": "bench.csv", "summary": "summary.json"}
    if python_baseline:
        outputs["bench_cloud"] = "bench_cloud.csv"
        outputs["python_fallback"] = "python-fallback"
    _finalize(out_dir, merged, "bench", result, outputs, threads_eff)
    click.echo(
        f"bench N={result['n']}: build small={result['build_small_seconds']:.4f}s"
        f" full={result['build_full_seconds']:.4f}s"
        f" (x{result['full_over_small']:.2f}),"
        f" velocity direct={result['velocity_direct_seconds']:.4f}s"
        f" treecode={result['velocity_treecode_seconds']:.4f}s")
    if python_baseline:
        spd = result["python_fallback"]["speedup"]
        click.echo("jit speedup over the numpy path: "
                   + ", ".join(f"{name} x{val:.1f}" for name, val in spd.items()))


@main.command("rotation-check")
@click.option("--angle", type=float, default=10.0, show_default=True,
              help="Rotation of the segment partition for the second run, degrees.")
@_common_options
def cmd_rotation_check(angle: float, out: str | None, **flags) -> None:
    """Compare a heat run against one with a rotated segment partition."""
    merged = _merge_settings(flags)
    if merged["h"] is None:
        merged["h"] = 0.08
    config, ropts = _materialize(merged)
    threads_eff = _apply_threads(merged)
    out_dir = Path(out or "vrm2d-out/rotation-check")
    out_dir.mkdir(parents=True, exist_ok=True)

    base_summary, _ = _execute_run("heat", config, ropts, out_dir / "base",
                                   merged["snapshot_every"])
    rotated = RunOptions(velocity=ropts.velocity, theta=ropts.theta, p=ropts.p,
                         frame=math.radians(angle))
    rot_summary, _ = _execute_run("heat", config, rotated, out_dir / "rotated",
                                  merged["snapshot_every"])
    e0, e1 = base_summary["e_u"], rot_summary["e_u"]
    rel = abs(e0 - e1) / e0 if e0 else None
    summary = {
        "angle_degrees": angle,
        "e_u_base": e0,
        "e_u_rotated": e1,
        "relative_difference": rel,
        "base": base_summary,
        "rotated": rot_summary,
    }
    outputs = {"summary": "summary.json", "runs": ["base", "rotated"]}
    _finalize(out_dir, merged, "rotation-check", summary, outputs, threads_eff)
    click.echo(f"rotation {angle:g} deg: e_u {e0:.6e} -> {e1:.6e}"
               f" (relative difference {rel:.3e})")


if __name__ == "__main__":
    main()
