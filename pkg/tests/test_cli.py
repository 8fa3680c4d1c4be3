"""Command line tests: artifacts, config layering, error paths, determinism."""

import json
import math

import numpy as np
import pytest
from click.testing import CliRunner

from conftest import gaussian_blob
from vrm2d.cli import main
from vrm2d.cloud import read_snapshot, write_snapshot
from vrm2d.diagnostics import DiagnosticsWriter

TWO_PI = 2.0 * math.pi


@pytest.fixture
def runner():
    return CliRunner()


def read_json(path):
    with open(path, "r", encoding="ascii") as fh:
        return json.load(fh)


def csv_lines(path):
    return path.read_text(encoding="ascii").splitlines()


# ------------------------------------------------------------------ run


def test_run_heat_writes_all_artifacts(runner, tmp_path):
    out = tmp_path / "heat"
    res = runner.invoke(main, ["run", "heat", "--h", "0.2", "--t-end", "0.05",
                               "--out", str(out)])
    assert res.exit_code == 0, res.output
    assert res.output.startswith("heat h=0.2:")

    lines = csv_lines(out / "diagnostics.csv")
    assert lines[0] == DiagnosticsWriter.HEADER
    summary = read_json(out / "summary.json")
    assert summary["mode"] == "heat"
    assert len(lines) - 1 == summary["steps"] >= 2
    assert summary["i0_drift_max_rel"] <= 1e-13
    assert summary["e_u"] > 0.0 and math.isfinite(summary["e_u"])
    assert summary["n_final"] == int(lines[-1].split(",")[3])

    manifest = read_json(out / "manifest.json")
    assert manifest["mode"] == "heat"
    assert manifest["settings"]["h"] == 0.2
    assert manifest["settings"]["gamma"] == TWO_PI
    assert isinstance(manifest["jit_enabled"], bool)
    # every artifact named in the manifest exists
    outs = manifest["outputs"]
    for name in [outs["diagnostics"], outs["snapshot_final"], outs["summary"],
                 *outs["snapshots"]]:
        assert (out / name).is_file()
    final = read_snapshot(out / "snapshot_final.csv")
    assert final.n == summary["n_final"]


def test_run_ns_direct_reports_energy(runner, tmp_path):
    out = tmp_path / "ns"
    res = runner.invoke(main, ["run", "ns", "--h", "0.2", "--t-end", "0.02",
                               "--velocity", "direct", "--out", str(out)])
    assert res.exit_code == 0, res.output
    lines = csv_lines(out / "diagnostics.csv")
    e_col = lines[0].split(",").index("E")
    energies = [float(row.split(",")[e_col]) for row in lines[1:]]
    assert energies and all(math.isfinite(e) for e in energies)
    assert read_json(out / "summary.json")["mode"] == "ns"


def test_run_snapshot_every(runner, tmp_path):
    out = tmp_path / "snaps"
    res = runner.invoke(main, ["run", "heat", "--h", "0.2", "--t-end", "0.05",
                               "--snapshot-every", "2", "--out", str(out)])
    assert res.exit_code == 0, res.output
    manifest = read_json(out / "manifest.json")
    names = manifest["outputs"]["snapshots"]
    assert names == ["snapshot_000002.csv", "snapshot_000004.csv"]
    for name in names:
        assert read_snapshot(out / name).n > 0


def test_threads_request_recorded(runner, tmp_path):
    out = tmp_path / "thr"
    res = runner.invoke(main, ["run", "heat", "--h", "0.2", "--t-end", "0.01",
                               "--threads", "4", "--out", str(out)])
    assert res.exit_code == 0, res.output
    manifest = read_json(out / "manifest.json")
    assert manifest["threads_requested"] == 4
    eff = manifest["threads_effective"]
    assert isinstance(eff, int) and 1 <= eff <= 4


def test_repeat_runs_match_except_wall_times(runner, tmp_path):
    args = ["run", "heat", "--h", "0.2", "--t-end", "0.05", "--threads", "2"]
    outs = []
    for tag in ("a", "b"):
        out = tmp_path / tag
        res = runner.invoke(main, args + ["--out", str(out)])
        assert res.exit_code == 0, res.output
        outs.append(csv_lines(out / "diagnostics.csv"))
    header = outs[0][0].split(",")
    keep = [i for i, name in enumerate(header) if not name.startswith("wt_")]

    def strip(lines):
        return [",".join(row.split(",")[i] for i in keep) for row in lines]

    # identical settings reproduce every physics column bitwise; only the
    # wall-time columns may differ between runs
    assert strip(outs[0]) == strip(outs[1])


# ------------------------------------------------------------- config file


def test_config_file_precedence(runner, tmp_path):
    cfg = tmp_path / "settings.cfg"
    cfg.write_text(
        "# spacing chosen in the file\n"
        "h = 0.3\n"
        "nu = 0.01\n"
        "theta = 0.6\n"
        "c-diff = 0.5\n",
        encoding="ascii")
    out = tmp_path / "run"
    res = runner.invoke(main, ["run", "heat", "--config", str(cfg),
                               "--nu", "0.02", "--t-end", "0.01",
                               "--out", str(out)])
    assert res.exit_code == 0, res.output
    settings = read_json(out / "manifest.json")["settings"]
    assert settings["h"] == 0.3          # file beats default
    assert settings["nu"] == 0.02        # flag beats file
    assert settings["theta"] == 0.6
    assert settings["c_diff"] == 0.5     # hyphenated key accepted
    assert settings["gamma"] == TWO_PI   # untouched default


@pytest.mark.parametrize("body, needle", [
    ("h = 0.3\nfoo = 1\n", ":2: unknown setting 'foo'"),
    ("h 0.3\n", ":1: expected 'key = value'"),
    ("h = abc\n", ":1: bad value 'abc' for h"),
])
def test_config_file_errors_name_the_line(runner, tmp_path, body, needle):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(body, encoding="ascii")
    res = runner.invoke(main, ["run", "heat", "--config", str(cfg)])
    assert res.exit_code != 0
    assert needle in res.stderr


# ------------------------------------------------------------- error paths


@pytest.mark.parametrize("args", [
    ["run", "heat"],                                     # no spacing anywhere
    ["run", "heat", "--h", "-1"],
    ["run", "heat", "--h", "0.2", "--order", "3"],
    ["run", "bogus", "--h", "0.2"],
    ["run", "heat", "--h", "0.2", "--velocity", "bogus"],
    ["convergence", "--h-list", "0.2,0.1"],              # needs three spacings
    ["convergence", "--h-list", "a,b,c"],
    ["bench", "--snapshot", "no-such-file.csv", "--h", "0.1"],
])
def test_errors_exit_nonzero_with_one_reason_line(runner, args):
    res = runner.invoke(main, args)
    assert res.exit_code != 0
    assert res.stdout == ""
    reasons = [ln for ln in res.stderr.splitlines() if ln.startswith("Error: ")]
    assert len(reasons) == 1 and len(reasons[0]) > len("Error: ")


# ------------------------------------------------------------- convergence


def test_convergence_sweep_tabulates_and_fits(runner, tmp_path):
    out = tmp_path / "conv"
    res = runner.invoke(main, ["convergence", "--mode", "heat",
                               "--h-list", "0.4,0.3,0.2",
                               "--t-end", "0.02", "--out", str(out)])
    assert res.exit_code == 0, res.output
    lines = csv_lines(out / "convergence.csv")
    assert lines[0].startswith("h,e_u,n_final,")
    assert len(lines) == 4
    summary = read_json(out / "summary.json")
    assert summary["h_list"] == [0.4, 0.3, 0.2]
    assert isinstance(summary["slope_e_u"], float)
    assert len(summary["runs"]) == 3
    for h in ("0.4", "0.3", "0.2"):
        assert (out / f"h{h}" / "summary.json").is_file()
    assert "slope=" in res.output


# ---------------------------------------------------------- rotation check


def test_rotation_check_zero_angle_is_exact(runner, tmp_path):
    out = tmp_path / "rot"
    res = runner.invoke(main, ["rotation-check", "--angle", "0",
                               "--h", "0.2", "--t-end", "0.05",
                               "--out", str(out)])
    assert res.exit_code == 0, res.output
    summary = read_json(out / "summary.json")
    assert summary["angle_degrees"] == 0.0
    assert summary["e_u_base"] == summary["e_u_rotated"]
    assert summary["relative_difference"] == 0.0
    assert (out / "base" / "diagnostics.csv").is_file()
    assert (out / "rotated" / "diagnostics.csv").is_file()


# ------------------------------------------------------------------ bench


def test_bench_on_saved_snapshot(runner, tmp_path):
    rng = np.random.default_rng(7)
    cloud = gaussian_blob(rng, 0.1)
    snap = tmp_path / "cloud.csv"
    write_snapshot(cloud, snap)
    out = tmp_path / "bench"
    res = runner.invoke(main, ["bench", "--snapshot", str(snap),
                               "--h", "0.1", "--repeats", "2",
                               "--out", str(out)])
    assert res.exit_code == 0, res.output
    lines = csv_lines(out / "bench.csv")
    assert lines[0] == "name,n,median_seconds"
    names = [row.split(",")[0] for row in lines[1:]]
    assert names == ["build_small", "build_full",
                     "velocity_direct", "velocity_treecode"]
    summary = read_json(out / "summary.json")
    assert summary["repeats"] == 2
    assert summary["n"] >= cloud.n   # coverage sweep may add empty particles
    assert summary["full_over_small"] > 0.0
    assert summary["cloud_source"] == str(snap)


def test_bench_python_baseline_times_the_fallback_path(runner, tmp_path):
    rng = np.random.default_rng(11)
    cloud = gaussian_blob(rng, 0.2)
    snap = tmp_path / "small.csv"
    write_snapshot(cloud, snap)
    out = tmp_path / "bench"
    res = runner.invoke(main, ["bench", "--snapshot", str(snap),
                               "--h", "0.2", "--repeats", "1",
                               "--python-baseline", "--out", str(out)])
    assert res.exit_code == 0, res.output
    fallback = read_json(out / "summary.json")["python_fallback"]
    assert fallback["jit_enabled_child"] is False
    assert set(fallback["speedup"]) == {"build_small", "build_full",
                                        "velocity_direct", "velocity_treecode"}
    assert all(v > 0.0 for v in fallback["speedup"].values())
    assert "jit speedup" in res.output
    # the child benched the very same coverage-completed cloud
    child = read_json(out / "python-fallback" / "summary.json")
    assert child["n"] == read_snapshot(out / "bench_cloud.csv").n
