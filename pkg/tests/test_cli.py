"""End-to-end runs of the console entry point in subprocesses."""

import json
import math
import os
import subprocess

import pytest

from singfock.io import load_checkpoint, read_csv

FLAT_GEODESIC_CONFIG = {
    "geometry": {"mass_parameter": 0.0, "charge": 1.0},
    "ensemble": {"master_seed": 2},
}

SMALL_ENSEMBLE_CONFIG = {
    "geometry": {"mass_parameter": 0.0, "charge": 0.3},
    "grid": {"n_radial_cells": 12, "r_max": 1.2, "n_theta": 2, "n_phi": 4},
    "evolution": {"dt": 1.25e-4, "horizon": 0.01},
    "ensemble": {"master_seed": 21, "n_traj": 60,
                 "checkpoint_times": [0.0025, 0.005, 0.0075, 0.01]},
}

EVOLVE_CONFIG = {
    "geometry": {"mass_parameter": 1.0, "charge": 2.0},
    "grid": {"n_radial_cells": 6, "r_max": 1.2, "n_theta": 2, "n_phi": 4},
    "evolution": {"dt": 0.005, "horizon": 0.01},
    "ensemble": {"master_seed": 9, "checkpoint_times": [0.005]},
}


def run_cli(*argv, env_extra=None, cwd=None):
    env = dict(os.environ)
    if env_extra:
        env.update(env_extra)
    return subprocess.run(("singfock",) + argv, capture_output=True,
                          text=True, env=env, cwd=cwd, timeout=300)


def write_config(tmp_path, data, name="config.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return p


def volatile_free(path):
    """Artifact lines with the timestamp and wall-clock entries removed."""
    keep = []
    for line in path.read_text().splitlines():
        s = line.strip()
        if s.startswith("# generated=") or '"generated"' in s \
                or '"runtime_s"' in s:
            continue
        keep.append(line)
    return keep


class TestUsageErrors:
    def test_no_config_no_seed(self):
        res = run_cli("audit")
        assert res.returncode == 2
        assert "provide --config or --seed" in res.stderr

    def test_unknown_subcommand(self):
        res = run_cli("spectra", "--seed", "1")
        assert res.returncode == 2

    def test_missing_config_file(self, tmp_path):
        res = run_cli("audit", "--config", str(tmp_path / "gone.json"))
        assert res.returncode == 2
        assert "not found" in res.stderr

    def test_invalid_config_content(self, tmp_path):
        p = write_config(tmp_path, {"ensemble": {}})
        res = run_cli("audit", "--config", str(p))
        assert res.returncode == 2
        assert "master_seed" in res.stderr


class TestGeodesics:
    def test_flat_ray_value_in_csv(self, tmp_path):
        p = write_config(tmp_path, FLAT_GEODESIC_CONFIG)
        out = tmp_path / "out"
        res = run_cli("geodesics", "--config", str(p), "--out", str(out))
        assert res.returncode == 0, res.stderr
        cols, rows = read_csv(out / "geodesics.csv")
        assert cols == ["r", "t_outgoing"]
        by_r = {float(r[0]): float(r[1]) for r in rows}
        assert 1.0 in by_r
        assert by_r[1.0] == pytest.approx(1.0 - math.pi / 4.0, abs=1e-8)

    def test_rerun_is_byte_identical_modulo_timestamps(self, tmp_path):
        p = write_config(tmp_path, FLAT_GEODESIC_CONFIG)
        outs = []
        for tag in ("a", "b"):
            out = tmp_path / tag
            res = run_cli("geodesics", "--config", str(p), "--out", str(out))
            assert res.returncode == 0, res.stderr
            outs.append(out)
        names = sorted(f.name for f in outs[0].iterdir())
        assert names == sorted(f.name for f in outs[1].iterdir())
        for name in names:
            assert volatile_free(outs[0] / name) == \
                volatile_free(outs[1] / name), name

    def test_report_and_meta_share_config_digest(self, tmp_path):
        p = write_config(tmp_path, FLAT_GEODESIC_CONFIG)
        out = tmp_path / "out"
        res = run_cli("geodesics", "--config", str(p), "--out", str(out))
        assert res.returncode == 0, res.stderr
        meta = json.loads((out / "run_meta.json").read_text())
        rep = json.loads((out / "geodesics_report.json").read_text())
        assert meta["digest"] == rep["digest"]
        assert len(meta["digest"]) == 12


class TestOutputRouting:
    def test_env_root_honored(self, tmp_path):
        root = tmp_path / "env_root"
        res = run_cli("geodesics", "--seed", "5",
                      env_extra={"SINGFOCK_OUT": str(root)})
        assert res.returncode == 0, res.stderr
        dirs = list(root.glob("geodesics-*"))
        assert len(dirs) == 1
        assert (dirs[0] / "run_meta.json").is_file()

    def test_out_flag_beats_env(self, tmp_path):
        root = tmp_path / "ignored"
        out = tmp_path / "direct"
        res = run_cli("geodesics", "--seed", "5", "--out", str(out),
                      env_extra={"SINGFOCK_OUT": str(root)})
        assert res.returncode == 0, res.stderr
        assert (out / "run_meta.json").is_file()
        assert not root.exists()

    def test_seed_flag_overrides_config(self, tmp_path):
        p = write_config(tmp_path, FLAT_GEODESIC_CONFIG)
        out = tmp_path / "out"
        res = run_cli("geodesics", "--config", str(p), "--seed", "77",
                      "--out", str(out))
        assert res.returncode == 0, res.stderr
        meta = json.loads((out / "run_meta.json").read_text())
        assert meta["master_seed"] == 77


class TestEvolve:
    def test_checkpoints_and_timeline(self, tmp_path):
        p = write_config(tmp_path, EVOLVE_CONFIG)
        out = tmp_path / "out"
        res = run_cli("evolve", "--config", str(p), "--out", str(out))
        assert res.returncode == 0, res.stderr
        cols, rows = read_csv(out / "timeline.csv")
        assert cols == ["time", "mass_empty", "mass_one", "mass_two",
                        "norm_drift"]
        assert len(rows) == 3  # start plus two steps
        assert float(rows[0][1]) == pytest.approx(1.0)
        assert abs(float(rows[-1][4])) < 1e-10

        cps = sorted(out.glob("checkpoint_*.sfck"))
        assert [c.name for c in cps] == ["checkpoint_000.sfck",
                                         "checkpoint_001.sfck"]
        final = load_checkpoint(cps[1])
        assert final.time == pytest.approx(0.01)
        assert final.total_norm_sq() == pytest.approx(1.0, abs=1e-10)
        # checkpoint and timeline describe the same state
        masses = final.sector_masses()
        assert masses[0] == pytest.approx(float(rows[-1][1]), rel=1e-14)
        assert masses[1] == pytest.approx(float(rows[-1][2]), rel=1e-14)
        # the coupling pumps the vacuum, so sector 1 must hold mass by now
        assert masses[1] > 1e-3


class TestSuiteFailurePath:
    def test_undersampled_ensemble_reports_failure(self, tmp_path):
        p = write_config(tmp_path, SMALL_ENSEMBLE_CONFIG)
        out = tmp_path / "out"
        res = run_cli("equivariance", "--config", str(p), "--out", str(out))
        assert res.returncode == 1
        assert "FAIL" in res.stdout
        # artifacts still land on the failure path
        cols, rows = read_csv(out / "equivariance_metrics.csv")
        assert cols == ["name", "value", "tolerance", "op", "passed", "note"]
        failed = [r for r in rows if r[4] == "0"]
        assert failed
        assert (out / "equivariance_report.json").is_file()
        assert (out / "equivariance_tv.csv").is_file()
