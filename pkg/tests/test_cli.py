import json
import subprocess
import sys

import numpy as np
import pytest

from refractive_vio import camera as cm
from refractive_vio.checks import JACOBIAN_NAMES
from refractive_vio.cli import main
from refractive_vio.dataset import read_dataset, read_pgm, read_state_log
from refractive_vio.simulator import SimTrajectory, sample_times


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "ds"
    assert main(["simulate", "--out", str(out), "--pattern", "rectangle", "--laps", "0.05", "--seed", "4", "--quiet"]) == 0
    return out


def test_check_jacobians_report(capsys):
    assert main(["check-jacobians", "--trials", "200"]) == 0
    lines = capsys.readouterr().out.splitlines()
    rows = [l for l in lines if "worst relative error" in l]
    assert [r.split()[0] for r in rows] == list(JACOBIAN_NAMES)
    assert all(r.endswith("PASS") for r in rows)


@pytest.mark.parametrize("name", JACOBIAN_NAMES)
def test_check_jacobians_detects_perturbation(name, capsys):
    assert main(["check-jacobians", "--trials", "20", "--perturb", name]) == 1
    out = capsys.readouterr().out
    failing = [l.split()[0] for l in out.splitlines() if l.endswith("FAIL")]
    assert failing == [name]
    assert "failing input" in out


def test_missing_dataset_names_path(tmp_path, capsys):
    missing = tmp_path / "no_such_dataset"
    assert main(["run", "--dataset", str(missing), "--out", str(tmp_path / "o")]) == 2
    assert str(missing) in capsys.readouterr().err


def test_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as err:
        main(["simulate", "--out", str(tmp_path / "x"), "--pattern", "spiral"])
    assert err.value.code == 2
    with pytest.raises(SystemExit) as err:
        main([])
    assert err.value.code == 2
    assert main(["run", "--dataset", str(tmp_path), "--out", str(tmp_path / "o"), "--n0", "0.5"]) == 2
    assert main(["rectify", "--dataset", str(tmp_path), "--out", str(tmp_path / "r"), "--n", "3"]) == 2


def test_simulate_writes_valid_deterministic_dataset(tmp_path, tiny_dataset):
    ds = read_dataset(tiny_dataset)
    duration = SimTrajectory("rectangle", laps=0.05).duration
    assert ds.num_frames == len(sample_times(duration, 10.0)) and ds.groundtruth is not None
    again = tmp_path / "again"
    assert main(["simulate", "--out", str(again), "--pattern", "rectangle", "--laps", "0.05", "--seed", "4", "--quiet"]) == 0
    for name in ("imu.csv", "groundtruth.csv", "config.txt", "simulation.json"):
        assert (again / name).read_bytes() == (tiny_dataset / name).read_bytes()
    for f in (tiny_dataset / "cam0").iterdir():
        assert (again / "cam0" / f.name).read_bytes() == f.read_bytes()
    # refusing to overwrite
    assert main(["simulate", "--out", str(again), "--laps", "0.05", "--quiet"]) == 2


def test_run_outputs(tmp_path, tiny_dataset, capsys):
    out = tmp_path / "run"
    assert main(["run", "--dataset", str(tiny_dataset), "--out", str(out), "--n0", "1.35", "--quiet"]) == 0
    records = read_state_log(out / "state.csv")
    assert len(records) > 20
    assert all(np.isfinite(r.n) for r in records)
    assert (out / "n_vs_time.csv").read_text().startswith("t_s,n,n_std\n")
    ape = json.loads((out / "ape.json").read_text())
    assert ape["count"] == len(records) and ape["rmse"] >= 0.0
    cfg = json.loads((out / "run_config.json").read_text())
    assert cfg["filter"]["n0"] == 1.35 and cfg["filter"]["heuristic"]["q"] == 0.5 and cfg["filter"]["heuristic"]["k"] == 0.8
    assert "ape_rmse=" in capsys.readouterr().out


def test_rectify_identity_and_invalid_fill(tmp_path, tiny_dataset):
    assert main(["rectify", "--dataset", str(tiny_dataset), "--n", "1.0", "--out", str(tmp_path / "r1")]) == 0
    ds = read_dataset(tiny_dataset)
    for i in (0, 7):
        rect = read_pgm(tmp_path / "r1" / f"{ds.frame_t_ns[i]}.pgm")
        assert np.array_equal(rect, ds.image(i))
    assert main(["rectify", "--dataset", str(tiny_dataset), "--n", "1.33", "--out", str(tmp_path / "r2")]) == 0
    _, _, valid = cm.rectification_map(ds.camera, 1.33)
    assert not valid.all()
    rect = read_pgm(tmp_path / "r2" / f"{ds.frame_t_ns[0]}.pgm")
    assert np.all(rect[~valid] == 128)


@pytest.mark.parametrize("command", ["run", "simulate", "check-jacobians", "rectify"])
def test_help_via_module(command):
    res = subprocess.run([sys.executable, "-m", "refractive_vio", command, "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "--" in res.stdout and "usage:" in res.stdout
