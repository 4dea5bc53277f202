import csv
import subprocess
import sys

import numpy as np
import pytest

from romflux.cli import _fine_d, main
from romflux.fields_io import SnapshotSet, read_array
from romflux.rom import RomTrajectory, write_trajectory_csv

TINY = """\
[mesh]
nx = 5
ny = 5
nz = 5
[physics]
nu = 1e-3
[time]
dt = 0.02
n_steps = 40
spinup_steps = 10
snapshot_stride = 2
[rom]
N_u = 4
N_p = 4
N_nut = 4
mode_counts = 2 3 4
[closure]
lookback = 3
epochs = 15
batch = 8
learning_rate = 1e-3
[paths]
case_dir = run
"""

RESULTS = [f"error_time_{k}.csv" for k in ("u", "p", "nut")] + \
          [f"error_modes_{k}.csv" for k in ("u", "p", "nut")] + \
          ["energy.csv", "enstrophy.csv", "summary.csv"]


def run(cfg, *args):
    return main([args[0], "--config", str(cfg), *args[1:]])


def test_unknown_subcommand_prints_usage_and_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["bogus", "--config", "x.cfg"])
    assert exc.value.code == 2
    assert "usage: romflux" in capsys.readouterr().err


def test_module_entry_point_exit_code(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "romflux", "frobnicate", "--config", "a"],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert "usage:" in proc.stderr


def test_missing_prerequisite_names_file_and_producer(tmp_path, capsys):
    cfg = tmp_path / "case.cfg"
    cfg.write_text(TINY)
    assert run(cfg, "pod") == 1
    err = capsys.readouterr().err
    assert "snapshots" in err and "romflux fom-run" in err


def test_bad_config_is_reported(tmp_path, capsys):
    cfg = tmp_path / "case.cfg"
    cfg.write_text("[mesh]\nnx = 1\n")
    assert run(cfg, "fom-run") == 1
    assert "case.cfg:2" in capsys.readouterr().err


def test_fine_interpolation():
    d = np.array([[0.0], [2.0], [6.0]])
    np.testing.assert_array_equal(_fine_d(d, 2)[:, 0], [0, 1, 2, 4, 6])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    cfg = root / "case.cfg"
    cfg.write_text(TINY)
    codes = {}
    for step in (["fom-run"], ["pod"], ["rom-offline"], ["closure-train"],
                 ["rom-online", "--mode", "oracle-d"], ["rom-online"], ["evaluate"],
                 ["emit-plots"]):
        codes[" ".join(step)] = run(cfg, *step)
    return cfg, root / "run", codes


def test_pipeline_stages_succeed(pipeline):
    _, _, codes = pipeline
    assert all(c == 0 for c in codes.values()), codes


def test_pipeline_writes_all_results(pipeline):
    _, case, _ = pipeline
    for name in RESULTS:
        assert (case / "results" / name).is_file(), name
    with open(case / "results" / "error_modes_u.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["n_modes"]) for r in rows] == [2, 3, 4]
    with open(case / "results" / "summary.csv", newline="") as fh:
        quantities = [r["quantity"] for r in csv.DictReader(fh)]
    assert quantities == ["u", "p", "nut", "energy", "enstrophy", "nut_coefficients_holdout"]
    assert (case / "results" / "plots" / "eigenvalues.csv").is_file()
    assert (case / "closure" / "lstm" / "training.csv").read_text().startswith(
        "epoch,train_mse,val_mse")


def test_evaluate_is_pure_function_of_artifacts(pipeline):
    cfg, case, _ = pipeline
    before = {n: (case / "results" / n).read_bytes() for n in RESULTS}
    assert run(cfg, "evaluate") == 0
    after = {n: (case / "results" / n).read_bytes() for n in RESULTS}
    assert before == after


def test_seeded_closure_training_is_reproducible(pipeline, tmp_path):
    cfg, case, _ = pipeline
    first = (case / "closure" / "lstm" / "training.csv").read_bytes()
    holdout = (case / "closure" / "lstm" / "holdout.csv").read_bytes()
    assert run(cfg, "closure-train") == 0
    assert (case / "closure" / "lstm" / "training.csv").read_bytes() == first
    assert (case / "closure" / "lstm" / "holdout.csv").read_bytes() == holdout


def test_refuses_to_overwrite_snapshots(pipeline, capsys):
    cfg, _, _ = pipeline
    assert run(cfg, "fom-run") == 1
    assert "already holds snapshots" in capsys.readouterr().err


def test_identical_rom_gives_zero_errors(tmp_path):
    """Full-rank bases and projected coefficients reproduce the FOM exactly."""
    cfg = tmp_path / "case.cfg"
    cfg.write_text(TINY.replace("n_steps = 40", "n_steps = 15")
                   .replace("spinup_steps = 10", "spinup_steps = 1")
                   .replace("snapshot_stride = 2", "snapshot_stride = 5").replace("nx = 5", "nx = 4")
                   .replace("ny = 5", "ny = 4").replace("nz = 5", "nz = 4"))
    for step in (["fom-run"], ["pod", "--modes", "4"], ["rom-offline", "--modes", "4"]):
        assert run(cfg, *step) == 0
    pod = SnapshotSet(tmp_path / "run" / "pod")
    coef = {k: _fine_d(read_array(pod, f"coef.{k}"), 5) for k in ("phi", "chi", "psi", "xi")}
    n = coef["phi"].shape[0]
    traj = RomTrajectory(0.02 * np.arange(n), coef["phi"], coef["chi"], coef["psi"], coef["xi"],
                         "oracle-d")
    path = tmp_path / "run" / "online" / "oracle-d_N4-4-4.csv"
    path.parent.mkdir(parents=True)
    write_trajectory_csv(path, traj)
    assert run(cfg, "evaluate", "--mode", "oracle-d", "--modes", "4") == 0
    for name in RESULTS:
        with open(tmp_path / "run" / "results" / name, newline="") as fh:
            for row in csv.DictReader(fh):
                if "relative_error" in row:
                    assert float(row["relative_error"]) <= 1e-12, (name, row)
