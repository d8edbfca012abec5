import csv
import json

import numpy as np
import pytest

from maintmdp import cli, solver

from conftest import SMALL_EDITS, write_config


@pytest.fixture
def small_cfg(tmp_path):
    return write_config(tmp_path, SMALL_EDITS)


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_calibrate_writes_parameters(tmp_path, capsys):
    assert run("calibrate", "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "deterioration.json").read_text())
    assert doc["a"] == pytest.approx(0.080453, rel=1e-5)
    assert doc["check"]["sd"] == pytest.approx(0.075, rel=1e-12)
    assert "beta" in capsys.readouterr().out


def test_invalid_config_exit_codes(tmp_path):
    bad = write_config(tmp_path, {"deterioration": {"target_sd": -0.075}})
    assert run("calibrate", "--config", bad, "--out", tmp_path / "o") == 2
    assert run("calibrate", "--config", tmp_path / "missing.yaml", "--out", tmp_path / "o") == 2
    (tmp_path / "broken.yaml").write_text("seed: [unterminated\n")
    assert run("calibrate", "--config", tmp_path / "broken.yaml", "--out", tmp_path / "o") == 2
    overlapping = write_config(
        tmp_path, {"simulation": {"cbm_rules": {"X": {"DoNothing": [{}], "MajorRepair": [{"sds": [3]}]}}}}
    )
    assert run("simulate", "--config", overlapping, "--policy", "X", "--out", tmp_path / "o") == 2
    assert run("calibrate", "--threads", 0, "--out", tmp_path / "o") == 2


def test_missing_policy_file(small_cfg, tmp_path):
    assert run("simulate", "--config", small_cfg, "--out", tmp_path / "empty") == 2
    assert run("simulate", "--config", small_cfg, "--policy", "Nope", "--out", tmp_path / "empty") == 2


def test_full_model_is_refused_with_sizing(tmp_path, capsys):
    assert run("solve", "--config", "full", "--out", tmp_path) == 3
    err = capsys.readouterr().err
    assert "exceeds budget" in err and "total" in err
    assert not (tmp_path / "policy.npz").exists()


def test_zero_horizon_solve(tmp_path):
    cfg = write_config(tmp_path, {"mdp": {"n_tau": 2, "horizon": 0}})
    assert run("solve", "--config", cfg, "--out", tmp_path / "o") == 0
    pol = solver.Policy.load(tmp_path / "o" / "policy.npz")
    assert pol.horizon == 0
    assert np.all(np.load(tmp_path / "o" / "values_t0.npy") == 0)


def test_solve_with_dense_oracle(tmp_path, capsys):
    cfg = write_config(tmp_path, {"mdp": {"n_tau": 1, "horizon": 5}})
    assert run("solve", "--config", cfg, "--out", tmp_path / "o", "--oracle") == 0
    assert "policies identical: True" in capsys.readouterr().out


def test_workflow(small_cfg, tmp_path, capsys):
    out = tmp_path / "out"
    assert run("fit-fragility", "--config", small_cfg, "--out", out) == 0
    assert {p.name for p in out.glob("fragility_*.json")} == {"fragility_A.json", "fragility_B.json", "fragility_C.json"}
    assert run("build", "--config", small_cfg, "--out", out) == 0
    model = json.loads((out / "model.json").read_text())
    assert model["sizing"]["joint_states"] == 27**3
    assert model["scenario_totals"]["A+B+C"] == 5700
    assert run("solve", "--config", small_cfg, "--out", out, "--oracle") == 0
    assert "sampled states" in capsys.readouterr().out
    assert run("simulate", "--config", small_cfg, "--out", out, "--trajectories", "--runs", 50) == 0
    traj = list(csv.DictReader((out / "trajectories_Optimal.csv").open()))
    assert len(traj) == 50 * 6 * 3
    assert run("compare", "--config", small_cfg, "--out", out) == 0
    costs = {r["policy"]: r for r in csv.DictReader((out / "costs.csv").open())}
    assert set(costs) == {"Optimal", "CBM1", "CBM2", "CBM3", "NoAction"}
    aep = list(csv.DictReader((out / "aep.csv").open()))
    assert any(r["policy"] == "Static" for r in aep)
    assert {int(r["year"]) for r in aep} == {1, 3, 6}


def test_strict_fit_flags_sparse_contexts(tmp_path):
    cfg = write_config(tmp_path, {"fragility": {"n_trajectories": 20, "horizon": 5}})
    assert run("fit-fragility", "--config", cfg, "--out", tmp_path / "o", "--strict") == 4
    assert run("fit-fragility", "--config", cfg, "--out", tmp_path / "p") == 0


def test_seed_is_required(tmp_path):
    cfg = write_config(tmp_path, {"seed": None, **SMALL_EDITS})
    assert run("fit-fragility", "--config", cfg, "--out", tmp_path / "o") == 2
    assert run("fit-fragility", "--config", cfg, "--seed", 3, "--n-trajectories", 50, "--out", tmp_path / "o") == 0


@pytest.mark.slow
def test_reduced_solve_with_sampled_oracle(tmp_path, capsys):
    assert run("solve", "--config", "reduced", "--out", tmp_path, "--oracle") == 0
    out = capsys.readouterr().out
    assert "729,000 states" in out
    diff = float(out.split("max discrepancy = ")[1].split()[0])
    assert diff <= 1e-10
