import csv
import dataclasses

import numpy as np
import pytest

from maintmdp import simulator as sim, solver
from maintmdp.errors import ValidationError


@pytest.fixture(scope="module")
def rules(default_cfg):
    return {r.name: r for r in sim.load_cbm_rules(default_cfg.cbm_rules)}


@pytest.fixture(scope="module")
def small_solution(small_case):
    return solver.tensor_value_iteration(small_case.mdp)


def stationary(case, spec):
    maps = [spec.state_map(sp) for sp in case.spaces]
    return solver.joint_policy_from_components(case.mdp, maps)


def test_cbm_grids(rules):
    # rows are CDS 1..3, columns SDS 1..3; 0 DoNothing, 1 Minor, 2 Major
    np.testing.assert_array_equal(rules["CBM1"].grid, [[0, 1, 2], [0, 1, 2], [2, 2, 2]])
    np.testing.assert_array_equal(rules["CBM2"].grid, [[0, 2, 2], [1, 2, 2], [2, 2, 2]])
    np.testing.assert_array_equal(rules["CBM3"].grid, [[0, 0, 2], [0, 0, 2], [1, 1, 2]])
    assert sim.cbm_action(rules["CBM3"], 3, 1).label == "MinorRepair"


def test_cbm_predicates_must_partition():
    with pytest.raises(ValidationError, match="several actions"):
        sim.CbmRule.from_predicates("x", {"DoNothing": [{"cds": [1, 2, 3]}], "MajorRepair": [{"sds": [3]}]})
    with pytest.raises(ValidationError, match="no action"):
        sim.CbmRule.from_predicates("x", {"DoNothing": [{"cds": [1, 2]}]})
    with pytest.raises(ValidationError):
        sim.CbmRule.from_predicates("x", {"DoNothing": [{"cds": [4]}]})
    with pytest.raises(ValidationError):
        sim.CbmRule.from_predicates("x", {"DoNothing": [{"age": [1]}]})


def test_runs_are_reproducible_and_thread_independent(small_case, rules):
    a = sim.simulate_lifecycle(small_case, rules["CBM1"], 2500, seed=5, threads=1)
    b = sim.simulate_lifecycle(small_case, rules["CBM1"], 2500, seed=5, threads=3)
    assert np.array_equal(a.total_cost, b.total_cost)
    assert np.array_equal(a.failed_ever, b.failed_ever)
    c = sim.simulate_lifecycle(small_case, rules["CBM1"], 2500, seed=6)
    assert not np.array_equal(a.total_cost, c.total_cost)


def test_failure_probability_invariants(small_case):
    m = sim.simulate_lifecycle(small_case, sim.NoAction(), 3000, seed=1)
    assert np.all(np.diff(m.failed_ever, axis=0) >= 0)
    assert np.all(m.failed_now <= m.failed_ever + 1e-15)
    # without repairs a failed component stays failed
    np.testing.assert_array_equal(m.failed_now, m.failed_ever)
    assert np.all(m.system_all_cum <= m.failed_ever.min(axis=1) + 1e-15)
    assert np.all(m.system_any_cum >= m.failed_ever.max(axis=1) - 1e-15)
    assert np.all(m.failure_se() >= 0)


def test_zero_hazard_means_no_failures(small_case):
    quiet = dataclasses.replace(
        small_case, dynamics=[dataclasses.replace(d, p_event=0.0) for d in small_case.dynamics]
    )
    m = sim.simulate_lifecycle(quiet, sim.NoAction(), 500, seed=2)
    assert m.failed_ever.max() == 0
    assert m.risk_cost.max() == 0 and m.mr_cost.max() == 0


@pytest.mark.parametrize("policy", ["NoAction", "CBM1", "CBM3"])
def test_simulated_cost_matches_exact_evaluation(small_case, rules, policy):
    spec = sim.NoAction() if policy == "NoAction" else rules[policy]
    exact = solver.evaluate_policy(small_case.mdp, stationary(small_case, spec))[0]
    s = sim.simulate_lifecycle(small_case, spec, 8000, seed=11).summary()
    assert abs(s["total"] - exact) <= 3.5 * s["total_se"]


def test_optimal_policy_simulation(small_case, small_solution, rules):
    opt = sim.OptimalPolicy(small_solution.policy, small_case.spaces)
    s = sim.simulate_lifecycle(small_case, opt, 8000, seed=12).summary()
    assert abs(s["total"] - small_solution.values[0]) <= 3.5 * s["total_se"]
    for r in rules.values():
        assert solver.evaluate_policy(small_case.mdp, stationary(small_case, r))[0] >= small_solution.values[0]


def test_static_baseline_matches_first_year(small_case):
    grid = [0, 550, 960, 1990, 5700]
    base = sim.static_baseline_curve(small_case, grid)
    assert np.all(np.diff(base) <= 0)
    m = sim.simulate_lifecycle(small_case, sim.NoAction(), 20_000, seed=3)
    emp = sim.aep_loss_curve(m, 1, grid)
    se = np.sqrt(base * (1 - base) / 20_000)
    assert np.all(np.abs(emp - base) <= 4 * se + 1e-12)
    p = sim.one_step_failure_probabilities(small_case)
    np.testing.assert_allclose(m.failed_ever[0], p, atol=4 * np.sqrt(p.max() / 20_000))


def test_correlated_mode_keeps_marginals(small_case):
    m = sim.simulate_lifecycle(small_case, sim.NoAction(), 20_000, seed=4, mode="correlated")
    p = sim.one_step_failure_probabilities(small_case)
    np.testing.assert_allclose(m.failed_ever[0], p, atol=4 * np.sqrt(p.max() / 20_000))
    with pytest.raises(ValidationError):
        sim.simulate_lifecycle(small_case, sim.NoAction(), 10, seed=4, mode="other")


def test_aep_curve_and_errors(small_case, rules):
    m = sim.simulate_lifecycle(small_case, rules["CBM1"], 1000, seed=9, horizon=5)
    assert m.annual_loss.shape == (1000, 5)
    curve = sim.aep_loss_curve(m, 5, [0, 100, 550, 5700])
    assert np.all(np.diff(curve) <= 0) and curve[0] <= 1
    with pytest.raises(ValidationError):
        sim.aep_loss_curve(m, 6, [0])
    with pytest.raises(ValidationError):
        sim.simulate_lifecycle(small_case, rules["CBM1"], 0, seed=9)
    with pytest.raises(ValidationError):
        sim.cost_comparison([])


def test_exports(tmp_path, small_case, rules):
    m = sim.simulate_lifecycle(small_case, rules["CBM2"], 20, seed=1, horizon=3, keep_trajectories=True)
    sim.write_failure_csv(tmp_path / "f.csv", [m])
    sim.write_costs_csv(tmp_path / "c.csv", sim.cost_comparison([m]))
    sim.write_aep_csv(tmp_path / "a.csv", [(1, [0, 550], "CBM2", sim.aep_loss_curve(m, 1, [0, 550]))])
    sim.write_trajectories_csv(tmp_path / "t.csv", m)
    rows = list(csv.DictReader((tmp_path / "f.csv").open()))
    assert len(rows) == 3 * (3 * 2 + 3)
    assert {r["variant"] for r in rows} == {"cumulative", "annual"}
    cost = list(csv.DictReader((tmp_path / "c.csv").open()))[0]
    assert float(cost["total"]) == pytest.approx(m.summary()["total"])
    traj = list(csv.DictReader((tmp_path / "t.csv").open()))
    assert len(traj) == 20 * 3 * 3
    assert traj[0]["action"] == "DoNothing" and traj[0]["sds"] == "1"
    plain = sim.simulate_lifecycle(small_case, rules["CBM2"], 5, seed=1, horizon=2)
    with pytest.raises(ValidationError):
        sim.write_trajectories_csv(tmp_path / "x.csv", plain)
