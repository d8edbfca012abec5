"""Command-line workflow: calibrate, fit-fragility, build, solve, simulate, compare.

Exit codes: 0 success, 2 validation error, 3 resource refusal, 4 numerical failure.
Every output file is a pure function of (config, seed, threads); timings go to
stdout only.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, casestudy, fragility, simulator, solver
from .config import DEFAULT_CONFIG, RunConfig, load_config
from .errors import ConfigError, ResourceError, ValidationError
from .npzio import save_npz

EXIT_OK, EXIT_VALIDATION, EXIT_RESOURCE, EXIT_NUMERIC = 0, 2, 3, 4
BUNDLED = {
    "default": DEFAULT_CONFIG,
    "full": DEFAULT_CONFIG,
    "reduced": DEFAULT_CONFIG.with_name("config_reduced.yaml"),
}
ORACLE_SAMPLE_STATES = 16


def _resolve_config(arg) -> Path:
    if arg is None:
        return DEFAULT_CONFIG
    return BUNDLED.get(arg, Path(arg))


@contextmanager
def _atomic(path: Path):
    """Write to a temporary sibling and rename, so failures leave no partial file."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _write_json(path: Path, doc) -> None:
    with _atomic(path) as tmp:
        tmp.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _seed(args, cfg: RunConfig) -> int:
    seed = args.seed if args.seed is not None else cfg.seed
    if seed is None:
        raise ConfigError("a seed is required (config 'seed' or --seed)")
    return int(seed)


def _fragility_models(cfg: RunConfig, out: Path):
    """Prefer freshly fitted models in the output directory over bundled ones."""
    models = []
    for c in cfg.components:
        local = out / c.fragility_model.name
        path = local if local.is_file() else c.fragility_model
        if not path.is_file():
            raise ConfigError(f"fragility model {path} not found; run fit-fragility first")
        models.append(fragility.load_model(path))
    return models


def _case(cfg: RunConfig, out: Path) -> casestudy.CaseStudy:
    return casestudy.build_case_study(cfg, fragility_models=_fragility_models(cfg, out))


# commands


def cmd_calibrate(args, cfg: RunConfig) -> int:
    params = casestudy.calibrate(cfg)
    m, s = params.mean(cfg.det_T), params.std(cfg.det_T)
    doc = {
        "a": params.a,
        "b": params.b,
        "beta": params.beta,
        "targets": {"mean": cfg.det_mean, "sd": cfg.det_sd, "time": cfg.det_T},
        "check": {"mean": m, "sd": s},
    }
    _write_json(args.out / "deterioration.json", doc)
    print(f"a = {params.a:.7g}  b = {params.b:g}  beta = {params.beta:.7g}")
    print(f"round trip at tau = {cfg.det_T:g}: mean {m:.6g} (target {cfg.det_mean:g}), "
          f"sd {s:.6g} (target {cfg.det_sd:g})")
    return EXIT_OK


def cmd_fit_fragility(args, cfg: RunConfig) -> int:
    seed = _seed(args, cfg)
    n = args.n_trajectories or cfg.n_trajectories
    fitted = casestudy.fit_component_fragilities(cfg, seed, n)
    flagged = []
    for c, (model, data) in zip(cfg.components, fitted):
        path = args.out / c.fragility_model.name
        with _atomic(path) as tmp:
            fragility.save_model(model, tmp)
        for key, d in model.diagnostics.items():
            if d["status"] != "converged" or d["n_records"] < args.min_records:
                flagged.append((c.name, key, d["status"], d["n_records"]))
        print(f"{c.name}: {len(data)} records -> {path}")
    for name, key, status, nrec in flagged:
        print(f"  flagged {name} context (i,l)=({key}): {status}, {nrec} records")
    if flagged and args.strict:
        return EXIT_NUMERIC
    return EXIT_OK


def _bundle_arrays(case: casestudy.CaseStudy) -> dict:
    m = case.mdp
    arrays = {f"matrices_{c.name}": c.matrices for c in m.components}
    arrays.update({f"category_{c.name}": c.state_category for c in m.components})
    arrays["action_costs"] = m.action_costs
    arrays["state_cost_table"] = m.state_cost_table
    return arrays


def cmd_build(args, cfg: RunConfig) -> int:
    case = _case(cfg, args.out)
    cm = case.cost_model
    scen = {
        "+".join(sorted(k, key=cm.component_names.index)): float(v.total)
        for k, v in sorted(cm.failure_scenarios.items(), key=lambda kv: (len(kv[0]), sorted(kv[0])))
    }
    doc = {
        "components": list(case.names),
        "sizing": case.sizing(),
        "gamma": cfg.gamma,
        "horizon": cfg.horizon,
        "deterioration": {"a": case.params.a, "b": case.params.b, "beta": case.params.beta},
        "annual_event_probability": {d.name: d.p_event for d in case.dynamics},
        "scenario_totals": scen,
        "action_costs": case.mdp.action_costs.tolist(),
    }
    _write_json(args.out / "model.json", doc)
    with _atomic(args.out / "model.npz") as tmp:
        save_npz(tmp, **_bundle_arrays(case))
    s = case.sizing()
    print(f"states per component: {s['states_per_component']}")
    print(f"joint states: {s['joint_states']:,}  joint actions: {s['joint_actions']}")
    for k, v in scen.items():
        print(f"  failure scenario {{{k}}}: {v:g}k")
    return EXIT_OK


def _load_mdp(cfg: RunConfig, out: Path) -> casestudy.CaseStudy:
    """Model from ``model.npz`` in the output directory, else built from config."""
    case = _case(cfg, out)
    bundle = out / "model.npz"
    if bundle.is_file():
        with np.load(bundle) as z:
            for comp in case.mdp.components:
                mats = z[f"matrices_{comp.name}"]
                if mats.shape != comp.matrices.shape:
                    raise ConfigError(f"{bundle}: component {comp.name} does not match the config; rebuild")
                comp.matrices = mats
    return case


def _sampled_oracle(case, result, rng_seed: int) -> float:
    """Bellman check on sampled states with explicitly formed joint rows."""
    m = case.mdp
    vals = result.all_values
    rng = np.random.default_rng(rng_seed)
    F = m.state_cost_vector()
    worst = 0.0
    for t in range(m.horizon):
        states = rng.choice(m.n_states, size=min(ORACLE_SAMPLE_STATES, m.n_states), replace=False)
        for s in states:
            parts = np.unravel_index(s, m.state_shape)
            q = np.empty(m.n_actions)
            for a in range(m.n_actions):
                row = np.ones(1)
                for comp, x, sk in zip(m.components, m.joint_action(a), parts):
                    row = np.kron(row, comp.matrices[x][sk])
                q[a] = F[s] + m.action_costs[a] + m.gamma * (row @ vals[t + 1])
            worst = max(worst, abs(q.min() - vals[t][s]))
    return worst


def cmd_solve(args, cfg: RunConfig) -> int:
    case = _load_mdp(cfg, args.out)
    m = case.mdp
    t0 = time.perf_counter()
    oracle_full = args.oracle and m.n_states <= cfg.oracle_cap
    result = solver.tensor_value_iteration(
        m, memory_budget=cfg.memory_budget_bytes, store_values=bool(args.oracle)
    )
    elapsed = time.perf_counter() - t0
    with _atomic(args.out / "policy.npz") as tmp:
        result.policy.save(tmp)
    with _atomic(args.out / "values_t0.npy") as tmp:
        with open(tmp, "wb") as fh:
            np.save(fh, result.values)
    report = {
        "sizing": case.sizing(),
        "predicted": result.report.predicted,
        "value_pristine": float(result.values[0]) if result.values.size else 0.0,
    }
    _write_json(args.out / "solve_report.json", report)
    print(f"solved {m.n_states:,} states x {m.n_actions} actions over {m.horizon} epochs "
          f"in {elapsed:.2f} s (planned memory {result.report.peak_memory_bytes / 2**20:.1f} MiB)")
    pred = result.report.predicted
    print(f"predicted per-update cost: tensor {pred['tensor_time']:.3e}, naive {pred['naive_time']:.3e}")
    if m.horizon:
        print(f"V_0(pristine) = {result.values[0]:.6f}")
    if args.oracle:
        if oracle_full:
            P, C = solver.flatten_mdp(m, cfg.oracle_cap)
            V, acts = solver.naive_value_iteration(P, C, m.gamma, m.horizon, cfg.oracle_cap)
            diff = float(np.max(np.abs(V - result.values))) if V.size else 0.0
            same = bool(np.array_equal(acts, result.policy.actions))
            print(f"oracle: naive value iteration max |V_tensor - V_naive| = {diff:.3e}, "
                  f"policies identical: {same}")
        else:
            diff = _sampled_oracle(case, result, 0)
            print(f"oracle: {m.n_states:,} states exceed the dense cap {cfg.oracle_cap}; "
                  f"Bellman check on {ORACLE_SAMPLE_STATES} sampled states per epoch with "
                  f"explicit joint rows: max discrepancy = {diff:.3e}")
        if diff > 1e-10:
            return EXIT_NUMERIC
    return EXIT_OK


def _policies(cfg: RunConfig, case, out: Path, names):
    rules = {r.name: r for r in simulator.load_cbm_rules(cfg.cbm_rules)}
    specs = []
    for name in names:
        if name.lower() == "optimal":
            path = out / "policy.npz"
            if not path.is_file():
                raise ConfigError(f"policy file {path} not found; run solve first")
            pol = solver.Policy.load(path)
            if tuple(pol.state_shape) != case.mdp.state_shape or pol.horizon != case.mdp.horizon:
                raise ConfigError(f"{path} does not match the configured model; re-run solve")
            specs.append(simulator.OptimalPolicy(pol, case.spaces))
        elif name.lower() == "noaction":
            specs.append(simulator.NoAction())
        elif name in rules:
            specs.append(rules[name])
        else:
            raise ConfigError(f"unknown policy {name!r}; choose Optimal, NoAction or one of {sorted(rules)}")
    return specs


def _run_policies(args, cfg, names, with_static: bool) -> int:
    seed = _seed(args, cfg)
    case = _case(cfg, args.out)
    specs = _policies(cfg, case, args.out, names)
    for y in cfg.snapshot_years:
        if not 1 <= y <= cfg.horizon:
            raise ConfigError(f"snapshot year {y} outside 1..{cfg.horizon}")
    n_runs = args.runs or cfg.n_runs
    metrics = []
    for spec in specs:
        t0 = time.perf_counter()
        m = simulator.simulate_lifecycle(
            case, spec, n_runs, seed, mode=cfg.hazard_mode, threads=args.threads,
            keep_trajectories=bool(args.trajectories),
        )
        metrics.append(m)
        s = m.summary()
        print(f"{spec.name:>9}: M/R {s['mr_cost']:10.2f}  risk {s['risk_cost']:10.2f}  "
              f"total {s['total']:10.2f} (se {s['total_se']:.2f})  [{time.perf_counter() - t0:.1f} s]")
    aep_rows = [
        (y, cfg.loss_grid, m.policy, simulator.aep_loss_curve(m, y, cfg.loss_grid))
        for m in metrics for y in cfg.snapshot_years
    ]
    if with_static:
        aep_rows.append((1, cfg.loss_grid, "Static", simulator.static_baseline_curve(case, cfg.loss_grid)))
    with _atomic(args.out / "failure_prob.csv") as tmp:
        simulator.write_failure_csv(tmp, metrics)
    with _atomic(args.out / "aep.csv") as tmp:
        simulator.write_aep_csv(tmp, aep_rows)
    with _atomic(args.out / "costs.csv") as tmp:
        simulator.write_costs_csv(tmp, simulator.cost_comparison(metrics))
    if args.trajectories:
        for m in metrics:
            with _atomic(args.out / f"trajectories_{m.policy}.csv") as tmp:
                simulator.write_trajectories_csv(tmp, m)
    return EXIT_OK


def cmd_simulate(args, cfg: RunConfig) -> int:
    return _run_policies(args, cfg, [args.policy], with_static=args.policy.lower() == "noaction")


def cmd_compare(args, cfg: RunConfig) -> int:
    names = ["Optimal", *cfg.cbm_rules.keys(), "NoAction"]
    return _run_policies(args, cfg, names, with_static=True)


COMMANDS = {
    "calibrate": cmd_calibrate,
    "fit-fragility": cmd_fit_fragility,
    "build": cmd_build,
    "solve": cmd_solve,
    "simulate": cmd_simulate,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config YAML, or 'default' / 'reduced' for the bundled case study")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker/BLAS threads")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--oracle", action="store_true", help="solve: cross-check against the naive solver")

    p = argparse.ArgumentParser(prog="maintmdp", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("calibrate", parents=[common], help="fit gamma-process parameters to moment targets")
    fit = sub.add_parser("fit-fragility", parents=[common], help="generate synthetic data and fit fragility models")
    fit.add_argument("--n-trajectories", type=int, help="life-cycle trajectories per component")
    fit.add_argument("--min-records", type=int, default=30, help="flag contexts with fewer records")
    fit.add_argument("--strict", action="store_true", help="exit 4 when any context is flagged")
    sub.add_parser("build", parents=[common], help="assemble the factored MDP bundle")
    sub.add_parser("solve", parents=[common], help="tensor value iteration")
    for name, helptext in (("simulate", "simulate one policy"), ("compare", "simulate all policies")):
        sp = sub.add_parser(name, parents=[common], help=helptext)
        sp.add_argument("--runs", type=int, help="Monte Carlo runs (overrides the config)")
        sp.add_argument("--trajectories", action="store_true", help="also write per-run trajectory logs")
        if name == "simulate":
            sp.add_argument("--policy", default="Optimal", help="Optimal, NoAction or a CBM rule name")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        for attr in ("runs", "n_trajectories"):
            if getattr(args, attr, None) is not None and getattr(args, attr) < 1:
                raise ConfigError(f"--{attr.replace('_', '-')} must be positive")
        cfg = load_config(_resolve_config(args.config))
        args.out.mkdir(parents=True, exist_ok=True)
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args, cfg)
    except ResourceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for k, v in exc.sizing.items():
            print(f"  {k}: {v}", file=sys.stderr)
        return EXIT_RESOURCE
    except (ValidationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
