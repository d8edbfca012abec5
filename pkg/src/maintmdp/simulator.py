"""Monte Carlo life-cycle simulation of the joint system under a policy.

Each run starts with every component pristine.  At epoch ``t`` the policy
picks a joint action from the observed state, the epoch cost
``failure_cost(s_t) + action_cost(a_t)`` is charged with discount
``gamma**t``, and the components move: repaired ones deterministically, the
others through one deterioration step followed by the seismic step.

Runs are processed in fixed-size chunks; chunk ``c`` draws from
``SeedSequence(seed, spawn_key=(c,))``, so results do not depend on how many
worker threads process the chunks.
"""

from __future__ import annotations

import csv
import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from .casestudy import CaseStudy
from .errors import ValidationError
from .hazard import build_correlation_matrix, cholesky_with_jitter
from .mdp import MaintenanceAction
from .solver import Policy

CHUNK_RUNS = 1000
HAZARD_MODES = ("independent", "correlated")


class PolicySpec:
    """Maps observed component states to component actions; subclasses set ``name``."""

    def actions(self, t: int, sds: np.ndarray, cds: np.ndarray, tau: np.ndarray) -> np.ndarray:
        """``(runs, N)`` action codes for ``(runs, N)`` label arrays."""
        raise NotImplementedError


class NoAction(PolicySpec):
    name = "NoAction"

    def actions(self, t, sds, cds, tau):
        return np.zeros(sds.shape, dtype=np.int64)

    def state_map(self, space) -> np.ndarray:
        return np.zeros(space.total, dtype=np.int64)


@dataclass
class CbmRule(PolicySpec):
    """Condition-based rule: ``grid[cds-1, sds-1]`` is the action for that cell."""

    name: str
    grid: np.ndarray

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.int64)
        if self.grid.ndim != 2 or np.any((self.grid < 0) | (self.grid > 2)):
            raise ValidationError(f"{self.name}: rule grid must hold action codes 0..2")

    @classmethod
    def from_predicates(cls, name: str, clauses: dict, n_cds: int = 3, n_sds: int = 3) -> "CbmRule":
        """Build from ``{action: [{cds: [...], sds: [...]}, ...]}``.

        Each list entry is a conjunction; entries of one action are OR-ed and
        a missing key matches every level.  Every (cds, sds) cell must match
        exactly one action.
        """
        hits = np.zeros((n_cds, n_sds), dtype=np.int64)
        grid = np.full((n_cds, n_sds), -1, dtype=np.int64)
        for label, terms in clauses.items():
            action = MaintenanceAction.parse(str(label))
            mask = np.zeros((n_cds, n_sds), dtype=bool)
            for term in terms or []:
                unknown = set(term) - {"cds", "sds"}
                if unknown:
                    raise ValidationError(f"{name}: unknown predicate keys {sorted(unknown)}")
                cds = term.get("cds", range(1, n_cds + 1))
                sds = term.get("sds", range(1, n_sds + 1))
                for c, s in itertools.product(cds, sds):
                    if not (1 <= c <= n_cds and 1 <= s <= n_sds):
                        raise ValidationError(f"{name}: cell (cds={c}, sds={s}) out of range")
                    mask[c - 1, s - 1] = True
            hits += mask
            grid[mask] = int(action)
        if np.any(hits == 0):
            c, s = np.argwhere(hits == 0)[0] + 1
            raise ValidationError(f"{name}: no action for cds={c}, sds={s}")
        if np.any(hits > 1):
            c, s = np.argwhere(hits > 1)[0] + 1
            raise ValidationError(f"{name}: several actions match cds={c}, sds={s}")
        return cls(name, grid)

    def action_for(self, cds: int, sds: int) -> MaintenanceAction:
        return MaintenanceAction(int(self.grid[cds - 1, sds - 1]))

    def actions(self, t, sds, cds, tau):
        return self.grid[cds - 1, sds - 1]

    def state_map(self, space) -> np.ndarray:
        """Action for every component state index (rules ignore exposure time)."""
        sds, cds, _ = space.labels()
        return self.grid[cds - 1, sds - 1]


def cbm_action(rule: CbmRule, cds: int, sds: int) -> MaintenanceAction:
    return rule.action_for(cds, sds)


def load_cbm_rules(cfg_rules: dict, n_cds: int = 3, n_sds: int = 3) -> list:
    return [CbmRule.from_predicates(name, clauses, n_cds, n_sds) for name, clauses in cfg_rules.items()]


@dataclass
class OptimalPolicy(PolicySpec):
    policy: Policy
    spaces: list
    name: str = "Optimal"

    def actions(self, t, sds, cds, tau):
        idx = [sp.encode(sds[:, k], cds[:, k], tau[:, k]) for k, sp in enumerate(self.spaces)]
        joint_s = np.ravel_multi_index(tuple(idx), self.policy.state_shape)
        joint_a = self.policy.actions[t, joint_s].astype(np.int64)
        return np.stack(np.unravel_index(joint_a, self.policy.action_shape), axis=1)


@dataclass
class LifecycleMetrics:
    policy: str
    n_runs: int
    years: np.ndarray  # 1..T
    failed_ever: np.ndarray  # (T, N) cumulative failure probability after year y
    failed_now: np.ndarray  # (T, N) probability of occupying the top SDS after year y
    system_any_cum: np.ndarray  # (T,)
    system_all_cum: np.ndarray
    system_all_now: np.ndarray
    annual_loss: np.ndarray  # (runs, T) undiscounted loss in year y
    mr_cost: np.ndarray  # (runs,) discounted
    risk_cost: np.ndarray  # (runs,)
    components: tuple = ()
    trajectories: list | None = None

    @property
    def total_cost(self) -> np.ndarray:
        return self.mr_cost + self.risk_cost

    def summary(self) -> dict:
        tot = self.total_cost
        return {
            "policy": self.policy,
            "mr_cost": float(np.mean(self.mr_cost)),
            "risk_cost": float(np.mean(self.risk_cost)),
            "total": float(np.mean(tot)),
            "total_se": float(np.std(tot, ddof=1) / np.sqrt(tot.size)) if tot.size > 1 else float("nan"),
        }

    def failure_se(self) -> np.ndarray:
        p = self.failed_ever
        return np.sqrt(p * (1 - p) / self.n_runs)


def _sample_categorical(cum: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Index of the first cumulative entry above ``u`` (row-wise)."""
    idx = (u[:, None] >= cum).sum(axis=1)
    return np.minimum(idx, cum.shape[1] - 1)


@dataclass
class _Prepared:
    cds_cum: list  # per component (n_tau, n_cds, n_cds)
    frag_cum: list  # per component (n_sds, n_cds, n_bins, n_sds)
    pmf_cum: list
    pmf_points: list
    p_event: np.ndarray
    action_costs: np.ndarray
    fail_table: np.ndarray
    chol: np.ndarray | None
    curves: list


def _prepare(case: CaseStudy, mode: str) -> _Prepared:
    if mode not in HAZARD_MODES:
        raise ValidationError(f"hazard mode must be one of {HAZARD_MODES}")
    dyn = case.dynamics
    chol = cholesky_with_jitter(build_correlation_matrix(case.layout)) if mode == "correlated" else None
    return _Prepared(
        cds_cum=[np.cumsum(d.cds_matrices, axis=2) for d in dyn],
        frag_cum=[np.cumsum(d.frag_table, axis=3) for d in dyn],
        pmf_cum=[np.cumsum(d.pmf.masses) for d in dyn],
        pmf_points=[d.pmf.im_points for d in dyn],
        p_event=np.array([d.p_event for d in dyn]),
        action_costs=case.mdp.action_costs,
        fail_table=case.mdp.state_cost_table,
        chol=chol,
        curves=[d.curve for d in dyn],
    )


def _simulate_chunk(case, prep, policy, n, horizon, rng, mode, keep_traj, run0):
    N = len(case.dynamics)
    space = case.dynamics[0].space
    n_sds, n_tau = space.n_sds, space.n_tau
    gamma = case.mdp.gamma
    sds = np.ones((n, N), dtype=np.int64)
    cds = np.ones((n, N), dtype=np.int64)
    tau = np.ones((n, N), dtype=np.int64)
    ever = np.zeros((n, N), dtype=bool)
    failed_ever = np.zeros((horizon, N))
    failed_now = np.zeros((horizon, N))
    sys_any = np.zeros(horizon)
    sys_all = np.zeros(horizon)
    sys_all_now = np.zeros(horizon)
    annual = np.zeros((n, horizon))
    mr = np.zeros(n)
    risk = np.zeros(n)
    traj = [] if keep_traj else None
    action_shape = (3,) * N
    rows = np.arange(n)

    for t in range(horizon):
        disc = gamma**t
        top = sds == n_sds
        fail_c = prep.fail_table[tuple(top[:, k].astype(np.int64) for k in range(N))]
        acts = np.asarray(policy.actions(t, sds, cds, tau), dtype=np.int64)
        a_idx = np.ravel_multi_index(tuple(acts[:, k] for k in range(N)), action_shape)
        act_c = prep.action_costs[a_idx]
        mr += disc * act_c
        risk += disc * fail_c
        if keep_traj:
            traj.append((t, sds.copy(), cds.copy(), tau.copy(), acts.copy(), act_c.copy(), fail_c.copy()))

        # draws happen in a fixed order whatever the policy does
        u_cds = rng.random((n, N))
        if mode == "independent":
            event = rng.random((n, N)) < prep.p_event[None, :]
            u_im = rng.random((n, N))
        else:
            common = rng.random(n) < prep.p_event.max()
            u_im = ndtr(rng.standard_normal((n, N)) @ prep.chol.T)
            # sites with a lower event rate see the common event with probability p_k / p_max
            thin = rng.random((n, N)) < (prep.p_event / prep.p_event.max())[None, :]
            event = common[:, None] & thin
        u_sds = rng.random((n, N))

        for k in range(N):
            a = acts[:, k]
            dn = a == MaintenanceAction.DO_NOTHING
            minor = a == MaintenanceAction.MINOR_REPAIR
            major = a == MaintenanceAction.MAJOR_REPAIR
            # repairs
            sds[minor, k] = np.maximum(sds[minor, k] - 1, 1)
            cds[minor, k] = np.maximum(cds[minor, k] - 1, 1)
            tau[minor, k] = np.maximum(tau[minor, k] - case.tau_shift, 1)
            sds[major, k] = 1
            cds[major, k] = 1
            tau[major, k] = 1
            # natural evolution
            if np.any(dn):
                r = rows[dn]
                cum = prep.cds_cum[k][tau[r, k] - 1, cds[r, k] - 1]
                new_cds = _sample_categorical(cum, u_cds[r, k]) + 1
                ev = event[r, k]
                new_sds = sds[r, k].copy()
                if np.any(ev):
                    re = r[ev]
                    if mode == "independent":
                        kbin = _sample_categorical(
                            np.broadcast_to(prep.pmf_cum[k], (re.size, prep.pmf_cum[k].size)), u_im[re, k]
                        )
                    else:
                        kbin = _im_bin(prep, k, u_im[re, k])
                    fc = prep.frag_cum[k][sds[re, k] - 1, new_cds[ev] - 1, kbin]
                    new_sds[ev] = _sample_categorical(fc, u_sds[re, k]) + 1
                sds[r, k] = new_sds
                cds[r, k] = new_cds
                tau[r, k] = np.minimum(tau[r, k] + 1, n_tau)
        top = sds == n_sds
        ever |= top
        failed_ever[t] = ever.sum(axis=0)
        failed_now[t] = top.sum(axis=0)
        sys_any[t] = np.any(ever, axis=1).sum()
        sys_all[t] = np.all(ever, axis=1).sum()
        sys_all_now[t] = np.all(top, axis=1).sum()
        # loss in year t+1: this epoch's action plus the failure state it ends in
        annual[:, t] = act_c + prep.fail_table[tuple(top[:, k].astype(np.int64) for k in range(N))]
    if keep_traj:
        traj = [(run0, item) for item in traj]
    return failed_ever, failed_now, sys_any, sys_all, sys_all_now, annual, mr, risk, traj


def _im_bin(prep: _Prepared, k: int, u: np.ndarray) -> np.ndarray:
    """Hazard bin of the intensity whose conditional CDF value is ``u``.

    Bin masses are differences of that CDF at the bin edges, so this equals
    sampling the intensity by inversion and taking its bin's representative
    point, as the kernel does.
    """
    return _sample_categorical(np.broadcast_to(prep.pmf_cum[k], (u.size, prep.pmf_cum[k].size)), u)


def simulate_lifecycle(
    case: CaseStudy,
    policy: PolicySpec,
    n_runs: int,
    seed: int,
    *,
    horizon: int | None = None,
    mode: str = "independent",
    threads: int = 1,
    keep_trajectories: bool = False,
) -> LifecycleMetrics:
    """Simulate ``n_runs`` life cycles from the pristine joint state.

    ``mode='independent'`` samples events and intensities per component from
    the same discretised hazard used to build the MDP, so the simulated
    dynamics are exactly the model's.  ``mode='correlated'`` draws one common
    event per year and a spatially correlated intensity field across sites.
    """
    if n_runs < 1:
        raise ValidationError("n_runs must be positive")
    T = case.mdp.horizon if horizon is None else int(horizon)
    prep = _prepare(case, mode)
    sizes = [min(CHUNK_RUNS, n_runs - s) for s in range(0, n_runs, CHUNK_RUNS)]

    def job(c):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(c,)))
        return _simulate_chunk(case, prep, policy, sizes[c], T, rng, mode, keep_trajectories, c * CHUNK_RUNS)

    if threads > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(job, range(len(sizes))))
    else:
        parts = [job(c) for c in range(len(sizes))]

    # reductions in chunk order keep results independent of the worker count
    def total(i):
        return np.sum(np.stack([p[i] for p in parts]), axis=0) / n_runs

    trajectories = None
    if keep_trajectories:
        trajectories = [p[8] for p in parts]
    return LifecycleMetrics(
        policy=policy.name,
        n_runs=n_runs,
        years=np.arange(1, T + 1),
        failed_ever=total(0),
        failed_now=total(1),
        system_any_cum=total(2),
        system_all_cum=total(3),
        system_all_now=total(4),
        annual_loss=np.concatenate([p[5] for p in parts], axis=0),
        mr_cost=np.concatenate([p[6] for p in parts]),
        risk_cost=np.concatenate([p[7] for p in parts]),
        components=case.names,
        trajectories=trajectories,
    )


def aep_loss_curve(metrics: LifecycleMetrics, year: int, loss_grid: Sequence[float]) -> np.ndarray:
    """Empirical ``P(loss in year >= x)``; a zero grid point counts positive losses only."""
    if not 1 <= year <= metrics.annual_loss.shape[1]:
        raise ValidationError(f"year must lie in 1..{metrics.annual_loss.shape[1]}")
    loss = metrics.annual_loss[:, year - 1]
    grid = np.asarray(loss_grid, dtype=float)
    out = np.array([np.mean(loss > 0) if x <= 0 else np.mean(loss >= x) for x in grid])
    return np.minimum.accumulate(out) if np.all(np.diff(grid) >= 0) else out


def one_step_failure_probabilities(case: CaseStudy) -> np.ndarray:
    """Per-component probability of being in the top SDS one year after a pristine start."""
    out = []
    for d in case.dynamics:
        D0 = d.cds_matrices[0][0]  # from CDS 1 at exposure state 1
        out.append(float(np.sum(D0 * d.kernel[:, 0, -1])))
    return np.array(out)


def static_baseline_curve(case: CaseStudy, loss_grid: Sequence[float]) -> np.ndarray:
    """One-year loss exceedance of the pristine system under DoNothing.

    Exact enumeration over the failure scenarios with independent components.
    """
    p = one_step_failure_probabilities(case)
    table = case.mdp.state_cost_table
    grid = np.asarray(loss_grid, dtype=float)
    out = np.zeros(grid.size)
    for bits in itertools.product((0, 1), repeat=p.size):
        prob = float(np.prod([pk if b else 1 - pk for pk, b in zip(p, bits)]))
        loss = table[bits]
        out += prob * np.where(grid <= 0, loss > 0, loss >= grid)
    return out


def cost_comparison(metrics_list: Sequence[LifecycleMetrics]) -> list:
    if not metrics_list:
        raise ValidationError("at least one policy is required")
    return [m.summary() for m in metrics_list]


# exports


def write_failure_csv(path, metrics_list: Sequence[LifecycleMetrics]) -> None:
    """Rows ``year, component, policy, probability, variant``.

    ``component`` is a component name, ``system_any`` or ``system_all``;
    ``variant`` is ``cumulative`` (ever failed by that year) or ``annual``
    (in the failed state at the end of that year).
    """
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["year", "component", "policy", "probability", "variant"])
        for m in metrics_list:
            for y_i, y in enumerate(m.years):
                for k, name in enumerate(m.components):
                    w.writerow([y, name, m.policy, _fmt(m.failed_ever[y_i, k]), "cumulative"])
                    w.writerow([y, name, m.policy, _fmt(m.failed_now[y_i, k]), "annual"])
                w.writerow([y, "system_any", m.policy, _fmt(m.system_any_cum[y_i]), "cumulative"])
                w.writerow([y, "system_all", m.policy, _fmt(m.system_all_cum[y_i]), "cumulative"])
                w.writerow([y, "system_all", m.policy, _fmt(m.system_all_now[y_i]), "annual"])


def write_aep_csv(path, rows) -> None:
    """``rows``: iterable of ``(year, loss_grid, policy, probabilities)``."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["year", "loss", "policy", "probability"])
        for year, grid, policy, probs in rows:
            for x, p in zip(grid, probs):
                w.writerow([year, _fmt(x), policy, _fmt(p)])


def write_costs_csv(path, summaries) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "mr_cost", "risk_cost", "total", "total_se"])
        for s in summaries:
            w.writerow([s["policy"], _fmt(s["mr_cost"]), _fmt(s["risk_cost"]), _fmt(s["total"]), _fmt(s["total_se"])])


def write_trajectories_csv(path, metrics: LifecycleMetrics) -> None:
    """One row per (run, year, component) with state, action and that epoch's costs."""
    if metrics.trajectories is None:
        raise ValidationError("simulation was run without keeping trajectories")
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "epoch", "component", "sds", "cds", "tau", "action", "action_cost", "failure_cost"])
        for chunk in metrics.trajectories:
            for run0, (t, sds, cds, tau, acts, ac, fc) in chunk:
                for r in range(sds.shape[0]):
                    for k, name in enumerate(metrics.components):
                        w.writerow([run0 + r, t, name, sds[r, k], cds[r, k], tau[r, k],
                                    MaintenanceAction(int(acts[r, k])).label, _fmt(ac[r]), _fmt(fc[r])])


def _fmt(x) -> str:
    return repr(float(x))
