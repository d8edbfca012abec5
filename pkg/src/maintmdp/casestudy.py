"""Assemble the multi-component case study and its synthetic fragility data."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import damage, deterioration as det, fragility, hazard, mdp
from .config import RunConfig, read_scenarios
from .errors import ConfigError, ValidationError


@dataclass
class ComponentDynamics:
    """Everything needed to simulate one component's natural evolution."""

    name: str
    space: mdp.ComponentStateSpace
    cds_matrices: np.ndarray  # (n_tau, n_cds, n_cds); entry tau-1 for exposure state tau
    fragility: fragility.FragilityModel
    pmf: hazard.ImPmf
    p_event: float
    curve: hazard.HazardCurve
    kernel: np.ndarray  # (n_cds, n_sds, n_sds)

    def __post_init__(self):
        self.frag_table = fragility.transition_table(self.fragility, self.pmf.im_points)  # (i, l, k, j)


@dataclass
class CaseStudy:
    mdp: mdp.FactoredMdp
    dynamics: list
    cost_model: mdp.CostModel
    layout: hazard.SiteLayout
    params: det.GammaProcessParams
    tau_shift: int

    @property
    def names(self) -> tuple:
        return tuple(d.name for d in self.dynamics)

    @property
    def spaces(self) -> list:
        return [d.space for d in self.dynamics]

    def sizing(self) -> dict:
        return {
            "states_per_component": [d.space.total for d in self.dynamics],
            "joint_states": self.mdp.n_states,
            "actions_per_component": list(self.mdp.action_shape),
            "joint_actions": self.mdp.n_actions,
        }


def calibrate(cfg: RunConfig) -> det.GammaProcessParams:
    return det.calibrate_from_moments(cfg.det_mean, cfg.det_sd, cfg.det_b, cfg.det_T)


def build_cost_model(cfg: RunConfig) -> mdp.CostModel:
    rows = read_scenarios(cfg.scenarios)
    scenarios = {}
    for names, direct, mult, total in rows:
        if names in scenarios:
            raise ConfigError(f"duplicate failure scenario {sorted(names)}")
        scenarios[names] = mdp.FailureScenario(direct, mult, total)
    cm = mdp.CostModel(
        component_names=cfg.names,
        replacement_value=tuple(c.replacement_value for c in cfg.components),
        minor_repair_fraction=cfg.minor_fraction,
        major_repair_fraction=cfg.major_fraction,
        campaign_discounts=cfg.campaign_discounts,
        failure_scenarios=scenarios,
        gamma=cfg.gamma,
        horizon=cfg.horizon,
    )
    cm.check_complete()
    return cm


def site_layout(cfg: RunConfig) -> hazard.SiteLayout:
    return hazard.SiteLayout(np.array([c.position for c in cfg.components]), cfg.correlation_range)


def component_matrices(space, cds_matrices, kernel, tau_shift) -> np.ndarray:
    return np.stack(
        [
            mdp.do_nothing_matrix(space, cds_matrices, kernel),
            mdp.repair_matrix(space, mdp.MaintenanceAction.MINOR_REPAIR, tau_shift),
            mdp.repair_matrix(space, mdp.MaintenanceAction.MAJOR_REPAIR, tau_shift),
        ]
    )


def build_case_study(cfg: RunConfig, fragility_models=None, params=None) -> CaseStudy:
    """Factored MDP for the configured components.

    ``fragility_models`` overrides the model files named in the config.
    """
    params = params or calibrate(cfg)
    cds_scheme = det.CdsScheme(cfg.cds_thresholds)
    sds_scheme = damage.SdsScheme(cfg.sds_thresholds)
    space = mdp.ComponentStateSpace(sds_scheme.n_sds, cds_scheme.n_cds, cfg.n_tau)
    cds_set = det.build_transition_set(params, cds_scheme, cfg.n_tau)
    det.warn_fallback(cds_set)
    cost_model = build_cost_model(cfg)

    dyn, comps = [], []
    sds_labels = space.labels()[0]
    for k, c in enumerate(cfg.components):
        if fragility_models is not None:
            model = fragility_models[k]
        else:
            if not c.fragility_model.is_file():
                raise ConfigError(f"fragility model {c.fragility_model} not found; run fit-fragility first")
            model = fragility.load_model(c.fragility_model)
        if (model.n_sds, model.n_cds) != (space.n_sds, space.n_cds):
            raise ValidationError(
                f"{c.name}: fragility model is {model.n_sds}x{model.n_cds} but schemes give "
                f"{space.n_sds}x{space.n_cds}"
            )
        curve = hazard.HazardCurve.from_csv(c.hazard_curve)
        pmf = hazard.discretize_annual_im(curve, cfg.n_im_bins)
        p_event = hazard.annual_event_probability(curve)
        kernel = fragility.marginalize_over_hazard(model, pmf, p_event)
        mats = component_matrices(space, cds_set.matrices, kernel, cfg.tau_shift)
        comps.append(
            mdp.ComponentModel(
                c.name,
                mats,
                state_category=(sds_labels == space.n_sds).astype(np.int64),
                space=space,
                action_labels=tuple(a.label for a in mdp.MaintenanceAction),
            )
        )
        dyn.append(ComponentDynamics(c.name, space, cds_set.matrices, model, pmf, p_event, curve, kernel))

    action_shape = tuple(m.n_actions for m in comps)
    model = mdp.FactoredMdp(
        components=comps,
        action_costs=mdp.action_cost_vector(cost_model, action_shape),
        state_cost_table=mdp.failure_cost_table(cost_model),
        gamma=cfg.gamma,
        horizon=cfg.horizon,
        cost_model=cost_model,
        meta={"policy_meta": {
            "components": list(cfg.names),
            "component_state_order": "index = ((sds-1)*n_cds + (cds-1))*n_tau + (tau-1)",
            "component_shape": list(space.shape),
            "component_actions": [a.label for a in mdp.MaintenanceAction],
        }},
    )
    return CaseStudy(model, dyn, cost_model, site_layout(cfg), params, cfg.tau_shift)


def simulate_fragility_data(
    params: det.GammaProcessParams,
    cds_scheme: det.CdsScheme,
    sds_scheme: damage.SdsScheme,
    curve: hazard.HazardCurve,
    response: damage.SyntheticResponseModel,
    n_trajectories: int,
    horizon: int,
    rng: np.random.Generator,
) -> fragility.TransitionData:
    """Life-cycle Monte Carlo standing in for nonlinear time-history analysis.

    Each year: sample the section loss, check for an event, draw its
    intensity from the site hazard, draw a Park-Ang index conditioned on the
    current corrosion state and prior damage, and record the SDS transition.
    Components stay unrepaired; trajectories stop producing records once they
    reach the top SDS.
    """
    n = int(n_trajectories)
    paths = det.sample_path(params, float(horizon), 1.0, rng, size=n)
    p_event = hazard.annual_event_probability(curve)
    sds = np.ones(n, dtype=np.int64)
    cols = {k: [] for k in ("trajectory", "step", "prior_sds", "posterior_sds", "cds", "im")}
    traj = np.arange(n)
    for t in range(1, horizon + 1):
        cds = cds_scheme.classify(paths[:, t])
        event = rng.random(n) < p_event
        u = rng.random(n)
        live = event & (sds < sds_scheme.n_sds)
        if not np.any(live):
            continue
        im = hazard.inverse_conditional_im_cdf(curve, u[live])
        d_pa = np.atleast_1d(damage.generate_response(response, cds[live], sds[live], im, rng, sds_scheme))
        new = np.atleast_1d(damage.classify_sds(d_pa, sds_scheme))
        cols["trajectory"].append(traj[live])
        cols["step"].append(np.full(new.size, t))
        cols["prior_sds"].append(sds[live])
        cols["posterior_sds"].append(new)
        cols["cds"].append(cds[live])
        cols["im"].append(im)
        sds[live] = new
    if not cols["im"]:
        return fragility.TransitionData.empty()
    return fragility.TransitionData(*[np.concatenate(cols[k]) for k in cols])


def response_model(cfg_component) -> damage.SyntheticResponseModel:
    r = cfg_component.response
    return damage.SyntheticResponseModel(
        r.median_ref, r.im_ref, r.slope, r.dispersion, r.cds_factors, r.prior_factors
    )


def fit_component_fragilities(cfg: RunConfig, seed: int, n_trajectories: int | None = None,
                              options: fragility.FitOptions | None = None):
    """Generate synthetic data and fit one model per component.

    Returns ``[(model, data)]`` in component order.  Each component draws
    from its own child of ``SeedSequence(seed)``.
    """
    params = calibrate(cfg)
    cds_scheme = det.CdsScheme(cfg.cds_thresholds)
    sds_scheme = damage.SdsScheme(cfg.sds_thresholds)
    n = cfg.n_trajectories if n_trajectories is None else n_trajectories
    children = np.random.SeedSequence(seed).spawn(len(cfg.components))
    out = []
    for c, ss in zip(cfg.components, children):
        rng = np.random.default_rng(ss)
        curve = hazard.HazardCurve.from_csv(c.hazard_curve)
        data = simulate_fragility_data(
            params, cds_scheme, sds_scheme, curve, response_model(c), n, cfg.fit_horizon, rng
        )
        model = fragility.fit_mle(data, sds_scheme.n_sds, cds_scheme.n_cds, options)
        out.append((model, data))
    return out
