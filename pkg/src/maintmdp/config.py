"""Run configuration: one YAML file with a section per module.

Relative paths are resolved against the directory holding the config file.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import yaml

from .errors import ConfigError

DEFAULT_CONFIG = Path(__file__).parent / "data" / "case_study" / "config.yaml"


@dataclass(frozen=True)
class ResponseParams:
    median_ref: float
    im_ref: float
    slope: float
    dispersion: float
    cds_factors: tuple
    prior_factors: tuple


@dataclass(frozen=True)
class ComponentConfig:
    name: str
    replacement_value: Fraction
    hazard_curve: Path
    position: tuple
    fragility_model: Path
    response: ResponseParams


@dataclass(frozen=True)
class RunConfig:
    source: Path
    components: tuple
    correlation_range: float
    n_im_bins: int
    hazard_mode: str
    det_mean: float
    det_sd: float
    det_b: float
    det_T: float
    cds_thresholds: tuple
    sds_thresholds: tuple
    n_tau: int
    tau_shift: int
    minor_fraction: Fraction
    major_fraction: Fraction
    campaign_discounts: dict
    scenarios: Path
    gamma: float
    horizon: int
    memory_budget_bytes: int
    oracle_cap: int
    n_trajectories: int
    fit_horizon: int
    n_runs: int
    snapshot_years: tuple
    loss_grid: tuple
    cbm_rules: dict
    seed: int | None
    extras: dict = field(default_factory=dict)

    @property
    def names(self) -> tuple:
        return tuple(c.name for c in self.components)

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **kw)


def _get(section: dict, key: str, where: str):
    if key not in section:
        raise ConfigError(f"config section '{where}' is missing '{key}'")
    return section[key]


def _positive(value, name, integer=False):
    try:
        v = int(value) if integer else float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a number, got {value!r}") from None
    if integer and float(value) != v:
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    if not v > 0:
        raise ConfigError(f"{name} must be positive, got {value!r}")
    return v


def _frac(x) -> Fraction:
    return Fraction(str(x))


def load_config(path=None) -> RunConfig:
    path = Path(path) if path is not None else DEFAULT_CONFIG
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    base = path.parent

    def sec(name):
        s = doc.get(name)
        if not isinstance(s, dict):
            raise ConfigError(f"config is missing section '{name}'")
        return s

    hz, det, dmg, mdp, sol, frg, sim = (
        sec(n) for n in ("hazard", "deterioration", "damage", "mdp", "solver", "fragility", "simulation")
    )
    comps = []
    raw = doc.get("components")
    if not isinstance(raw, list) or not raw:
        raise ConfigError("config needs a non-empty 'components' list")
    for c in raw:
        name = str(_get(c, "name", "components"))
        r = _get(c, "response", f"components.{name}")
        comps.append(
            ComponentConfig(
                name=name,
                replacement_value=_frac(_get(c, "replacement_value", f"components.{name}")),
                hazard_curve=base / _get(c, "hazard_curve", f"components.{name}"),
                position=tuple(float(v) for v in _get(c, "position", f"components.{name}")),
                fragility_model=base / _get(c, "fragility_model", f"components.{name}"),
                response=ResponseParams(
                    float(r["median_ref"]), float(r["im_ref"]), float(r["slope"]),
                    float(r["dispersion"]), tuple(r["cds_factors"]), tuple(r["prior_factors"]),
                ),
            )
        )
    if len({c.name for c in comps}) != len(comps):
        raise ConfigError("component names must be unique")

    cds_th = tuple(float(x) for x in _get(det, "cds_thresholds", "deterioration"))
    sds_th = tuple(float(x) for x in _get(dmg, "sds_thresholds", "damage"))
    for c in comps:
        if len(c.response.cds_factors) != len(cds_th) + 1:
            raise ConfigError(f"{c.name}: one CDS factor per corrosion state is required")
        if len(c.response.prior_factors) != len(sds_th) + 1:
            raise ConfigError(f"{c.name}: one prior factor per seismic state is required")

    mode = str(sim.get("hazard_mode", "independent"))
    if mode not in ("independent", "correlated"):
        raise ConfigError("simulation.hazard_mode must be 'independent' or 'correlated'")
    seed = doc.get("seed")
    if seed is not None and (not isinstance(seed, int) or seed < 0):
        raise ConfigError("seed must be a non-negative integer")
    horizon = int(_get(mdp, "horizon", "mdp"))
    if horizon < 0:
        raise ConfigError("mdp.horizon must be non-negative")
    gamma = float(_get(mdp, "gamma", "mdp"))
    if not 0 < gamma <= 1:
        raise ConfigError("mdp.gamma must satisfy 0 < gamma <= 1")

    return RunConfig(
        source=path,
        components=tuple(comps),
        correlation_range=_positive(_get(hz, "correlation_range", "hazard"), "hazard.correlation_range"),
        n_im_bins=_positive(_get(hz, "n_im_bins", "hazard"), "hazard.n_im_bins", integer=True),
        hazard_mode=mode,
        det_mean=float(_get(det, "target_mean", "deterioration")),
        det_sd=float(_get(det, "target_sd", "deterioration")),
        det_b=float(_get(det, "b", "deterioration")),
        det_T=float(_get(det, "calibration_time", "deterioration")),
        cds_thresholds=cds_th,
        sds_thresholds=sds_th,
        n_tau=_positive(_get(mdp, "n_tau", "mdp"), "mdp.n_tau", integer=True),
        tau_shift=int(mdp.get("tau_shift", 10)),
        minor_fraction=_frac(_get(mdp, "minor_repair_fraction", "mdp")),
        major_fraction=_frac(mdp.get("major_repair_fraction", 1)),
        campaign_discounts={int(k): _frac(v) for k, v in _get(mdp, "campaign_discounts", "mdp").items()},
        scenarios=base / _get(mdp, "scenarios", "mdp"),
        gamma=gamma,
        horizon=horizon,
        memory_budget_bytes=int(float(_get(sol, "memory_budget_gb", "solver")) * 2**30),
        oracle_cap=_positive(sol.get("oracle_cap", 4096), "solver.oracle_cap", integer=True),
        n_trajectories=_positive(_get(frg, "n_trajectories", "fragility"), "fragility.n_trajectories", integer=True),
        fit_horizon=_positive(_get(frg, "horizon", "fragility"), "fragility.horizon", integer=True),
        n_runs=_positive(_get(sim, "n_runs", "simulation"), "simulation.n_runs", integer=True),
        snapshot_years=tuple(int(y) for y in _get(sim, "snapshot_years", "simulation")),
        loss_grid=tuple(float(x) for x in _get(sim, "loss_grid", "simulation")),
        cbm_rules=dict(_get(sim, "cbm_rules", "simulation")),
        seed=seed,
    )


def read_scenarios(path) -> list:
    """Rows of ``(frozenset(names), direct, multiplier, total)``.

    CSV columns: ``components`` (names joined by ``+``), ``direct``,
    ``multiplier``, ``total``; costs in thousands.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"scenario table {path} not found")
    rows = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"components", "direct", "multiplier", "total"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise ConfigError(f"{path}: header must contain {sorted(need)}")
        for r in reader:
            try:
                names = frozenset(s.strip() for s in r["components"].split("+") if s.strip())
                rows.append((names, _frac(r["direct"]), _frac(r["multiplier"]), _frac(r["total"])))
            except (ValueError, ZeroDivisionError) as exc:
                raise ConfigError(f"{path}: malformed row {r} ({exc})") from None
    return rows
