"""Factored finite-horizon MDP: component state spaces, actions, costs.

Component state ``(sds, cds, tau)`` uses 1-based labels and is linearised
sds-major, then cds, then tau::

    index = ((sds - 1) * n_cds + (cds - 1)) * n_tau + (tau - 1)

Joint states follow C order over components (the last component varies
fastest), and joint actions are enumerated the same way with DoNothing first.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, ValidationError


class MaintenanceAction(enum.IntEnum):
    DO_NOTHING = 0
    MINOR_REPAIR = 1
    MAJOR_REPAIR = 2

    @property
    def label(self) -> str:
        return {0: "DoNothing", 1: "MinorRepair", 2: "MajorRepair"}[int(self)]

    @classmethod
    def parse(cls, text: str) -> "MaintenanceAction":
        key = text.replace("_", "").replace(" ", "").lower()
        for a in cls:
            if a.label.lower() == key:
                return a
        raise ValidationError(f"unknown maintenance action {text!r}")


@dataclass(frozen=True)
class ComponentStateSpace:
    n_sds: int = 3
    n_cds: int = 3
    n_tau: int = 50

    def __post_init__(self):
        if min(self.n_sds, self.n_cds, self.n_tau) < 1:
            raise ValidationError("state counts must be positive")

    @property
    def total(self) -> int:
        return self.n_sds * self.n_cds * self.n_tau

    @property
    def shape(self) -> tuple:
        return (self.n_sds, self.n_cds, self.n_tau)

    def encode(self, sds, cds, tau):
        sds, cds, tau = (np.asarray(v) for v in (sds, cds, tau))
        if (
            np.any(sds < 1) or np.any(sds > self.n_sds)
            or np.any(cds < 1) or np.any(cds > self.n_cds)
            or np.any(tau < 1) or np.any(tau > self.n_tau)
        ):
            raise IndexError(f"state ({sds}, {cds}, {tau}) outside {self.shape}")
        idx = ((sds - 1) * self.n_cds + (cds - 1)) * self.n_tau + (tau - 1)
        return int(idx) if idx.ndim == 0 else idx

    def decode(self, index):
        index = np.asarray(index)
        if np.any(index < 0) or np.any(index >= self.total):
            raise IndexError(f"state index {index} outside [0, {self.total})")
        sds, rest = np.divmod(index, self.n_cds * self.n_tau)
        cds, tau = np.divmod(rest, self.n_tau)
        if index.ndim == 0:
            return int(sds) + 1, int(cds) + 1, int(tau) + 1
        return sds + 1, cds + 1, tau + 1

    def labels(self):
        """``(sds, cds, tau)`` label arrays for every index, in index order."""
        return self.decode(np.arange(self.total))


def encode_state(sds, cds, tau, space: ComponentStateSpace = ComponentStateSpace()):
    return space.encode(sds, cds, tau)


def decode_state(index, space: ComponentStateSpace = ComponentStateSpace()):
    return space.decode(index)


def do_nothing_matrix(
    space: ComponentStateSpace, cds_matrices: np.ndarray, kernel: np.ndarray
) -> np.ndarray:
    """Natural evolution over one epoch.

    ``cds_matrices[tau-1]`` governs deterioration for a component in exposure
    state ``tau``; ``kernel[l-1, i-1, j-1]`` is the annual seismic kernel given
    the new corrosion state ``l``.  Exposure advances by one, clamped at
    ``n_tau``.
    """
    cds_matrices = np.asarray(cds_matrices, dtype=float)
    kernel = np.asarray(kernel, dtype=float)
    ns, nc, nt = space.shape
    if cds_matrices.shape[0] < nt or cds_matrices.shape[1:] != (nc, nc):
        raise ValidationError(f"need {nt} CDS matrices of size {nc}x{nc}")
    if kernel.shape != (nc, ns, ns):
        raise ValidationError(f"seismic kernel must have shape {(nc, ns, ns)}")
    P = np.zeros((space.total, space.total))
    for t in range(nt):
        t_next = min(t + 1, nt - 1)
        D = cds_matrices[t]
        for i in range(ns):
            for k in range(nc):
                row = (i * nc + k) * nt + t
                for l in range(nc):
                    if D[k, l] == 0.0:
                        continue
                    cols = (np.arange(ns) * nc + l) * nt + t_next
                    P[row, cols] += kernel[l, i, :] * D[k, l]
    return P


def repair_matrix(
    space: ComponentStateSpace, action: MaintenanceAction, tau_shift: int = 10
) -> np.ndarray:
    """Deterministic 0/1 map for a repair action."""
    action = MaintenanceAction(action)
    if action == MaintenanceAction.DO_NOTHING:
        raise ValidationError("repair_matrix is only defined for repair actions")
    sds, cds, tau = space.labels()
    if action == MaintenanceAction.MAJOR_REPAIR:
        target = np.full(space.total, space.encode(1, 1, 1))
    else:
        target = space.encode(
            np.maximum(sds - 1, 1), np.maximum(cds - 1, 1), np.maximum(tau - tau_shift, 1)
        )
    P = np.zeros((space.total, space.total))
    P[np.arange(space.total), target] = 1.0
    return P


def _frac(x) -> Fraction:
    return Fraction(str(x)) if isinstance(x, float) else Fraction(x)


@dataclass(frozen=True)
class FailureScenario:
    direct: Fraction
    multiplier: Fraction
    total: Fraction


@dataclass
class CostModel:
    """Costs in thousands of currency units.

    ``failure_scenarios`` maps a frozenset of component names to the scenario
    row; the cost charged is the tabulated total.
    """

    component_names: tuple
    replacement_value: tuple
    minor_repair_fraction: Fraction = Fraction(1, 5)
    major_repair_fraction: Fraction = Fraction(1)
    campaign_discounts: Mapping[int, Fraction] = field(
        default_factory=lambda: {2: Fraction(5, 100), 3: Fraction(10, 100)}
    )
    failure_scenarios: Mapping[frozenset, FailureScenario] = field(default_factory=dict)
    gamma: float = 0.97
    horizon: int = 50
    rounding: Fraction = Fraction(5)

    def __post_init__(self):
        self.component_names = tuple(self.component_names)
        self.replacement_value = tuple(_frac(v) for v in self.replacement_value)
        self.minor_repair_fraction = _frac(self.minor_repair_fraction)
        self.major_repair_fraction = _frac(self.major_repair_fraction)
        self.campaign_discounts = {int(k): _frac(v) for k, v in self.campaign_discounts.items()}
        if len(self.replacement_value) != len(self.component_names):
            raise ConfigError("one replacement value per component is required")
        if not 0 < self.gamma <= 1:
            raise ConfigError("discount factor must satisfy 0 < gamma <= 1")
        if self.horizon < 0:
            raise ConfigError("horizon must be non-negative")
        for name, f in (("minor", self.minor_repair_fraction), ("major", self.major_repair_fraction)):
            if not 0 < f <= 1:
                raise ConfigError(f"{name} repair fraction must lie in (0, 1]")
        for k, d in self.campaign_discounts.items():
            if not 0 <= d < 1:
                raise ConfigError(f"campaign discount for {k} actions must lie in [0, 1)")
        names = set(self.component_names)
        for subset, row in self.failure_scenarios.items():
            if not subset or not set(subset) <= names:
                raise ConfigError(f"scenario {sorted(subset)} names unknown components")
            if abs(row.direct * row.multiplier - row.total) > self.rounding:
                raise ConfigError(
                    f"scenario {sorted(subset)}: total {row.total} inconsistent with "
                    f"{row.direct} x {row.multiplier}"
                )

    @property
    def n_components(self) -> int:
        return len(self.component_names)

    def component_cost(self, k: int, action: MaintenanceAction) -> Fraction:
        action = MaintenanceAction(action)
        if action == MaintenanceAction.DO_NOTHING:
            return Fraction(0)
        frac = self.minor_repair_fraction if action == MaintenanceAction.MINOR_REPAIR else self.major_repair_fraction
        return frac * self.replacement_value[k]

    def discount_for(self, n_active: int) -> Fraction:
        return self.campaign_discounts.get(n_active, Fraction(0))

    def scenario_total(self, failed: frozenset) -> Fraction:
        if not failed:
            return Fraction(0)
        try:
            return self.failure_scenarios[frozenset(failed)].total
        except KeyError:
            raise ConfigError(f"no failure scenario for {sorted(failed)}") from None

    def check_complete(self) -> None:
        for r in range(1, self.n_components + 1):
            for combo in itertools.combinations(self.component_names, r):
                self.scenario_total(frozenset(combo))


def action_cost(joint_action: Sequence, cost_model: CostModel) -> Fraction:
    """Per-component repair costs, reduced by the campaign discount."""
    acts = [MaintenanceAction(a) for a in joint_action]
    if len(acts) != cost_model.n_components:
        raise ValidationError("joint action length does not match the component count")
    base = sum((cost_model.component_cost(k, a) for k, a in enumerate(acts)), Fraction(0))
    n_active = sum(a != MaintenanceAction.DO_NOTHING for a in acts)
    return base * (1 - cost_model.discount_for(n_active))


def failure_cost(state: Sequence, cost_model: CostModel, n_sds: int = 3) -> Fraction:
    """Scenario cost for the set of components currently in the top SDS.

    ``state`` holds one ``(sds, cds, tau)`` tuple (or bare SDS label) per component.
    """
    if len(state) != cost_model.n_components:
        raise ValidationError("joint state length does not match the component count")
    failed = frozenset(
        name
        for name, s in zip(cost_model.component_names, state)
        if (s[0] if isinstance(s, (tuple, list)) else s) == n_sds
    )
    return cost_model.scenario_total(failed)


@dataclass
class ComponentModel:
    name: str
    matrices: np.ndarray  # (n_actions, n, n), row-stochastic
    state_category: np.ndarray = None  # (n,) ints feeding the state-cost table
    space: ComponentStateSpace | None = None
    action_labels: tuple = ()

    def __post_init__(self):
        m = np.asarray(self.matrices, dtype=float)
        if m.ndim != 3 or m.shape[1] != m.shape[2]:
            raise ValidationError(f"{self.name}: matrices must have shape (n_actions, n, n)")
        if np.any(m < 0) or np.any(np.abs(m.sum(axis=2) - 1.0) > 1e-8):
            raise ValidationError(f"{self.name}: every action matrix must be row-stochastic within 1e-8")
        self.matrices = m
        if self.state_category is None:
            self.state_category = np.zeros(m.shape[1], dtype=np.int64)
        self.state_category = np.asarray(self.state_category, dtype=np.int64)
        if self.state_category.shape != (m.shape[1],):
            raise ValidationError(f"{self.name}: one cost category per state is required")
        if not self.action_labels:
            self.action_labels = tuple(f"a{a}" for a in range(m.shape[0]))

    @property
    def n_states(self) -> int:
        return self.matrices.shape[1]

    @property
    def n_actions(self) -> int:
        return self.matrices.shape[0]


@dataclass
class FactoredMdp:
    """Kronecker-structured MDP with cost ``C(s, a) = action_costs[a] + state_cost(s)``.

    ``state_cost(s) = state_cost_table[cat_1(s_1), ..., cat_N(s_N)]``, where
    ``cat_k`` is component ``k``'s ``state_category`` map.
    """

    components: list
    action_costs: np.ndarray
    state_cost_table: np.ndarray
    gamma: float
    horizon: int
    cost_model: CostModel | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.action_costs = np.asarray(self.action_costs, dtype=float).reshape(-1)
        self.state_cost_table = np.asarray(self.state_cost_table, dtype=float)
        if self.action_costs.size != int(np.prod(self.action_shape)):
            raise ValidationError("one action cost per joint action is required")
        n_cat = tuple(int(c.state_category.max()) + 1 for c in self.components)
        if self.state_cost_table.ndim != len(self.components) or any(
            s < n for s, n in zip(self.state_cost_table.shape, n_cat)
        ):
            raise ValidationError("state cost table does not cover every component category")
        if not 0 < self.gamma <= 1:
            raise ValidationError("discount factor must satisfy 0 < gamma <= 1")
        if self.horizon < 0:
            raise ValidationError("horizon must be non-negative")

    @property
    def n_components(self) -> int:
        return len(self.components)

    @property
    def state_shape(self) -> tuple:
        return tuple(c.n_states for c in self.components)

    @property
    def action_shape(self) -> tuple:
        return tuple(c.n_actions for c in self.components)

    @property
    def n_states(self) -> int:
        return int(np.prod(self.state_shape, dtype=np.int64))

    @property
    def n_actions(self) -> int:
        return int(np.prod(self.action_shape, dtype=np.int64))

    def joint_action(self, index: int) -> tuple:
        return tuple(int(a) for a in np.unravel_index(index, self.action_shape))

    def joint_action_index(self, actions: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(actions), self.action_shape))

    def state_cost_tensor(self) -> np.ndarray:
        """State-only cost as an N-order tensor over component states."""
        idx = np.ix_(*[c.state_category for c in self.components])
        return self.state_cost_table[idx]

    def state_cost_vector(self) -> np.ndarray:
        return self.state_cost_tensor().reshape(-1)

    def cost_matrix(self) -> np.ndarray:
        """Dense ``C[s, a]`` (only for small models)."""
        return self.state_cost_vector()[:, None] + self.action_costs[None, :]

    def joint_matrix(self, action_index: int) -> np.ndarray:
        """Materialised Kronecker product for one joint action (small models only)."""
        acts = self.joint_action(action_index)
        P = np.ones((1, 1))
        for comp, a in zip(self.components, acts):
            P = np.kron(P, comp.matrices[a])
        return P

    def max_stage_cost(self) -> float:
        return float(self.state_cost_table.max() + self.action_costs.max())


def action_cost_vector(cost_model: CostModel, action_shape: tuple) -> np.ndarray:
    """Float cost for every joint action in C order."""
    out = np.empty(int(np.prod(action_shape)))
    for idx, acts in enumerate(itertools.product(*[range(n) for n in action_shape])):
        out[idx] = float(action_cost(acts, cost_model))
    return out


def failure_cost_table(cost_model: CostModel) -> np.ndarray:
    """``table[f_1, ..., f_N]`` with ``f_k = 1`` when component ``k`` has failed."""
    n = cost_model.n_components
    table = np.zeros((2,) * n)
    for bits in itertools.product((0, 1), repeat=n):
        failed = frozenset(name for name, b in zip(cost_model.component_names, bits) if b)
        table[bits] = float(cost_model.scenario_total(failed))
    return table
