"""Exact backward induction for factored MDPs.

The tensor solver never forms a joint transition matrix.  The value vector is
reshaped into an N-order tensor (C order: the last component's state varies
fastest) and the expectation ``P_a V`` is evaluated as a chain of mode-k
products with the transposed component matrices.  A dense solver over the
materialised Kronecker matrices is kept as an oracle.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ResourceError, ValidationError
from .mdp import FactoredMdp
from .npzio import save_npz

DEFAULT_ORACLE_CAP = 4096
POLICY_FORMAT = "maintmdp-policy/1"
# Q values closer than this (relative to max(1, |min|)) count as tied
TIE_RTOL = 1e-12


def fold_minimum(best: np.ndarray, best_idx: np.ndarray, q: np.ndarray, a: int) -> None:
    """Fold one action's Q values into a running (min, argmin) in place.

    ``best`` is the exact running minimum, so values do not depend on the
    visiting order.  Near-ties (within ``TIE_RTOL``) go to the smallest action
    index, which keeps both solvers on the same policy when two actions are
    mathematically equal but round differently.
    """
    with np.errstate(invalid="ignore"):
        tol = TIE_RTOL * np.maximum(1.0, np.abs(best))
        take = (q < best - tol) | ((q <= best + tol) & (a < best_idx)) | np.isinf(best)
    np.copyto(best_idx, a, where=take)
    np.minimum(best, q, out=best)


def mode_k_product(tensor: np.ndarray, matrix: np.ndarray, axis: int) -> np.ndarray:
    """Contract ``axis`` of ``tensor`` with the row index of ``matrix``.

    ``out[..., j, ...] = sum_i tensor[..., i, ...] * matrix[i, j]``.  Passing
    a transposed transition matrix therefore applies ``P`` along that axis.
    ``axis`` is 0-based.
    """
    tensor = np.asarray(tensor)
    matrix = np.asarray(matrix)
    if not -tensor.ndim <= axis < tensor.ndim:
        raise ValidationError(f"axis {axis} out of range for a {tensor.ndim}-order tensor")
    axis %= tensor.ndim
    n = tensor.shape[axis]
    if matrix.ndim != 2 or matrix.shape[0] != n:
        raise ValidationError(f"matrix of shape {matrix.shape} does not match axis {axis} of size {n}")
    m = matrix.shape[1]
    pre = int(np.prod(tensor.shape[:axis], dtype=np.int64))
    post = int(np.prod(tensor.shape[axis + 1 :], dtype=np.int64))
    out_shape = tensor.shape[:axis] + (m,) + tensor.shape[axis + 1 :]
    if post == 1:
        out = tensor.reshape(pre, n) @ matrix
    elif pre == 1:
        out = matrix.T @ tensor.reshape(n, post)
    else:
        out = np.matmul(matrix.T, tensor.reshape(pre, n, post))
    return out.reshape(out_shape)


class _Operator:
    """One component transition matrix, applied as an expectation along an axis."""

    __slots__ = ("dense_t", "target")

    def __init__(self, P: np.ndarray):
        P = np.asarray(P, dtype=float)
        self.target = None
        self.dense_t = None
        ones = P == 1.0
        if np.all(ones.sum(axis=1) == 1) and np.all((P == 0.0) | ones):
            self.target = np.argmax(ones, axis=1)
        else:
            self.dense_t = np.ascontiguousarray(P.T)

    def apply(self, tensor: np.ndarray, axis: int) -> np.ndarray:
        if self.target is not None:
            # deterministic map: the expectation is an exact gather
            return np.take(tensor, self.target, axis=axis)
        return mode_k_product(tensor, self.dense_t, axis)


def expected_future_values(matrices: Sequence[np.ndarray], v_next: np.ndarray) -> np.ndarray:
    """``sum_{s'} P_a(s' | s) v_next(s')`` for a Kronecker-factored ``P_a``.

    ``v_next`` is the N-order value tensor; ``matrices[k]`` is component k's
    transition matrix under its part of the joint action.
    """
    v = np.asarray(v_next, dtype=float)
    if len(matrices) != v.ndim:
        raise ValidationError("one component matrix per tensor axis is required")
    for k in range(v.ndim - 1, -1, -1):
        v = mode_k_product(v, np.asarray(matrices[k]).T, k)
    return v


@dataclass
class Policy:
    """Optimal joint action per epoch and joint state (C-order indices)."""

    actions: np.ndarray  # (T, |S|)
    state_shape: tuple
    action_shape: tuple
    meta: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]

    def action(self, epoch: int, state_index) -> np.ndarray:
        return self.actions[epoch, state_index]

    def component_actions(self, epoch: int, state_index) -> tuple:
        return np.unravel_index(self.actions[epoch, state_index], self.action_shape)

    def header(self) -> dict:
        return {
            "format": POLICY_FORMAT,
            "horizon": int(self.horizon),
            "state_shape": list(self.state_shape),
            "action_shape": list(self.action_shape),
            "state_order": "C order over components; last component fastest",
            "action_order": "C order over components; action 0 (DoNothing) first",
            **self.meta,
        }

    def save(self, path) -> None:
        """Binary export: ``.npz`` holding the action array and a JSON header."""
        header = json.dumps(self.header(), sort_keys=True)
        save_npz(Path(path), actions=self.actions, header=np.array(header))

    @classmethod
    def load(cls, path) -> "Policy":
        with np.load(Path(path), allow_pickle=False) as z:
            header = json.loads(str(z["header"]))
            actions = np.array(z["actions"])
        if header.get("format") != POLICY_FORMAT:
            raise ValidationError(f"{path}: not a policy file")
        meta = {k: v for k, v in header.items() if k not in {
            "format", "horizon", "state_shape", "action_shape", "state_order", "action_order"}}
        return cls(actions, tuple(header["state_shape"]), tuple(header["action_shape"]), meta)

    def to_csv(self, path) -> None:
        """Text export: commented codec header then ``epoch,state,action`` rows."""
        path = Path(path)
        with path.open("w") as fh:
            for k, v in self.header().items():
                fh.write(f"# {k}: {json.dumps(v)}\n")
            fh.write("epoch,state,action\n")
            n = self.actions.shape[1] if self.actions.ndim == 2 else 0
            states = np.arange(n)
            for t in range(self.horizon):
                rows = np.column_stack([np.full(n, t), states, self.actions[t]])
                np.savetxt(fh, rows, fmt="%d", delimiter=",")


@dataclass
class SolveReport:
    epoch_seconds: list = field(default_factory=list)
    peak_memory_bytes: int = 0
    predicted: dict = field(default_factory=dict)
    measured: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "epoch_seconds": list(self.epoch_seconds),
            "total_seconds": float(sum(self.epoch_seconds)),
            "peak_memory_bytes": int(self.peak_memory_bytes),
            "predicted": self.predicted,
            "measured": self.measured,
        }


@dataclass
class SolveResult:
    values: np.ndarray  # V_0 as a flat vector
    policy: Policy
    report: SolveReport
    all_values: np.ndarray | None = None  # (T + 1, |S|) when requested


def complexity_report(
    mdp: FactoredMdp | None = None,
    *,
    state_sizes: Sequence[int] | None = None,
    action_sizes: Sequence[int] | None = None,
    nnz_per_row: float | None = None,
) -> SolveReport:
    """Closed-form per-update costs of the naive, sparse and tensor methods.

    Sizes come from ``mdp`` or from explicit per-component lists, which makes
    homogeneous sweeps (e.g. 16 states / 4 actions or 25 / 5) easy to tabulate.
    Counts are multiply-adds for time and stored numbers for memory.
    """
    if mdp is not None:
        state_sizes = mdp.state_shape
        action_sizes = mdp.action_shape
    if state_sizes is None or action_sizes is None:
        raise ValidationError("provide an mdp or explicit state and action sizes")
    S = int(np.prod(state_sizes, dtype=object))
    A = int(np.prod(action_sizes, dtype=object))
    sum_sk = int(sum(state_sizes))
    pred = {
        "n_components": len(state_sizes),
        "joint_states": S,
        "joint_actions": A,
        "naive_time": A * S * S,
        "naive_memory": A * S * S + S,
        "tensor_time": A * S * sum_sk,
        "tensor_memory": int(sum(a * s * s for a, s in zip(action_sizes, state_sizes))) + S,
    }
    if nnz_per_row is not None:
        nnz = S * float(nnz_per_row) ** len(state_sizes)
        pred["sparse_time"] = A * nnz
        pred["sparse_memory"] = A * nnz + S
    return SolveReport(predicted=pred)


def _policy_dtype(n_actions: int):
    return np.uint8 if n_actions <= 255 else np.uint16 if n_actions <= 65535 else np.uint32


def plan_memory(mdp: FactoredMdp, share_prefix: bool, store_values: bool) -> dict:
    S = mdp.n_states
    n = mdp.n_components
    live = 3 + 1 + (n if share_prefix else 2)  # V_next, state cost, running min, Q, intermediates
    dtype = _policy_dtype(mdp.n_actions)
    bytes_ = {
        "value_vectors": live * S * 8,
        "argmin": S * np.dtype(dtype).itemsize,
        "policy": mdp.horizon * S * np.dtype(dtype).itemsize,
        "component_matrices": int(sum(c.matrices.size for c in mdp.components)) * 8,
        "all_values": (mdp.horizon + 1) * S * 8 if store_values else 0,
    }
    bytes_["total"] = int(sum(bytes_.values()))
    return bytes_


def tensor_value_iteration(
    mdp: FactoredMdp,
    *,
    store_values: bool = False,
    memory_budget: int | None = None,
    share_prefix: bool | None = None,
    action_order: Sequence[int] | None = None,
) -> SolveResult:
    """Backward induction with Kronecker-factored expectations.

    For every epoch the joint actions are streamed: each Q vector is folded
    into a running minimum keyed by ``(value, action index)``, so ties go to
    the smallest joint-action index whatever order actions are visited in.
    ``action_order`` permutes the visiting order (used to check that).
    """
    S = mdp.n_states
    A = mdp.n_actions
    T = mdp.horizon
    if share_prefix is None:
        share_prefix = action_order is None
    plan = plan_memory(mdp, share_prefix, store_values)
    if memory_budget is not None and plan["total"] > memory_budget and share_prefix:
        share_prefix = False
        plan = plan_memory(mdp, share_prefix, store_values)
    if memory_budget is not None and plan["total"] > memory_budget:
        raise ResourceError(
            f"planned memory {plan['total'] / 2**30:.2f} GiB exceeds budget "
            f"{memory_budget / 2**30:.2f} GiB",
            sizing=plan,
        )

    report = complexity_report(mdp)
    report.peak_memory_bytes = plan["total"]
    report.predicted["memory_plan_bytes"] = plan

    shape = mdp.state_shape
    dtype = _policy_dtype(A)
    policy = np.zeros((T, S), dtype=dtype)
    all_values = np.zeros((T + 1, S)) if store_values else None
    ops = [[_Operator(P) for P in comp.matrices] for comp in mdp.components]
    state_cost = mdp.state_cost_tensor().astype(float)
    ac = mdp.action_costs
    gamma = float(mdp.gamma)
    n = mdp.n_components

    V = np.zeros(shape)
    for t in range(T - 1, -1, -1):
        t0 = time.perf_counter()
        best = np.full(shape, np.inf)
        best_idx = np.full(shape, np.iinfo(dtype).max, dtype=dtype)

        def fold(a_idx: int, expv: np.ndarray) -> None:
            q = state_cost + ac[a_idx]
            q += gamma * expv
            fold_minimum(best, best_idx, q, a_idx)

        if share_prefix:
            acts = [0] * n

            def recurse(k: int, tensor: np.ndarray) -> None:
                for a in range(mdp.action_shape[k]):
                    acts[k] = a
                    nxt = ops[k][a].apply(tensor, k)
                    if k == 0:
                        fold(mdp.joint_action_index(acts), nxt)
                    else:
                        recurse(k - 1, nxt)

            recurse(n - 1, V)
        else:
            order = range(A) if action_order is None else action_order
            for a_idx in order:
                acts = mdp.joint_action(a_idx)
                v = V
                # same axis order as the shared-prefix recursion
                for k in range(n - 1, -1, -1):
                    v = ops[k][acts[k]].apply(v, k)
                fold(int(a_idx), v)

        V = best
        policy[t] = best_idx.reshape(-1)
        if store_values:
            all_values[t] = V.reshape(-1)
        report.epoch_seconds.insert(0, time.perf_counter() - t0)

    pol = Policy(policy, mdp.state_shape, mdp.action_shape, dict(mdp.meta.get("policy_meta", {})))
    return SolveResult(V.reshape(-1).copy(), pol, report, all_values)


def flatten_mdp(mdp: FactoredMdp, cap: int = DEFAULT_ORACLE_CAP):
    """Materialise ``[P_a]`` and ``C[s, a]`` for the dense oracle."""
    if mdp.n_states > cap:
        raise ResourceError(
            f"joint state count {mdp.n_states} exceeds the oracle cap {cap}",
            sizing={"joint_states": mdp.n_states, "cap": cap},
        )
    P = np.stack([mdp.joint_matrix(a) for a in range(mdp.n_actions)])
    return P, mdp.cost_matrix()


def naive_backward_step(P: np.ndarray, C: np.ndarray, gamma: float, v_next: np.ndarray):
    """One dense Bellman update; ties go to the smallest action index."""
    S = C.shape[0]
    best = np.full(S, np.inf)
    best_idx = np.full(S, np.iinfo(np.int64).max, dtype=np.int64)
    for a in range(C.shape[1]):
        fold_minimum(best, best_idx, C[:, a] + gamma * (P[a] @ v_next), a)
    return best, best_idx


def naive_value_iteration(
    P: np.ndarray,
    C: np.ndarray,
    gamma: float,
    horizon: int,
    cap: int = DEFAULT_ORACLE_CAP,
    store_values: bool = False,
):
    """Textbook finite-horizon backward induction over explicit matrices.

    ``P`` has shape ``(|A|, |S|, |S|)`` and ``C`` shape ``(|S|, |A|)``.
    Returns ``(V_0, actions[T, |S|])`` plus all value vectors if requested.
    """
    P = np.asarray(P, dtype=float)
    C = np.asarray(C, dtype=float)
    n_a, S, S2 = P.shape
    if S != S2 or C.shape != (S, n_a):
        raise ValidationError("P must be (|A|, |S|, |S|) and C (|S|, |A|)")
    if S > cap:
        raise ResourceError(f"joint state count {S} exceeds the oracle cap {cap}", sizing={"joint_states": S})
    V = np.zeros(S)
    actions = np.zeros((horizon, S), dtype=np.int64)
    values = [V]
    for t in range(horizon - 1, -1, -1):
        V, actions[t] = naive_backward_step(P, C, gamma, V)
        values.insert(0, V)
    if store_values:
        return V, actions, np.stack(values)
    return V, actions


def naive_backward_step_blocked(
    mdp: FactoredMdp,
    v_next: np.ndarray,
    *,
    actions: Sequence[int] | None = None,
    block_bytes: int = 256 * 2**20,
):
    """Dense Bellman update that materialises each ``P_a`` in row blocks.

    Memory stays bounded for joint sizes whose full matrices would not fit.
    With ``actions`` only that subset is evaluated (used for timing).
    """
    S = mdp.n_states
    v_next = np.asarray(v_next, dtype=float).reshape(-1)
    F = mdp.state_cost_vector()
    acts = range(mdp.n_actions) if actions is None else actions
    best = np.full(S, np.inf)
    best_idx = np.full(S, np.iinfo(np.int64).max, dtype=np.int64)
    rows_per_block = max(1, block_bytes // (8 * S))
    for a in acts:
        comp_acts = mdp.joint_action(a)
        mats = [c.matrices[x] for c, x in zip(mdp.components, comp_acts)]
        tail = np.ones((1, 1))
        for M in mats[1:]:
            tail = np.kron(tail, M)
        n_tail = tail.shape[0]
        expv = np.empty(S)
        for s1 in range(mats[0].shape[0]):
            lead = mats[0][s1 : s1 + 1, :]
            for r0 in range(0, n_tail, rows_per_block):
                r1 = min(n_tail, r0 + rows_per_block)
                block = np.kron(lead, tail[r0:r1])
                expv[s1 * n_tail + r0 : s1 * n_tail + r1] = block @ v_next
        fold_minimum(best, best_idx, F + mdp.action_costs[a] + mdp.gamma * expv, a)
    return best, best_idx


def joint_policy_from_components(mdp: FactoredMdp, component_maps: Sequence[np.ndarray]) -> np.ndarray:
    """Stationary joint action per joint state from per-component action maps."""
    if len(component_maps) != mdp.n_components:
        raise ValidationError("one action map per component is required")
    grids = np.meshgrid(*[np.asarray(m, dtype=np.int64) for m in component_maps], indexing="ij")
    return np.ravel_multi_index(tuple(grids), mdp.action_shape).reshape(-1)


def evaluate_policy(mdp: FactoredMdp, actions: np.ndarray) -> np.ndarray:
    """Expected discounted cost of a fixed policy, by backward induction.

    ``actions`` is ``(|S|,)`` for a stationary policy or ``(T, |S|)``.
    Returns ``V_0`` as a flat vector.
    """
    actions = np.asarray(actions, dtype=np.int64)
    S, T = mdp.n_states, mdp.horizon
    if actions.shape == (S,):
        actions = np.broadcast_to(actions, (T, S))
    if actions.shape != (T, S):
        raise ValidationError(f"policy must have shape ({T}, {S}) or ({S},)")
    ops = [[_Operator(P) for P in comp.matrices] for comp in mdp.components]
    F = mdp.state_cost_vector()
    V = np.zeros(mdp.state_shape)
    n = mdp.n_components
    for t in range(T - 1, -1, -1):
        a_t = actions[t]
        new = np.empty(S)
        for a in np.unique(a_t):
            acts = mdp.joint_action(int(a))
            v = V
            for k in range(n - 1, -1, -1):
                v = ops[k][acts[k]].apply(v, k)
            sel = a_t == a
            new[sel] = F[sel] + mdp.action_costs[a] + mdp.gamma * v.reshape(-1)[sel]
        V = new.reshape(mdp.state_shape)
    return V.reshape(-1)
