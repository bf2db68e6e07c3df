"""Measure flows: the induced-flow map, barycenters and moment diagnostics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import GameModel, ModelValidationError
from .solver import Policy, flow_array, propagate

TOL_DISC = 0.05


@dataclass(frozen=True)
class MeasureFlow:
    measures: np.ndarray   # (T+2, X): mu_0 .. mu_{T+1}

    def __post_init__(self):
        m = np.asarray(self.measures, dtype=float)
        if m.ndim != 2 or m.shape[0] < 2:
            raise ValueError(f"flow must have shape (T+2, X) with T >= 0, got {m.shape}")
        if np.any(m < 0) or np.any(np.abs(m.sum(axis=1) - 1.0) > 1e-10):
            raise ValueError("every flow entry must be a probability vector")
        m = m.copy()
        m.setflags(write=False)
        object.__setattr__(self, "measures", m)

    @property
    def horizon(self) -> int:
        return self.measures.shape[0] - 2

    def __getitem__(self, t):
        return self.measures[t]

    def __len__(self):
        return self.measures.shape[0]

    @classmethod
    def for_model(cls, model: GameModel, measures) -> "MeasureFlow":
        m = np.array(measures, dtype=float)
        if m.shape[1] != model.n_states:
            raise ValueError(f"flow has {m.shape[1]} states, model has {model.n_states}")
        if np.max(np.abs(m[0] - model.initial)) > 1e-9:
            raise ValueError("flow's first entry differs from the model's initial measure")
        m[0] = model.initial
        return cls(m)

    @classmethod
    def constant(cls, model: GameModel, horizon: int) -> "MeasureFlow":
        return cls(np.tile(model.initial, (horizon + 2, 1)))


def recursive_from_initial(model: GameModel, horizon: int) -> MeasureFlow:
    """Flow of a population choosing actions uniformly at random, started at mu_0."""
    m = np.zeros((horizon + 2, model.n_states))
    m[0] = model.initial
    for t in range(horizon + 1):
        P = model.transition_tensor(m[t]).mean(axis=1)
        nxt = m[t] @ P
        m[t + 1] = nxt / nxt.sum()
    return MeasureFlow(m)


def induced_flow(model: GameModel, policy: Policy, filter_flow=None) -> MeasureFlow:
    """The flow a population produces when every agent follows ``policy``.

    Agents keep the information structure of the policy's tree (beliefs formed
    under ``filter_flow``), while the population's own marginals are fed back
    into the kernels step by step.
    """
    if filter_flow is not None and np.max(np.abs(flow_array(filter_flow)[: policy.horizon + 2]
                                                 - policy.tree.flow[: policy.horizon + 2])) > 0:
        raise ValueError("policy was not solved against the supplied filter flow")
    prop = propagate(policy, model, self_consistent=True)
    return MeasureFlow(prop.marginals)


def barycenter(weights, beliefs) -> np.ndarray:
    """Mean belief sum_i w_i z_i, renormalized over the supplied mass."""
    w = np.asarray(weights, dtype=float)
    Z = np.asarray(beliefs, dtype=float).reshape(w.shape[0], -1)
    s = w.sum()
    if s <= 0:
        raise ValueError("barycenter of a zero measure")
    return (w @ Z) / s


@dataclass
class StateActionFlow:
    """Finitely supported laws of (belief, action) per depth under a policy."""

    policy: Policy
    nodes: list
    weights: list
    beliefs: list
    actions: list
    pruned: np.ndarray

    @property
    def horizon(self) -> int:
        return self.policy.horizon

    def mean_field(self, t: int) -> np.ndarray:
        return barycenter(self.weights[t], self.beliefs[t])


def state_action_flow(policy: Policy, filter_flow=None) -> StateActionFlow:
    if filter_flow is not None and np.max(np.abs(flow_array(filter_flow)[: policy.horizon + 2]
                                                 - policy.tree.flow[: policy.horizon + 2])) > 0:
        raise ValueError("policy was not solved against the supplied filter flow")
    prop = propagate(policy, policy.tree.model)
    tree = policy.tree
    weights, beliefs, actions = [], [], []
    for t, idx in enumerate(prop.nodes):
        weights.append(prop.joint[t].sum(axis=1))
        beliefs.append(tree.beliefs[t][idx])
        actions.append(policy.actions[t][idx])
    return StateActionFlow(policy, prop.nodes, weights, beliefs, actions, prop.lost[: policy.horizon + 1])


def push_forward(model: GameModel, sa: StateActionFlow, t: int, mu_t) -> np.ndarray:
    """sum_nodes w * sum_x z(x) p(.|x, a, mu_t), normalized."""
    P = model.transition_tensor(mu_t)
    out = np.einsum("n,nx,nxy->y", sa.weights[t], sa.beliefs[t],
                    P[:, sa.actions[t], :].transpose(1, 0, 2))
    return out / out.sum()


@dataclass
class MomentReport:
    w_mass: np.ndarray
    bound: np.ndarray
    slack_bound: np.ndarray
    node_ratio: np.ndarray     # per depth, max over nodes and actions of E[W(child)] / (alpha W(z))
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def belief_moment(model: GameModel, Z) -> np.ndarray:
    return np.asarray(Z) @ model.moment_weights


def moment_check(model: GameModel, sa: StateActionFlow, tol_disc: float = TOL_DISC) -> MomentReport:
    alpha, M = model.moment_alpha, model.moment_M
    tree = sa.policy.tree
    T = sa.horizon
    w_mass = np.array([float(sa.weights[t] @ belief_moment(model, sa.beliefs[t])) for t in range(T + 1)])
    bound = np.array([alpha ** t * M for t in range(T + 1)])
    slack = np.array([(1 + tol_disc) ** t * alpha ** t * M for t in range(T + 1)])
    ratio = np.zeros(T + 1)
    out = MomentReport(w_mass, bound, slack, ratio)
    for t in range(T + 1):
        if w_mass[t] > slack[t] * (1 + 1e-12):
            out.violations.append(f"depth {t}: W-mass {w_mass[t]:.12g} exceeds "
                                  f"(1+tol)^t alpha^t M = {slack[t]:.12g}")
    for t in range(T):
        idx = sa.nodes[t]
        Wz = belief_moment(model, tree.beliefs[t][idx])
        ch = tree.children[t][idx]
        Wc = np.where(ch >= 0, belief_moment(model, tree.beliefs[t + 1])[np.maximum(ch, 0)], 0.0)
        expected = np.einsum("nay,nay->na", tree.H[t][idx], Wc)
        r = expected / (alpha * Wz[:, None])
        ratio[t] = float(r.max())
        if ratio[t] > 1 + tol_disc:
            out.violations.append(f"depth {t}: one-step ratio {ratio[t]:.12g} exceeds 1 + {tol_disc}")
    return out


def write_flow_csv(flow: MeasureFlow, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "state", "weight"])
        for t, mu in enumerate(flow.measures):
            for x, v in enumerate(mu):
                w.writerow([t, x, f"{v:.12g}"])


def read_flow_csv(path, model: GameModel) -> MeasureFlow:
    rows = {}
    with open(Path(path), newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"t", "state", "weight"} - set(reader.fieldnames or [])
        if missing:
            raise ModelValidationError(f"{path}: flow CSV lacks columns {sorted(missing)}")
        for line, rec in enumerate(reader, start=2):
            try:
                rows[(int(rec["t"]), int(rec["state"]))] = float(rec["weight"])
            except ValueError as exc:
                raise ModelValidationError(f"{path}:{line}: {exc}") from None
    T2 = max(t for t, _ in rows) + 1
    m = np.zeros((T2, model.n_states))
    for (t, x), v in rows.items():
        m[t, x] = v
    m /= m.sum(axis=1, keepdims=True)
    return MeasureFlow.for_model(model, m)
