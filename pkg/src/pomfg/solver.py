"""Truncated-horizon backward induction on the reachable belief tree.

The tree is built breadth first from the root belief ``mu_0``. Every node at
depth ``t < T`` is expanded for all actions and all observations with
predictive probability above ``prune_eps``; children at the same depth whose
quantized weights coincide are merged, so the tree is really a layered DAG.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .filtering import PRUNE_EPS, Belief, belief_cost, belief_kernel, expand_beliefs
from .model import GameModel

QUANTUM = 1e-9
TIE_EPS = 1e-9
NODE_BUDGET = 5_000_000
TERMINAL_MODES = ("zero", "tail_upper")


class NodeBudgetExceeded(RuntimeError):
    def __init__(self, depth: int, nodes: int, budget: int):
        super().__init__(f"belief tree exceeds node budget {budget} "
                         f"({nodes} nodes) while building depth {depth}")
        self.depth, self.nodes, self.budget = depth, nodes, budget


class PolicyCoverageError(KeyError):
    """A policy was asked to act at a reachable node it does not cover."""


def flow_array(flow) -> np.ndarray:
    """Accept a MeasureFlow-like object or an array of shape (T+2, X)."""
    measures = getattr(flow, "measures", flow)
    return np.asarray(measures, dtype=float)


def flow_digest(flow) -> str:
    arr = np.ascontiguousarray(flow_array(flow))
    return hashlib.sha256(arr.tobytes()).hexdigest()[:16]


@dataclass(frozen=True)
class BeliefKey:
    time: int
    quantized: tuple

    @classmethod
    def of(cls, time: int, weights, quantum: float = QUANTUM) -> "BeliefKey":
        q = np.rint(np.asarray(weights, dtype=float) / quantum).astype(np.int64)
        return cls(int(time), tuple(int(v) for v in q))


@dataclass
class BeliefTree:
    model: GameModel
    flow: np.ndarray
    horizon: int
    quantum: float
    prune_eps: float
    beliefs: list = field(default_factory=list)   # per depth, (n_t, X)
    keys: list = field(default_factory=list)      # per depth, (n_t, X) int64
    H: list = field(default_factory=list)         # per depth t < T, (n_t, A, Y)
    children: list = field(default_factory=list)  # per depth t < T, (n_t, A, Y), -1 if pruned
    costs: list = field(default_factory=list)     # per depth, (n_t, A)
    _index: dict = field(default_factory=dict, repr=False)

    @property
    def n_nodes(self) -> int:
        return sum(b.shape[0] for b in self.beliefs)

    def key(self, t: int, i: int) -> BeliefKey:
        return BeliefKey(t, tuple(int(v) for v in self.keys[t][i]))

    def index(self, key: BeliefKey) -> int:
        t = key.time
        if t not in self._index:
            self._index[t] = {row.tobytes(): i for i, row in enumerate(self.keys[t])}
        try:
            return self._index[t][np.asarray(key.quantized, dtype=np.int64).tobytes()]
        except KeyError:
            raise PolicyCoverageError(f"belief key not in tree at depth {t}") from None

    def find(self, t: int, weights) -> int:
        return self.index(BeliefKey.of(t, weights, self.quantum))

    def nearest(self, t: int, weights) -> int:
        """Index of the depth-t node closest in L1 to ``weights``."""
        return int(np.argmin(np.abs(self.beliefs[t] - np.asarray(weights)).sum(axis=1)))


def build_tree(model: GameModel, flow, horizon: int, quantum: float = QUANTUM,
               prune_eps: float = PRUNE_EPS, node_budget: int = NODE_BUDGET) -> BeliefTree:
    mu = flow_array(flow)
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    if mu.shape[0] < horizon + 2:
        raise ValueError(f"flow has {mu.shape[0]} entries; horizon {horizon} needs {horizon + 2}")
    tree = BeliefTree(model, mu, horizon, quantum, prune_eps)
    root = model.initial[None, :].copy()
    tree.beliefs.append(root)
    tree.keys.append(np.rint(root / quantum).astype(np.int64))
    total = 1
    for t in range(horizon):
        Z = tree.beliefs[t]
        n, A, Y = Z.shape[0], model.n_actions, model.n_obs
        if total + n * A * Y > 4 * node_budget:
            raise NodeBudgetExceeded(t + 1, total + n * A * Y, node_budget)
        H, post = expand_beliefs(Z, model.transition_tensor(mu[t]), model.observation_matrix(mu[t + 1]))
        keep = H > prune_eps
        cand = post[keep]
        qkeys = np.rint(cand / quantum).astype(np.int64)
        ukeys, first, inverse = np.unique(qkeys, axis=0, return_index=True, return_inverse=True)
        total += ukeys.shape[0]
        if total > node_budget:
            raise NodeBudgetExceeded(t + 1, total, node_budget)
        children = np.full((n, A, Y), -1, dtype=np.int64)
        children[keep] = inverse.reshape(-1)
        tree.H.append(H)
        tree.children.append(children)
        tree.beliefs.append(cand[first])
        tree.keys.append(ukeys)
    for t in range(horizon + 1):
        tree.costs.append(tree.beliefs[t] @ model.cost_matrix(mu[t]))
    return tree


@dataclass
class ValueTable:
    """Per-depth values, q-values and argmin masks over a belief tree."""

    tree: BeliefTree
    values: list
    q: list
    argmin: list
    terminal_mode: str
    tie_eps: float = TIE_EPS

    @property
    def root_value(self) -> float:
        return float(self.values[0][0])

    def __getitem__(self, key: BeliefKey):
        i = self.tree.index(key)
        t = key.time
        return (float(self.values[t][i]), set(np.flatnonzero(self.argmin[t][i]).tolist()),
                self.q[t][i].copy())

    def lookup(self, belief: Belief) -> float:
        return float(self.values[belief.time][self.tree.find(belief.time, belief.weights)])


@dataclass
class Policy:
    """Deterministic Markov policy on the nodes of a belief tree."""

    tree: BeliefTree
    actions: list          # per depth, int array (n_t,)
    horizon: int
    flow_tag: str

    def __getitem__(self, key: BeliefKey) -> int:
        return int(self.actions[key.time][self.tree.index(key)])

    def act(self, t: int, nodes: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.actions[t][nodes]

    def step(self, t: int, nodes, a, y):
        return self.tree.children[t][nodes, a, y]

    def action_for_history(self, observations) -> list[int]:
        """Actions taken along an observation sequence y_1, ..., y_k from the root."""
        node, out = 0, []
        for t in range(len(observations) + 1):
            a = int(self.actions[t][node])
            out.append(a)
            if t < len(observations):
                node = int(self.tree.children[t][node, a, observations[t]])
                if node < 0:
                    raise PolicyCoverageError(f"observation history {observations[:t + 1]} was pruned")
        return out

    def with_actions(self, actions: list) -> "Policy":
        return Policy(self.tree, [np.asarray(a, dtype=np.int64) for a in actions],
                      self.horizon, self.flow_tag)


def write_policy_csv(policy: Policy, path, reached_only: bool = False) -> None:
    """Rows (t, belief_key, action); the key is the quantized weights joined by ';'."""
    weights = reach_weights(policy) if reached_only else None
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "belief_key", "action"])
        for t, acts in enumerate(policy.actions):
            for i, a in enumerate(acts):
                if weights is not None and weights[t][i] <= 0:
                    continue
                w.writerow([t, ";".join(str(int(v)) for v in policy.tree.keys[t][i]), int(a)])


def terminal_value(model: GameModel, terminal_mode: str) -> float:
    if terminal_mode == "zero":
        return 0.0
    if terminal_mode == "tail_upper":
        return model.value_bound
    raise ValueError(f"terminal_mode must be one of {TERMINAL_MODES}, got {terminal_mode!r}")


def continuation(tree: BeliefTree, t: int, next_values: np.ndarray, pruned_value: float = 0.0):
    """sum_y H(y|z,a) V_{t+1}(F(z,a,y)) for every node at depth t and action."""
    ch = tree.children[t]
    V = np.where(ch >= 0, next_values[np.maximum(ch, 0)], pruned_value)
    return np.einsum("nay,nay->na", tree.H[t], V)


def backup_layer(tree: BeliefTree, t: int, next_values: Optional[np.ndarray],
                 terminal: float = 0.0, tie_eps: float = TIE_EPS):
    """Apply the Bellman operator at depth t given values at depth t+1.

    At depth T (or when ``next_values`` is None) the continuation is the
    constant ``terminal``. Returns (values, q, argmin mask).
    """
    beta = tree.model.discount
    if t == tree.horizon or next_values is None:
        q = tree.costs[t] + beta * terminal
    else:
        q = tree.costs[t] + beta * continuation(tree, t, next_values, terminal)
    v = q.min(axis=1)
    return v, q, q <= v[:, None] + tie_eps


def bellman_backup(model: GameModel, flow, t: int, z: Belief,
                   next_value: Union[Callable[[Belief], float], ValueTable],
                   tie_eps: float = TIE_EPS, prune_eps: float = PRUNE_EPS):
    """Single-belief Bellman backup; ``next_value`` maps child beliefs to values."""
    mu = flow_array(flow)
    lookup = next_value.lookup if isinstance(next_value, ValueTable) else next_value
    q = np.empty(model.n_actions)
    for a in range(model.n_actions):
        trans = belief_kernel(model, z, a, mu[t], mu[t + 1], prune_eps)
        try:
            cont = sum(h * lookup(child) for _, h, child in trans.children)
        except KeyError as exc:
            raise RuntimeError(f"missing child value at depth {t + 1}: {exc}") from exc
        q[a] = belief_cost(model, z, a, mu[t]) + model.discount * cont
    v = float(q.min())
    return v, q, set(np.flatnonzero(q <= v + tie_eps).tolist())


def solve_values(tree: BeliefTree, terminal_mode: str = "zero", tie_eps: float = TIE_EPS) -> ValueTable:
    term = terminal_value(tree.model, terminal_mode)
    T = tree.horizon
    values, qs, masks = [None] * (T + 1), [None] * (T + 1), [None] * (T + 1)
    nxt = None
    for t in range(T, -1, -1):
        v, q, m = backup_layer(tree, t, nxt, term, tie_eps)
        values[t], qs[t], masks[t] = v, q, m
        nxt = v
    return ValueTable(tree, values, qs, masks, terminal_mode, tie_eps)


def greedy_policy(table: ValueTable) -> Policy:
    """Lowest-index action among the argmin set at every node."""
    acts = [np.argmax(m, axis=1).astype(np.int64) for m in table.argmin]
    return Policy(table.tree, acts, table.tree.horizon, flow_digest(table.tree.flow))


def solve_pomdp(model: GameModel, flow, horizon: int, terminal_mode: str = "zero",
                tie_eps: float = TIE_EPS, quantum: float = QUANTUM,
                prune_eps: float = PRUNE_EPS, node_budget: int = NODE_BUDGET,
                tree: Optional[BeliefTree] = None):
    """Solve the belief-state MDP for a fixed flow; returns (ValueTable, Policy)."""
    terminal_value(model, terminal_mode)
    if tree is None:
        tree = build_tree(model, flow, horizon, quantum, prune_eps, node_budget)
    table = solve_values(tree, terminal_mode, tie_eps)
    return table, greedy_policy(table)


def myopic_policy(tree: BeliefTree) -> Policy:
    acts = [np.argmin(c, axis=1).astype(np.int64) for c in tree.costs]
    return Policy(tree, acts, tree.horizon, flow_digest(tree.flow))


@dataclass
class Propagation:
    """Joint law of (x_t, policy node) pushed forward under a dynamics flow."""

    nodes: list      # per depth, node indices with positive mass
    joint: list      # per depth, (m_t, X) unnormalized P(x_t = x, node)
    flow: np.ndarray  # dynamics flow actually used, (T+2, X)
    lost: np.ndarray  # per depth, mass that fell on pruned branches
    marginals: np.ndarray  # per depth t = 0..T+1, state marginal of x_t


def propagate(policy: Policy, model: GameModel, flow=None, self_consistent: bool = False,
              coverage_tol: float = 1e-8) -> Propagation:
    """Forward pass of the joint (state, information node) law under ``policy``.

    The policy acts on the nodes of its own tree (beliefs formed under the
    tree's flow). States move under ``p(.|x, a, m_t)`` and observations are
    drawn from ``r(.|x', m_{t+1})``, where ``m`` is ``flow`` or, with
    ``self_consistent``, the marginal flow produced by this very pass.
    """
    tree = policy.tree
    T = policy.horizon
    X = model.n_states
    dyn = None if self_consistent else flow_array(tree.flow if flow is None else flow)
    marg = np.zeros((T + 2, X))
    marg[0] = model.initial
    nodes = [np.zeros(1, dtype=np.int64)]
    joint = [model.initial[None, :].copy()]
    lost = np.zeros(T + 2)
    for t in range(T + 1):
        m_t = marg[t] if dyn is None else dyn[t]
        P = model.transition_tensor(m_t)
        acts = policy.actions[t][nodes[t]]
        pred = np.einsum("nx,nxy->ny", joint[t], P[:, acts, :].transpose(1, 0, 2))
        total = pred.sum(axis=0)
        marg[t + 1] = total / total.sum()
        if t == T:
            break
        m_next = marg[t + 1] if dyn is None else dyn[t + 1]
        R = model.observation_matrix(m_next)
        jy = pred[:, None, :] * R.T[None, :, :]               # (n, Y, X)
        ch = tree.children[t][nodes[t][:, None], acts[:, None], np.arange(model.n_obs)[None, :]]
        miss = ch < 0
        lost[t + 1] = jy[miss].sum()
        if lost[t + 1] > coverage_tol:
            raise PolicyCoverageError(
                f"mass {lost[t + 1]:.3g} reaches observation branches outside the policy's tree at depth {t + 1}")
        flat_ch = ch[~miss]
        flat_j = jy[~miss]
        uniq, inv = np.unique(flat_ch, return_inverse=True)
        acc = np.zeros((uniq.shape[0], X))
        np.add.at(acc, inv.reshape(-1), flat_j)
        nodes.append(uniq)
        joint.append(acc)
    if dyn is None:
        dyn_used = marg
    else:
        dyn_used = dyn[: T + 2]
    return Propagation(nodes, joint, dyn_used, lost, marg)


def evaluate_policy(model: GameModel, policy: Policy, flow=None, horizon: Optional[int] = None,
                    terminal_mode: str = "zero") -> float:
    """Expected truncated discounted cost of ``policy`` when the population follows ``flow``."""
    T = policy.horizon if horizon is None else horizon
    if T != policy.horizon:
        raise ValueError(f"policy horizon {policy.horizon} differs from requested horizon {T}")
    prop = propagate(policy, model, flow)
    beta = model.discount
    total = 0.0
    for t in range(T + 1):
        C = model.cost_matrix(prop.flow[t])
        acts = policy.actions[t][prop.nodes[t]]
        total += beta ** t * float(np.einsum("nx,nx->", prop.joint[t], C[:, acts].T))
    mass_T = float(prop.joint[T].sum())
    return total + beta ** (T + 1) * terminal_value(model, terminal_mode) * mass_T


def reach_weights(policy: Policy) -> list:
    """Per-depth node weights under the policy's own tree flow (dense arrays)."""
    prop = propagate(policy, policy.tree.model)
    out = []
    for t, b in enumerate(policy.tree.beliefs):
        w = np.zeros(b.shape[0])
        w[prop.nodes[t]] = prop.joint[t].sum(axis=1)
        out.append(w)
    return out


def optimality_residual(policy: Policy, values: ValueTable, weights: Optional[list] = None,
                        min_weight: float = 1e-12) -> float:
    """Largest q(chosen) - min_a q over nodes the policy reaches with weight > min_weight."""
    if weights is None:
        weights = reach_weights(policy)
    gap = 0.0
    for t, w in enumerate(weights):
        idx = np.flatnonzero(w > min_weight)
        if idx.size == 0:
            continue
        q = values.q[t][idx]
        chosen = q[np.arange(idx.size), policy.actions[t][idx]]
        gap = max(gap, float(np.max(chosen - q.min(axis=1))))
    return gap
