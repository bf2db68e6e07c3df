"""Brute-force reference computations for small instances.

Nothing here calls the filtering or solver code. Every quantity is obtained
by enumerating state paths or observation histories directly, so these
functions serve as independent oracles in the tests and in ``cmd_oracle``.

Histories are indexed per depth: the root is history 0 at depth 0, and the
child of history ``h`` under observation ``y`` is ``h * Y + y``. A
deterministic observation-history policy assigns one action to every history
at depths 0..T, i.e. to ``sum_t Y**t`` decision points.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .model import GameModel


def _flow(flow) -> np.ndarray:
    return np.asarray(getattr(flow, "measures", flow), dtype=float)


def _paths(n_states: int, length: int) -> np.ndarray:
    return np.array(list(itertools.product(range(n_states), repeat=length + 1)),
                    dtype=np.int64).reshape(-1, length + 1)


def filter_by_enumeration(model: GameModel, flow, actions: Sequence[int],
                          observations: Sequence[int]) -> Optional[np.ndarray]:
    """P(x_t | a_0..a_{t-1}, y_1..y_t) by summing the joint law over all state paths.

    Returns None when the observation sequence has probability zero.
    """
    post = filter_all_sequences(model, flow, len(actions),
                                np.asarray(actions, dtype=np.int64)[None, :],
                                np.asarray(observations, dtype=np.int64)[None, :])[0]
    return None if np.isnan(post[0]) else post


def filter_all_sequences(model: GameModel, flow, length: int, actions=None, observations=None):
    """Exact conditionals of x_t for many action/observation sequences at once.

    Without explicit sequences, every combination of ``length`` actions and
    observations is enumerated (action-major, then observation, per step).
    Returns posteriors of shape (S, X); rows of NaN mark zero-probability
    sequences. With enumeration, also returns the (actions, observations) arrays.
    """
    mu = _flow(flow)
    X, A, Y = model.n_states, model.n_actions, model.n_obs
    enumerate_all = actions is None
    if enumerate_all:
        combos = np.array(list(itertools.product(range(A * Y), repeat=length)),
                          dtype=np.int64).reshape(-1, length)
        actions, observations = combos // Y, combos % Y
    if actions.shape[1] != length or observations.shape != actions.shape:
        raise ValueError("need one observation per action")
    paths = _paths(X, length)                                    # (Q, t+1)
    prob = np.broadcast_to(model.initial[paths[:, 0]], (actions.shape[0], paths.shape[0])).copy()
    for s in range(length):
        K = model.transition_tensor(mu[s])
        R = model.observation_matrix(mu[s + 1])
        step = K[paths[None, :, s], actions[:, s:s + 1], paths[None, :, s + 1]]
        prob *= step * R[paths[None, :, s + 1], observations[:, s:s + 1]]
    joint = prob.reshape(actions.shape[0], -1, X).sum(axis=1)
    total = joint.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        post = np.where(total > 0, joint / total, np.nan)
    if enumerate_all:
        return post, actions, observations
    return post


def n_decision_points(n_obs: int, horizon: int) -> int:
    return sum(n_obs ** t for t in range(horizon + 1))


def all_history_policies(n_actions: int, n_obs: int, horizon: int) -> np.ndarray:
    """Every deterministic history policy, shape (A**n, n) with n decision points."""
    n = n_decision_points(n_obs, horizon)
    return np.array(list(itertools.product(range(n_actions), repeat=n)), dtype=np.int64)


def _offsets(n_obs: int, horizon: int) -> list:
    off, acc = [], 0
    for t in range(horizon + 1):
        off.append(acc)
        acc += n_obs ** t
    return off


@dataclass
class HistoryEvaluation:
    values: np.ndarray        # (P,) expected truncated discounted cost
    reach: list               # per depth, (P, Y**t) history probabilities
    cost_to_go: list          # per depth, (P, Y**t) unnormalized discounted cost from that history
    joints: list              # per depth, (P, Y**t, X) P(x_t = x, history)


def evaluate_history_policies(model: GameModel, flow, horizon: int, policies: np.ndarray,
                              terminal: float = 0.0) -> HistoryEvaluation:
    """Exact costs of many history policies against a fixed flow."""
    mu = _flow(flow)
    P = policies.shape[0]
    X, Y = model.n_states, model.n_obs
    beta = model.discount
    off = _offsets(Y, horizon)
    joints = [np.broadcast_to(model.initial, (P, 1, X)).copy()]
    stage = []
    for t in range(horizon + 1):
        J = joints[t]
        acts = policies[:, off[t]: off[t] + Y ** t]
        C = model.cost_matrix(mu[t])                        # (X, A)
        stage.append(np.einsum("phx,xph->ph", J, C[:, acts]))
        if t == horizon:
            break
        K = model.transition_tensor(mu[t])                  # (X, A, X)
        pred = np.einsum("phx,xphz->phz", J, K[:, acts, :])
        R = model.observation_matrix(mu[t + 1])             # (X, Y)
        nxt = pred[:, :, None, :] * R.T[None, None, :, :]
        joints.append(nxt.reshape(P, -1, X))
    ctg = [None] * (horizon + 1)
    last = joints[horizon].sum(axis=2)
    ctg[horizon] = stage[horizon] + beta * terminal * last
    for t in range(horizon - 1, -1, -1):
        child = ctg[t + 1].reshape(P, -1, Y).sum(axis=2)
        ctg[t] = stage[t] + beta * child
    reach = [j.sum(axis=2) for j in joints]
    return HistoryEvaluation(ctg[0][:, 0].copy(), reach, ctg, joints)


def exhaustive_minimum(model: GameModel, flow, horizon: int, terminal: float = 0.0):
    """Minimum over all deterministic history policies; returns (value, argmin policy, all values)."""
    pols = all_history_policies(model.n_actions, model.n_obs, horizon)
    ev = evaluate_history_policies(model, flow, horizon, pols, terminal)
    k = int(np.argmin(ev.values))
    return float(ev.values[k]), pols[k], ev.values


def q_gap_by_enumeration(model: GameModel, flow, horizon: int, policy_row: np.ndarray,
                         min_weight: float = 1e-12, terminal: float = 0.0) -> float:
    """max over histories reached by ``policy_row`` of q(chosen) - min_a q(a).

    The q-value of action ``a`` at history ``h`` is the least conditional
    cost-to-go over all policies that agree with ``policy_row`` on the
    ancestors of ``h`` and play ``a`` at ``h``.
    """
    Y, A = model.n_obs, model.n_actions
    pols = all_history_policies(A, Y, horizon)
    ev = evaluate_history_policies(model, flow, horizon, pols, terminal)
    off = _offsets(Y, horizon)
    own = int(np.flatnonzero((pols == policy_row).all(axis=1))[0])
    gap = 0.0
    for t in range(horizon + 1):
        for h in range(Y ** t):
            w = ev.reach[t][own, h]
            if w <= min_weight:
                continue
            anc, node = [], h
            for s in range(t - 1, -1, -1):
                node //= Y
                anc.append(off[s] + node)
            agree = np.ones(pols.shape[0], dtype=bool)
            for j in anc:
                agree &= pols[:, j] == policy_row[j]
            q = np.full(A, np.inf)
            for a in range(A):
                sel = agree & (pols[:, off[t] + h] == a)
                q[a] = ev.cost_to_go[t][sel, h].min() / w
            gap = max(gap, float(q[policy_row[off[t] + h]] - q.min()))
    return gap


def induced_flow_by_enumeration(model: GameModel, horizon: int, policy_row: np.ndarray) -> np.ndarray:
    """Flow produced when everyone follows a history policy, with the output fed back into p."""
    X, Y = model.n_states, model.n_obs
    off = _offsets(Y, horizon)
    out = np.zeros((horizon + 2, X))
    out[0] = model.initial
    J = model.initial[None, :].copy()            # (Y**t, X)
    for t in range(horizon + 1):
        acts = policy_row[off[t]: off[t] + Y ** t]
        K = model.transition_tensor(out[t])
        pred = np.einsum("hx,xhz->hz", J, K[:, acts, :])
        out[t + 1] = pred.sum(axis=0)
        if t < horizon:
            R = model.observation_matrix(out[t + 1])
            J = (pred[:, None, :] * R.T[None, :, :]).reshape(-1, X)
    return out


@dataclass
class GridSearchResult:
    flow: np.ndarray
    residual: float
    policy: np.ndarray
    step: float


def equilibrium_grid_search(model: GameModel, step: float = 1e-3) -> GridSearchResult:
    """Fixed point of a 2-state game at horizon 2 by dense search over (mu_1, mu_2).

    For each grid point the best response is found among all history
    policies, its induced flow is computed exactly, and the point with the
    smallest sup-L1 discrepancy wins. mu_3 is set to the induced value.
    """
    if model.n_states != 2:
        raise ValueError("grid search oracle needs a 2-state model")
    if not model.observation_mean_field_free:
        raise ValueError("grid search oracle needs a mean-field free observation kernel")
    T = 2
    pols = all_history_policies(model.n_actions, model.n_obs, T)
    induced = np.stack([induced_flow_by_enumeration(model, T, p) for p in pols])   # (P, 4, 2)
    grid = np.linspace(0.0, 1.0, int(round(1.0 / step)) + 1)
    mu2 = np.stack([grid, 1.0 - grid], axis=1)                                    # (G, 2)
    beta = model.discount
    best = (np.inf, None, None)
    for g1 in grid:
        m1 = np.array([g1, 1.0 - g1])
        flow = np.stack([model.initial, m1, m1, m1])
        ev = evaluate_history_policies(model, flow, 1, pols[:, :3])
        head = ev.values                                                    # t = 0, 1
        # depth-2 joint per policy, then stage cost linear in mu_2
        K = model.transition_tensor(m1)
        acts1 = pols[:, 1:3]
        pred = np.einsum("phx,xphz->phz", ev.joints[1], K[:, acts1, :])
        R = model.observation_matrix(m1)
        J2 = (pred[:, :, None, :] * R.T[None, None, :, :]).reshape(len(pols), -1, 2)
        acts2 = pols[:, 3:7]
        coef = np.zeros((len(pols), 2))
        for xb in range(2):
            C = model.cost_matrix(np.eye(2)[xb])
            coef[:, xb] = np.einsum("phx,xph->p", J2, C[:, acts2])
        values = head[:, None] + beta ** 2 * coef @ mu2.T                   # (P, G)
        choice = np.argmin(values, axis=0)
        lam = induced[choice]                                               # (G, 4, 2)
        res = np.maximum(np.abs(lam[:, 1] - m1).sum(axis=1), np.abs(lam[:, 2] - mu2).sum(axis=1))
        j = int(np.argmin(res))
        if res[j] < best[0]:
            best = (float(res[j]), np.stack([model.initial, m1, mu2[j], lam[j, 3]]), pols[choice[j]])
    return GridSearchResult(best[1], best[0], best[2], step)


def binomial_mad(p0: float, N: int) -> float:
    """E|K/N - p0| for K ~ Binomial(N, p0), by direct summation."""
    total = 0.0
    for k in range(N + 1):
        logw = (math.lgamma(N + 1) - math.lgamma(k + 1) - math.lgamma(N - k + 1))
        if 0 < p0 < 1:
            logw += k * math.log(p0) + (N - k) * math.log1p(-p0)
            w = math.exp(logw)
        else:
            w = 1.0 if k == round(p0 * N) else 0.0
        total += w * abs(k / N - p0)
    return total


def history_row(policy, n_obs: int) -> np.ndarray:
    """Flatten a tree policy into a history policy; pruned histories get action 0."""
    T = policy.horizon
    off = _offsets(n_obs, T)
    row = np.zeros(off[-1] + n_obs ** T, dtype=np.int64)
    nodes = {0: 0}
    for t in range(T + 1):
        nxt = {}
        for h, node in nodes.items():
            a = int(policy.actions[t][node])
            row[off[t] + h] = a
            if t < T:
                for y in range(n_obs):
                    child = int(policy.tree.children[t][node, a, y])
                    if child >= 0:
                        nxt[h * n_obs + y] = child
        nodes = nxt
    return row
