"""Finite-N game simulation under a shared policy, deviation gaps, empirical flows.

Randomness splitting rule: replication ``k`` of an ``N``-agent run draws one
array ``U`` of shape (T+1, 4, N) from ``PCG64(SeedSequence(seed, spawn_key=(N, k)))``.
Agent ``i`` owns column ``i``; purposes are 0 initial state, 1 action
randomization, 2 state transition at step t, 3 observation of the new state.
Shared and deviating runs use identical arrays (common random numbers).
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .flow import MeasureFlow
from .model import GameModel
from .solver import Policy, flow_array, myopic_policy, solve_pomdp

log = logging.getLogger(__name__)

WORKERS_ENV = "POMFG_WORKERS"
SPLITTING_RULE = "PCG64(SeedSequence(seed, spawn_key=(N, rep))).random((T+1, 4, N)); column i = agent i"
DEFAULT_DEVIATIONS = ("best_response", "best_response_plus", "best_response_minus", "myopic", "uniform")
FALLBACK_FLAG = 0.01


class MeanFieldObservationError(ValueError):
    """The observation kernel depends on the mean field; the simulator refuses it."""


class UniformRandomPolicy:
    """Chooses every action uniformly at random, ignoring information."""

    def __init__(self, n_actions: int, horizon: int):
        self.n_actions, self.horizon = n_actions, horizon
        self.tree = None

    def act(self, t, nodes, u):
        return np.minimum((np.asarray(u) * self.n_actions).astype(np.int64), self.n_actions - 1)

    def step(self, t, nodes, a, y):
        return np.zeros_like(np.asarray(nodes))


@dataclass
class SimConfig:
    N: int
    reps: int
    horizon: int
    seed: int = 0
    deviations: Sequence[str] = DEFAULT_DEVIATIONS
    test_functions: Optional[dict] = None
    workers: Optional[int] = None

    def __post_init__(self):
        if self.N < 1 or self.reps < 1 or self.horizon < 0:
            raise ValueError("need N >= 1, reps >= 1, horizon >= 0")

    def n_workers(self) -> int:
        if self.workers is not None:
            return max(1, int(self.workers))
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))


@dataclass
class ReplicationResult:
    cost: float                  # agent 1 discounted cost
    f_values: np.ndarray         # (T+1, n_f): e_t(f)
    onestep: np.ndarray          # (T, n_f): e_{t+1}(g) - one-step prediction from e_t
    fallbacks: int
    decisions: int
    empirical: np.ndarray        # (T+1, X) empirical measures


@dataclass
class SimulationReport:
    N: int
    reps: int
    horizon: int
    seed: int
    J_hat: float
    J_se: float
    tail_bracket: tuple
    costs: np.ndarray
    fallbacks: int
    decisions: int
    f_mean_abs: Optional[np.ndarray] = None   # (T+1, n_f) estimate of E|e_t(f) - mu_t(f)|
    f_se: Optional[np.ndarray] = None
    onestep_mean_abs: Optional[np.ndarray] = None
    onestep_se: Optional[np.ndarray] = None
    test_function_ids: list = field(default_factory=list)
    splitting_rule: str = SPLITTING_RULE

    @property
    def fallback_rate(self) -> float:
        return self.fallbacks / max(self.decisions, 1)

    @property
    def fallback_flagged(self) -> bool:
        return self.fallback_rate > FALLBACK_FLAG


def default_test_functions(model: GameModel) -> dict:
    X = model.n_states
    coords = model.states.coords if model.states.coords is not None else np.arange(X, dtype=float)
    span = float(np.max(np.abs(coords))) or 1.0
    return {
        "one": np.ones(X),
        "coord": coords / span,
        "upper_half": (np.arange(X) >= X / 2).astype(float),
    }


def _sample_rows(rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(rows, axis=-1)
    idx = (cdf < u[:, None]).sum(axis=-1)
    return np.minimum(idx, rows.shape[-1] - 1)


def _replication_uniforms(seed: int, N: int, rep: int, T: int) -> np.ndarray:
    ss = np.random.SeedSequence(seed, spawn_key=(N, rep))
    return np.random.Generator(np.random.PCG64(ss)).random((T + 1, 4, N))


def _check_observation(model: GameModel):
    if not model.observation_mean_field_free:
        raise MeanFieldObservationError(
            "observation kernel depends on the mean-field term; finite-N simulation requires "
            "r(y|x) independent of the empirical measure")


class _Agents:
    """Information state of a group of agents following one policy."""

    def __init__(self, policy, flow: np.ndarray, n: int):
        self.policy, self.flow = policy, flow
        self.nodes = np.zeros(n, dtype=np.int64)
        self.fallbacks = 0

    def act(self, t, u):
        return self.policy.act(t, self.nodes, u)

    def advance(self, model: GameModel, t, a, y):
        nxt = self.policy.step(t, self.nodes, a, y)
        if self.policy.tree is None:
            self.nodes = nxt
            return
        bad = np.flatnonzero(nxt < 0)
        if bad.size:
            tree = self.policy.tree
            P = model.transition_tensor(self.flow[t])
            R = model.observation_matrix(self.flow[t + 1])
            for i in bad:
                zhat = tree.beliefs[t][self.nodes[i]] @ P[:, a[i], :]
                joint = zhat * R[:, y[i]]
                z = joint / joint.sum() if joint.sum() > 0 else zhat / zhat.sum()
                nxt[i] = tree.nearest(t + 1, z)
            self.fallbacks += bad.size
        self.nodes = nxt


def run_replication(model: GameModel, shared, flow, N: int, T: int, seed: int, rep: int,
                    deviant=None, test_functions: Optional[np.ndarray] = None,
                    order: Optional[np.ndarray] = None) -> ReplicationResult:
    """One N-agent trajectory; agent 1 (index 0) follows ``deviant`` if given.

    ``order`` relabels agents: position i uses the random substream of
    original agent ``order[i]``.
    """
    mu = flow_array(flow)
    U = _replication_uniforms(seed, N, rep, T)
    if order is not None:
        U = U[:, :, np.asarray(order)]
    X = model.n_states
    beta = model.discount
    F = np.ones((X, 1)) if test_functions is None else np.asarray(test_functions)
    x = _sample_rows(np.broadcast_to(model.initial, (N, X)), U[0, 0])
    others = _Agents(shared, mu, N)
    dev = _Agents(deviant, mu, 1) if deviant is not None else None
    cost = 0.0
    f_values = np.zeros((T + 1, F.shape[1]))
    onestep = np.zeros((T, F.shape[1]))
    empirical = np.zeros((T + 1, X))
    for t in range(T + 1):
        e = np.bincount(x, minlength=X) / N
        empirical[t] = e
        f_values[t] = e @ F
        a = others.act(t, U[t, 1])
        if dev is not None:
            a = a.copy()
            a[0] = dev.act(t, U[t, 1, :1])[0]
        cost += beta ** t * model.cost_matrix(e)[x[0], a[0]]
        if t == T:
            break
        P = model.transition_tensor(e)
        rows = P[x, a]
        predicted = (rows @ F).mean(axis=0)
        x = _sample_rows(rows, U[t, 2])
        e_next = np.bincount(x, minlength=X) / N
        onestep[t] = e_next @ F - predicted
        R = model.observation_matrix(e_next)
        y = _sample_rows(R[x], U[t, 3])
        if dev is not None:
            dev.advance(model, t, a[:1], y[:1])
        others.advance(model, t, a, y)
    fallbacks = others.fallbacks + (dev.fallbacks if dev is not None else 0)
    return ReplicationResult(cost, f_values, onestep, fallbacks, N * T, empirical)


def _run_all(model, shared, flow, config: SimConfig, deviant=None, F=None) -> list:
    def one(rep):
        return run_replication(model, shared, flow, config.N, config.horizon, config.seed, rep,
                               deviant=deviant, test_functions=F)
    workers = config.n_workers()
    if workers == 1:
        return [one(k) for k in range(config.reps)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, range(config.reps)))


def _mean_se(values: np.ndarray):
    values = np.asarray(values, dtype=float)
    n = values.shape[0]
    mean = values.mean(axis=0)
    se = values.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros_like(mean)
    return mean, se


def simulate_shared(model: GameModel, policy: Policy, equilibrium_flow, config: SimConfig) -> SimulationReport:
    _check_observation(model)
    mu = flow_array(equilibrium_flow)
    T = config.horizon
    tf = config.test_functions or default_test_functions(model)
    F = np.column_stack([np.asarray(v, dtype=float) for v in tf.values()])
    results = _run_all(model, policy, mu, config, F=F)
    costs = np.array([r.cost for r in results])
    J, se = _mean_se(costs)
    target = mu[: T + 1] @ F
    dev = np.stack([np.abs(r.f_values - target) for r in results])
    f_mean, f_se = _mean_se(dev)
    if T > 0:
        one = np.stack([np.abs(r.onestep) for r in results])
        o_mean, o_se = _mean_se(one)
    else:
        o_mean = o_se = np.zeros((0, F.shape[1]))
    tail = model.discount ** (T + 1) * model.value_bound
    report = SimulationReport(config.N, config.reps, T, config.seed, float(J), float(se),
                              (float(J), float(J) + tail), costs,
                              sum(r.fallbacks for r in results), sum(r.decisions for r in results),
                              f_mean, f_se, o_mean, o_se, list(tf.keys()))
    if report.fallback_flagged:
        log.warning("off-tree fallback used in %.2f%% of decisions", 100 * report.fallback_rate)
    return report


def simulate_deviation(model: GameModel, shared_policy, deviant_policy, equilibrium_flow,
                       config: SimConfig) -> SimulationReport:
    """Agent 1 follows ``deviant_policy``, everyone else ``shared_policy``; same seeds."""
    _check_observation(model)
    mu = flow_array(equilibrium_flow)
    results = _run_all(model, shared_policy, mu, config, deviant=deviant_policy)
    costs = np.array([r.cost for r in results])
    J, se = _mean_se(costs)
    tail = model.discount ** (config.horizon + 1) * model.value_bound
    return SimulationReport(config.N, config.reps, config.horizon, config.seed, float(J), float(se),
                            (float(J), float(J) + tail), costs,
                            sum(r.fallbacks for r in results), sum(r.decisions for r in results))


def perturbed_flow(flow, toward: int, weight: float = 0.25) -> MeasureFlow:
    """Mix every entry after the first toward the point mass at state ``toward``."""
    m = flow_array(flow).copy()
    target = np.zeros(m.shape[1])
    target[toward] = 1.0
    m[1:] = (1 - weight) * m[1:] + weight * target
    return MeasureFlow(m)


def deviation_policies(model: GameModel, equilibrium_flow, horizon: int,
                       names: Sequence[str] = DEFAULT_DEVIATIONS, terminal_mode: str = "zero") -> dict:
    mu = flow_array(equilibrium_flow)
    out = {}
    base = None
    for name in names:
        if name in ("best_response", "myopic"):
            if base is None:
                base = solve_pomdp(model, mu, horizon, terminal_mode)
            out[name] = base[1] if name == "best_response" else myopic_policy(base[0].tree)
        elif name == "best_response_plus":
            out[name] = solve_pomdp(model, perturbed_flow(mu, model.n_states - 1), horizon, terminal_mode)[1]
        elif name == "best_response_minus":
            out[name] = solve_pomdp(model, perturbed_flow(mu, 0), horizon, terminal_mode)[1]
        elif name == "uniform":
            out[name] = UniformRandomPolicy(model.n_actions, horizon)
        else:
            raise ValueError(f"unknown deviation {name!r}; choose from {DEFAULT_DEVIATIONS}")
    return out


@dataclass
class EpsPoint:
    N: int
    eps_hat: float
    se: float
    ci_lo: float
    ci_hi: float
    best_deviation: str
    gaps: dict          # name -> (mean gap, se)
    J_shared: float


def estimate_eps(model: GameModel, policy, equilibrium_flow, deviations: dict, config: SimConfig,
                 N_list: Sequence[int], z: float = 2.0) -> list[EpsPoint]:
    """Paired estimates of max_dev (J_shared - J_dev), clipped at 0; a lower bound on epsilon."""
    if not deviations:
        raise ValueError("deviation set is empty")
    _check_observation(model)
    mu = flow_array(equilibrium_flow)
    out = []
    for N in N_list:
        cfg = SimConfig(N, config.reps, config.horizon, config.seed, workers=config.workers)
        shared = np.array([r.cost for r in _run_all(model, policy, mu, cfg)])
        gaps = {}
        for name, dev in deviations.items():
            costs = np.array([r.cost for r in _run_all(model, policy, mu, cfg, deviant=dev)])
            m, s = _mean_se(shared - costs)
            gaps[name] = (float(m), float(s))
        best = max(gaps, key=lambda k: gaps[k][0])
        m, s = gaps[best]
        eps = max(0.0, m)
        out.append(EpsPoint(N, eps, s, max(0.0, m - z * s), max(0.0, m + z * s), best, gaps,
                            float(shared.mean())))
    return out


@dataclass
class ConvergenceRow:
    t: int
    N: int
    f_id: str
    estimate: float
    stderr: float


def empirical_convergence(model: GameModel, policy, equilibrium_flow, config: SimConfig,
                          N_list: Sequence[int], test_functions: Optional[dict] = None):
    """Returns (convergence rows, one-step rows with the 2||g||/sqrt(N) bound)."""
    tf = test_functions or config.test_functions or default_test_functions(model)
    rows, onestep = [], []
    for N in N_list:
        cfg = SimConfig(N, config.reps, config.horizon, config.seed, test_functions=tf,
                        workers=config.workers)
        rep = simulate_shared(model, policy, equilibrium_flow, cfg)
        for t in range(config.horizon + 1):
            for j, name in enumerate(tf):
                rows.append(ConvergenceRow(t, N, name, float(rep.f_mean_abs[t, j]), float(rep.f_se[t, j])))
        for t in range(config.horizon):
            for j, name in enumerate(tf):
                g_sup = float(np.max(np.abs(tf[name])))
                onestep.append((ConvergenceRow(t, N, name, float(rep.onestep_mean_abs[t, j]),
                                               float(rep.onestep_se[t, j])), 2 * g_sup / np.sqrt(N)))
    return rows, onestep


def fit_rate(rows: list, t: int, f_id: str) -> float:
    """Least-squares slope of log estimate against log N."""
    pts = sorted((r.N, r.estimate) for r in rows if r.t == t and r.f_id == f_id)
    Ns = np.log([p[0] for p in pts])
    ys = np.log([p[1] for p in pts])
    return float(np.polyfit(Ns, ys, 1)[0])
