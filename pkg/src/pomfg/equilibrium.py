"""Damped fixed-point search for a mean-field equilibrium (policy, flow)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .flow import (MeasureFlow, StateActionFlow, induced_flow, recursive_from_initial,
                   state_action_flow)
from .model import GameModel
from .solver import (TIE_EPS, Policy, ValueTable, flow_array, optimality_residual,
                     solve_pomdp)

log = logging.getLogger(__name__)


@dataclass
class EquilibriumConfig:
    horizon: int
    damping: Union[float, str] = 0.5   # constant step in (0, 1], or "fictitious" for 1/(k+1)
    tol: float = 1e-6
    max_iters: int = 500
    terminal_mode: str = "zero"
    tie_eps: float = TIE_EPS

    def __post_init__(self):
        if self.damping != "fictitious":
            lam = float(self.damping)
            if not 0.0 < lam <= 1.0:
                raise ValueError(f"damping must lie in (0, 1], got {self.damping}")
            self.damping = lam
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.horizon < 0:
            raise ValueError("horizon must be nonnegative")

    def step(self, k: int) -> float:
        if self.damping == "fictitious":
            return 1.0 / (k + 1)
        return float(self.damping)


@dataclass
class EquilibriumReport:
    flow: MeasureFlow
    policy: Policy
    values: ValueTable
    residual_history: list
    best_iteration: int
    residual: float
    optimality_residual: float
    value_bracket: tuple
    converged: bool
    induced: MeasureFlow
    monotonicity: Optional[float] = None
    meta: dict = field(default_factory=dict)


def nce_residual(flow_a, flow_b) -> float:
    """max_t || mu_a,t - mu_b,t ||_1."""
    a, b = flow_array(flow_a), flow_array(flow_b)
    if a.shape != b.shape:
        raise ValueError(f"flow shapes differ: {a.shape} vs {b.shape}")
    return float(np.max(np.abs(a - b).sum(axis=1)))


def find_equilibrium(model: GameModel, config: EquilibriumConfig,
                     initial_flow: Optional[MeasureFlow] = None) -> EquilibriumReport:
    T = config.horizon
    mu = recursive_from_initial(model, T) if initial_flow is None else initial_flow
    history = []
    best = None
    first_policy = None
    for k in range(config.max_iters):
        table, policy = solve_pomdp(model, mu, T, config.terminal_mode, config.tie_eps)
        if first_policy is None:
            first_policy = policy
        lam_flow = induced_flow(model, policy)
        res = nce_residual(mu, lam_flow)
        history.append(res)
        log.debug("iteration %d: residual %.3e", k, res)
        if best is None or res < best[4]:
            best = (k, mu, policy, table, res, lam_flow)
        if res <= config.tol:
            break
        lam = config.step(k)
        mixed = (1.0 - lam) * mu.measures + lam * lam_flow.measures
        mixed[0] = model.initial
        mu = MeasureFlow(mixed / mixed.sum(axis=1, keepdims=True))
    k, mu, policy, table, res, lam_flow = best
    gap = optimality_residual(policy, table)
    upper, _ = solve_pomdp(model, mu, T, "tail_upper", config.tie_eps, tree=policy.tree)
    lower = table.root_value if config.terminal_mode == "zero" else \
        solve_pomdp(model, mu, T, "zero", config.tie_eps, tree=policy.tree)[0].root_value
    converged = res <= config.tol and gap <= config.tie_eps
    mono = monotonicity_diagnostic(model, state_action_flow(policy), state_action_flow(first_policy))
    return EquilibriumReport(mu, policy, table, history, k, res, gap,
                             (lower, upper.root_value), converged, lam_flow, mono)


def monotonicity_diagnostic(model: GameModel, sa_a: StateActionFlow, sa_b: StateActionFlow,
                            horizon: Optional[int] = None) -> float:
    """Truncated sum_t beta^t integral of (C^a_t - C^b_t) against (nu_a,t - nu_b,t).

    Each flow's mean-field term is the barycenter of its own belief marginal.
    A nonnegative value means the monotonicity condition holds for this pair.
    """
    T = min(sa_a.horizon, sa_b.horizon) if horizon is None else horizon
    beta = model.discount
    total = 0.0
    for t in range(T + 1):
        Ca = model.cost_matrix(sa_a.mean_field(t))
        Cb = model.cost_matrix(sa_b.mean_field(t))
        D = Ca - Cb

        def integral(sa):
            per_node = np.einsum("nx,nx->n", sa.beliefs[t], D[:, sa.actions[t]].T)
            return float(sa.weights[t] @ per_node)

        total += beta ** t * (integral(sa_a) - integral(sa_b))
    return total
