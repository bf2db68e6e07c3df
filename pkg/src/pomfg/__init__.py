"""Partially observed mean-field games: belief-state solver, equilibrium search and finite-N verification."""

from .equilibrium import EquilibriumConfig, EquilibriumReport, find_equilibrium, nce_residual
from .filtering import Belief, bayes_update, belief_cost, belief_kernel, observation_predictive, predict
from .flow import MeasureFlow, barycenter, induced_flow, moment_check, state_action_flow
from .model import GameModel, Grid, ModelValidationError, build_gaussian, build_tabular, validate
from .simulator import SimConfig, estimate_eps, empirical_convergence, simulate_deviation, simulate_shared
from .solver import BeliefKey, Policy, ValueTable, evaluate_policy, optimality_residual, solve_pomdp

__version__ = "0.1.0"
