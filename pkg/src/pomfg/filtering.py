"""Belief-state reduction: prediction, observation predictive, Bayes update.

Timing follows the reduction of the partially observed problem: the state
moves under ``p(.|x, a, mu_t)`` and the next observation is emitted under
``r(.|x', mu_{t+1})``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import GameModel

PRUNE_EPS = 1e-12


class ZeroProbabilityBranch(ValueError):
    """Bayes update requested on an observation with (numerically) zero probability."""


@dataclass(frozen=True)
class Belief:
    time: int
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-10:
            raise ValueError(f"belief weights must form a probability vector (sum {w.sum():.15g})")
        object.__setattr__(self, "weights", w)


@dataclass
class BeliefTransition:
    children: list[tuple[int, float, Belief]]
    pruned_mass: float = 0.0
    pruned: list[int] = field(default_factory=list)


def _normalize(v: np.ndarray) -> np.ndarray:
    v = np.clip(v, 0.0, None)
    return v / v.sum(axis=-1, keepdims=True)


def predict(model: GameModel, z: Belief, a: int, mu_t) -> Belief:
    P = model.transition_tensor(mu_t)[:, a, :]
    return Belief(z.time + 1, _normalize(z.weights @ P))


def observation_predictive(model: GameModel, z: Belief, a: int, mu_t, mu_next) -> np.ndarray:
    zhat = predict(model, z, a, mu_t).weights
    return zhat @ model.observation_matrix(mu_next)


def bayes_update(model: GameModel, z: Belief, a: int, y: int, mu_t, mu_next,
                 prune_eps: float = PRUNE_EPS) -> Belief:
    zhat = predict(model, z, a, mu_t).weights
    joint = zhat * model.observation_matrix(mu_next)[:, y]
    H = joint.sum()
    if H <= prune_eps:
        raise ZeroProbabilityBranch(
            f"observation {y} has predictive probability {H:.3g} <= {prune_eps:.3g}")
    return Belief(z.time + 1, _normalize(joint / H))


def belief_kernel(model: GameModel, z: Belief, a: int, mu_t, mu_next,
                  prune_eps: float = PRUNE_EPS) -> BeliefTransition:
    """Finitely supported belief transition: one child per retained observation."""
    zhat = predict(model, z, a, mu_t).weights
    joint = zhat[:, None] * model.observation_matrix(mu_next)
    H = joint.sum(axis=0)
    out = BeliefTransition(children=[])
    for y in range(H.shape[0]):
        if H[y] > prune_eps:
            out.children.append((y, float(H[y]), Belief(z.time + 1, _normalize(joint[:, y] / H[y]))))
        else:
            out.pruned_mass += float(H[y])
            out.pruned.append(y)
    return out


def belief_cost(model: GameModel, z: Belief, a: int, mu_t) -> float:
    return float(z.weights @ model.cost_matrix(mu_t)[:, a])


def expand_beliefs(Z: np.ndarray, P: np.ndarray, R: np.ndarray):
    """Batch belief kernel for all actions and observations.

    ``Z`` is (n, X), ``P`` is the transition tensor (X, A, X) at mu_t and
    ``R`` the observation matrix (X, Y) at mu_{t+1}. Returns predictive
    probabilities H of shape (n, A, Y) and posteriors of shape (n, A, Y, X);
    posteriors for observations with H == 0 are left as zeros.
    """
    zhat = np.einsum("nx,xay->nay", Z, P)
    joint = zhat[:, :, None, :] * R.T[None, None, :, :]
    H = joint.sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        post = np.where(H[..., None] > 0, joint / H[..., None], 0.0)
    s = post.sum(axis=-1, keepdims=True)
    post = np.where(s > 0, post / np.where(s > 0, s, 1.0), 0.0)
    return H, post
