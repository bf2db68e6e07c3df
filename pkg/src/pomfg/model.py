"""Game models: finite grids with kernels coupled to a mean-field measure.

Two families are provided. :class:`TabularAffineModel` mixes transition
slices and cost slices linearly in the measure; :class:`GaussianAdditiveModel`
discretizes the additive Gaussian-noise dynamics

    x' = sum_xbar mu(xbar) f(x, a, xbar) + g(x, a) * w,   w ~ N(0, 1)
    y  = H(x, mu) + v,                                    v ~ N(0, 1)

onto coordinate grids by midpoint quadrature with renormalization.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

STOCHASTIC_TOL = 1e-12


class ModelValidationError(ValueError):
    """A kernel or cost table violates its stochasticity/sign contract."""


@dataclass(frozen=True)
class Grid:
    """A finite grid of states, observations or actions."""

    size: int
    coords: Optional[np.ndarray] = None
    cell_width: Optional[float] = None

    def __post_init__(self):
        if int(self.size) < 1:
            raise ModelValidationError(f"grid size must be >= 1, got {self.size}")
        object.__setattr__(self, "size", int(self.size))
        if self.coords is not None:
            coords = np.asarray(self.coords, dtype=float).reshape(-1)
            if coords.shape[0] != self.size:
                raise ModelValidationError(
                    f"grid has {self.size} points but {coords.shape[0]} coordinates")
            if np.any(np.diff(coords) <= 0):
                raise ModelValidationError("grid coordinates must be strictly increasing")
            object.__setattr__(self, "coords", coords)
        if self.cell_width is not None and not self.cell_width > 0:
            raise ModelValidationError("cell_width must be positive")

    @classmethod
    def uniform(cls, lo: float, hi: float, size: int) -> "Grid":
        coords = np.linspace(lo, hi, size)
        width = (hi - lo) / (size - 1) if size > 1 else 1.0
        return cls(size, coords, width)

    @classmethod
    def from_values(cls, values) -> "Grid":
        coords = np.asarray(values, dtype=float)
        width = float(np.min(np.diff(coords))) if coords.size > 1 else 1.0
        return cls(coords.size, coords, width)


def as_measure(weights, size: Optional[int] = None, tol: float = STOCHASTIC_TOL) -> np.ndarray:
    """Return ``weights`` as a float array after checking it is a probability vector."""
    mu = np.asarray(weights, dtype=float).reshape(-1)
    if size is not None and mu.shape[0] != size:
        raise ModelValidationError(f"measure has {mu.shape[0]} entries, expected {size}")
    if np.any(mu < 0):
        raise ModelValidationError("measure has negative weights")
    if abs(mu.sum() - 1.0) > tol:
        raise ModelValidationError(f"measure sums to {mu.sum():.15g}, not 1")
    return mu


def dirac(index: int, size: int) -> np.ndarray:
    mu = np.zeros(size)
    mu[index] = 1.0
    return mu


class GameModel:
    """Capability record shared by every model family.

    Subclasses implement the tensor evaluators; the per-point evaluators
    ``transition``, ``observation`` and ``cost`` are derived from them.
    """

    states: Grid
    observations: Grid
    actions: Grid
    discount: float
    initial: np.ndarray
    cost_bound: float
    moment_weights: np.ndarray
    moment_alpha: float
    # r(y|x, mu) does not depend on mu
    observation_mean_field_free: bool = True

    def _init_common(self, states, observations, actions, discount, initial,
                     moment_weights=None, moment_alpha=None):
        self.states, self.observations, self.actions = states, observations, actions
        if not 0.0 <= discount < 1.0:
            raise ModelValidationError(f"discount must lie in [0, 1), got {discount}")
        self.discount = float(discount)
        self.initial = as_measure(initial, states.size, tol=1e-10)
        if moment_weights is None:
            moment_weights = np.ones(states.size)
        self.moment_weights = np.asarray(moment_weights, dtype=float)
        if np.any(self.moment_weights < 0):
            raise ModelValidationError("moment weights must be nonnegative")
        self.moment_alpha = 1.0 if moment_alpha is None else float(moment_alpha)

    @property
    def n_states(self) -> int:
        return self.states.size

    @property
    def n_obs(self) -> int:
        return self.observations.size

    @property
    def n_actions(self) -> int:
        return self.actions.size

    @property
    def moment_M(self) -> float:
        return float(self.moment_weights @ self.initial)

    @property
    def value_bound(self) -> float:
        return self.cost_bound / (1.0 - self.discount)

    # tensor evaluators -------------------------------------------------
    def transition_tensor(self, mu) -> np.ndarray:
        """p(x'|x, a, mu) as an array of shape (X, A, X)."""
        raise NotImplementedError

    def observation_matrix(self, mu) -> np.ndarray:
        """r(y|x, mu) as an array of shape (X, Y)."""
        raise NotImplementedError

    def cost_matrix(self, mu) -> np.ndarray:
        """c(x, a, mu) as an array of shape (X, A)."""
        raise NotImplementedError

    # per-point evaluators ----------------------------------------------
    def transition(self, x: int, a: int, mu) -> np.ndarray:
        return self.transition_tensor(mu)[x, a]

    def observation(self, x: int, mu) -> np.ndarray:
        return self.observation_matrix(mu)[x]

    def cost(self, x: int, a: int, mu) -> float:
        return float(self.cost_matrix(mu)[x, a])


class TabularAffineModel(GameModel):
    """p(.|x,a,mu) = sum_xbar mu(xbar) K(.|x,a,xbar), c = sum_xbar mu(xbar) d(x,a,xbar)."""

    def __init__(self, K, d, r, discount, initial, moment_weights=None, moment_alpha=None):
        K = np.asarray(K, dtype=float)
        d = np.asarray(d, dtype=float)
        r = np.asarray(r, dtype=float)
        if K.ndim != 4 or K.shape[0] != K.shape[2] or K.shape[0] != K.shape[3]:
            raise ModelValidationError(f"transition tensor must have shape (X, A, X, X), got {K.shape}")
        X, A = K.shape[:2]
        if d.shape != (X, A, X):
            raise ModelValidationError(f"cost tensor must have shape {(X, A, X)}, got {d.shape}")
        if r.ndim != 2 or r.shape[0] != X:
            raise ModelValidationError(f"observation table must have shape (X, Y), got {r.shape}")
        self.K, self.d, self.r = K, d, r
        self._init_common(Grid(X), Grid(r.shape[1]), Grid(A), discount, initial,
                          moment_weights, moment_alpha)
        self.cost_bound = float(d.max()) if d.size else 0.0

    def transition_tensor(self, mu):
        return np.einsum("xazy,z->xay", self.K, np.asarray(mu, dtype=float))

    def observation_matrix(self, mu):
        return self.r

    def cost_matrix(self, mu):
        return self.d @ np.asarray(mu, dtype=float)

    def violations(self) -> list[str]:
        out = []
        X, A = self.n_states, self.n_actions
        for x in range(X):
            for a in range(A):
                for xb in range(X):
                    row = self.K[x, a, xb]
                    if np.any(row < 0) or abs(row.sum() - 1.0) > STOCHASTIC_TOL:
                        out.append(f"transition row (x={x}, a={a}, xbar={xb}) "
                                   f"sums to {row.sum():.12g} (min entry {row.min():.12g})")
                    if np.any(self.d[x, a, xb] < 0):
                        out.append(f"cost entry (x={x}, a={a}, xbar={xb}) is negative: "
                                   f"{self.d[x, a, xb]:.12g}")
        for x in range(X):
            row = self.r[x]
            if np.any(row < 0) or abs(row.sum() - 1.0) > STOCHASTIC_TOL:
                out.append(f"observation row (x={x}) sums to {row.sum():.12g} "
                           f"(min entry {row.min():.12g})")
        return out


def build_tabular(K, d, r, discount, initial, moment_weights=None, moment_alpha=None,
                  check: bool = True) -> TabularAffineModel:
    """Build a tabular affine-coupling model.

    ``K`` has shape (X, A, Xbar, X'), ``d`` shape (X, A, Xbar) and ``r`` shape (X, Y).
    With ``check`` set, the first violated row raises :class:`ModelValidationError`.
    """
    model = TabularAffineModel(K, d, r, discount, initial, moment_weights, moment_alpha)
    if check:
        problems = model.violations()
        if problems:
            raise ModelValidationError(problems[0])
    return model


def _gaussian_cells(centers: np.ndarray, coords: np.ndarray, scale: np.ndarray,
                    width: float) -> np.ndarray:
    # midpoint rule over grid cells, then renormalize over the grid
    z = (coords - centers[..., None]) / scale[..., None]
    logits = -0.5 * z * z
    logits -= logits.max(axis=-1, keepdims=True)
    dens = np.exp(logits) * width
    return dens / dens.sum(axis=-1, keepdims=True)


class GaussianAdditiveModel(GameModel):
    def __init__(self, f, g, h, d, states: Grid, observations: Grid, actions: Grid,
                 discount, initial, observation_mean_field_free: bool = True,
                 L: Optional[float] = None):
        for grid, name in ((states, "state"), (observations, "observation"), (actions, "action")):
            if grid.coords is None:
                raise ModelValidationError(f"{name} grid needs coordinates")
        for grid, name in ((states, "state"), (observations, "observation")):
            if grid.cell_width is None:
                raise ModelValidationError(f"{name} grid needs a cell width")
        X, A = states.size, actions.size
        f = np.asarray(f, dtype=float)
        g = np.asarray(g, dtype=float)
        h = np.asarray(h, dtype=float)
        d = np.asarray(d, dtype=float)
        if f.shape != (X, A, X):
            raise ModelValidationError(f"f must have shape {(X, A, X)}, got {f.shape}")
        if g.shape != (X, A):
            raise ModelValidationError(f"g must have shape {(X, A)}, got {g.shape}")
        if d.shape != (X, A, X):
            raise ModelValidationError(f"d must have shape {(X, A, X)}, got {d.shape}")
        if h.ndim == 1:
            h = np.repeat(h[:, None], X, axis=1)
        if h.shape != (X, X):
            raise ModelValidationError(f"h must have shape {(X,)} or {(X, X)}, got {h.shape}")
        if observation_mean_field_free and np.any(h != h[:, :1]):
            raise ModelValidationError(
                "observation mode is mean-field free but h depends on its second argument")
        theta = float(np.min(np.abs(g)))
        if not theta > 0:
            raise ModelValidationError(f"inf |g| must be positive, got {theta}")
        if not np.all(np.isfinite(f)) or not np.all(np.isfinite(h)) or not np.all(np.isfinite(d)):
            raise ModelValidationError("f, h and d must be finite")
        self.f, self.g, self.h, self.d = f, g, h, d
        self.theta = theta
        self.observation_mean_field_free = bool(observation_mean_field_free)
        xi = states.coords
        f_sup = float(np.max(np.abs(f)))
        if L is not None:
            alpha = max(1.0 + f_sup ** 2, float(L))
        else:
            # sup_x (1 + ||f||^2 + sup_a g^2(x, a)) / (1 + x^2); finite at x = 0
            alpha = float(np.max((1.0 + f_sup ** 2 + np.max(g ** 2, axis=1)) / (1.0 + xi ** 2)))
        self._init_common(states, observations, actions, discount, initial,
                          1.0 + xi ** 2, alpha)
        self.cost_bound = float(d.max())
        if np.any(d < 0):
            raise ModelValidationError("cost tensor d must be nonnegative")

    def drift(self, mu) -> np.ndarray:
        """F(x, a, mu), shape (X, A)."""
        return self.f @ np.asarray(mu, dtype=float)

    def observation_mean(self, mu) -> np.ndarray:
        """H(x, mu), shape (X,)."""
        if self.observation_mean_field_free:
            return self.h[:, 0].copy()
        return self.h @ np.asarray(mu, dtype=float)

    def transition_tensor(self, mu):
        return _gaussian_cells(self.drift(mu), self.states.coords, np.abs(self.g),
                               self.states.cell_width)

    def observation_matrix(self, mu):
        H = self.observation_mean(mu)
        return _gaussian_cells(H, self.observations.coords, np.ones_like(H),
                               self.observations.cell_width)

    def cost_matrix(self, mu):
        return self.d @ np.asarray(mu, dtype=float)


def build_gaussian(f, g, h, d, states: Grid, observations: Grid, actions: Grid,
                   discount, initial, observation_mean_field_free: bool = True,
                   L: Optional[float] = None) -> GaussianAdditiveModel:
    return GaussianAdditiveModel(f, g, h, d, states, observations, actions, discount,
                                 initial, observation_mean_field_free, L)


def simplex_samples(size: int) -> list[np.ndarray]:
    """Vertices and centroid of the probability simplex."""
    pts = [dirac(i, size) for i in range(size)]
    pts.append(np.full(size, 1.0 / size))
    return pts


def validate(model: GameModel) -> list[str]:
    """Report violated invariants; an empty list means the model is valid."""
    if isinstance(model, TabularAffineModel):
        return model.violations()
    out = []
    X, A = model.n_states, model.n_actions
    for k, mu in enumerate(simplex_samples(X)):
        P = model.transition_tensor(mu)
        R = model.observation_matrix(mu)
        C = model.cost_matrix(mu)
        for x in range(X):
            for a in range(A):
                row = P[x, a]
                if np.any(row < 0) or abs(row.sum() - 1.0) > STOCHASTIC_TOL:
                    out.append(f"transition row (x={x}, a={a}) at sample {k} sums to {row.sum():.12g}")
            if np.any(R[x] < 0) or abs(R[x].sum() - 1.0) > STOCHASTIC_TOL:
                out.append(f"observation row (x={x}) at sample {k} sums to {R[x].sum():.12g}")
        if np.any(C < 0) or np.any(C > model.cost_bound + 1e-12):
            out.append(f"cost outside [0, {model.cost_bound:.12g}] at sample {k}")
    return out
