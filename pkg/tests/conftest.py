import numpy as np
import pytest

from pomfg.config import load_bundled
from pomfg.model import build_tabular


def random_model(rng, X=2, Y=2, A=2, discount=0.9, coupled=True):
    K = rng.dirichlet(np.ones(X), size=(X, A, X))
    if not coupled:
        K = np.repeat(K[:, :, :1, :], X, axis=2)
    d = rng.random((X, A, X))
    if not coupled:
        d = np.repeat(d[:, :, :1], X, axis=2)
    r = rng.dirichlet(np.ones(Y), size=X)
    return build_tabular(K, d, r, discount, rng.dirichlet(np.ones(X)))


def random_flow(rng, model, horizon):
    m = rng.dirichlet(np.ones(model.n_states), size=horizon + 2)
    m[0] = model.initial
    return m


def mu_free_model(P, r, c, discount=0.9, initial=None):
    """Tabular model whose kernels ignore the mean field: P (X,A,X), r (X,Y), c (X,A)."""
    P, c = np.asarray(P, float), np.asarray(c, float)
    X = P.shape[0]
    K = np.repeat(P[:, :, None, :], X, axis=2)
    d = np.repeat(c[:, :, None], X, axis=2)
    init = np.full(X, 1.0 / X) if initial is None else initial
    return build_tabular(K, d, r, discount, init)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def bundled():
    return {name: load_bundled(name) for name in ("decoupled", "coupled_toy", "cost_one", "gaussian")}
