import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from pomfg.model import (Grid, ModelValidationError, build_gaussian, build_tabular, dirac,
                         simplex_samples, validate)

from conftest import random_model


def two_state_K():
    K = np.zeros((2, 1, 2, 2))
    K[0, 0, 0] = [0.9, 0.1]
    K[0, 0, 1] = [0.3, 0.7]
    K[1, 0, 0] = [0.5, 0.5]
    K[1, 0, 1] = [0.2, 0.8]
    return K


def test_dirac_coupling_returns_slice():
    K = two_state_K()
    m = build_tabular(K, np.ones((2, 1, 2)), np.eye(2), 0.9, [0.5, 0.5])
    for xb in range(2):
        np.testing.assert_array_equal(m.transition(0, 0, dirac(xb, 2)), K[0, 0, xb])


def test_decoupled_kernel_ignores_measure(rng):
    m = random_model(rng, X=3, coupled=False)
    P1 = m.transition_tensor([1, 0, 0])
    P2 = m.transition_tensor([0.2, 0.3, 0.5])
    np.testing.assert_allclose(P1, P2, atol=1e-15)


def test_uniform_measure_averages_slices():
    K = two_state_K()
    m = build_tabular(K, np.ones((2, 1, 2)), np.eye(2), 0.9, [0.5, 0.5])
    np.testing.assert_allclose(m.transition(1, 0, [0.5, 0.5]), K[1, 0].mean(axis=0), atol=1e-15)


def test_cost_bound_and_moment_mass():
    d = np.array([[[0.1, 2.5]], [[0.0, 1.0]]])
    m = build_tabular(two_state_K(), d, np.eye(2), 0.8, [0.25, 0.75], moment_weights=[1.0, 3.0])
    assert m.cost_bound == 2.5
    assert m.moment_M == 0.25 * 1.0 + 0.75 * 3.0
    assert m.value_bound == pytest.approx(2.5 / 0.2)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), lam=st.sampled_from([0.0, 0.25, 0.5, 1.0]))
def test_affine_coupling_is_linear_in_measure(seed, lam):
    rng = np.random.default_rng(seed)
    m = random_model(rng, X=3, Y=2, A=2)
    mu, nu = rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(3))
    mix = lam * mu + (1 - lam) * nu
    lhs = m.transition_tensor(mix)
    rhs = lam * m.transition_tensor(mu) + (1 - lam) * m.transition_tensor(nu)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_kernels_stochastic_on_simplex_mesh(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng, X=3, Y=2, A=2)
    for mu in simplex_samples(3) + [rng.dirichlet(np.ones(3)) for _ in range(5)]:
        P, R = m.transition_tensor(mu), m.observation_matrix(mu)
        assert np.all(P >= 0) and np.all(R >= 0)
        np.testing.assert_allclose(P.sum(axis=-1), 1.0, atol=1e-12)
        np.testing.assert_allclose(R.sum(axis=-1), 1.0, atol=1e-12)


def test_validate_valid_model_is_empty(rng):
    assert validate(random_model(rng)) == []


def test_validate_names_bad_row():
    K = two_state_K()
    K[1, 0, 0] = [0.5, 0.4]
    m = build_tabular(K, np.ones((2, 1, 2)), np.eye(2), 0.9, [0.5, 0.5], check=False)
    problems = validate(m)
    assert len(problems) == 1
    assert "x=1, a=0, xbar=0" in problems[0]
    with pytest.raises(ModelValidationError, match="x=1, a=0, xbar=0"):
        build_tabular(K, np.ones((2, 1, 2)), np.eye(2), 0.9, [0.5, 0.5])


def test_validate_negative_cost():
    d = np.ones((2, 1, 2))
    d[0, 0, 1] = -0.5
    m = build_tabular(two_state_K(), d, np.eye(2), 0.9, [0.5, 0.5], check=False)
    problems = validate(m)
    assert len(problems) == 1 and "negative" in problems[0]


def gaussian_model(X=7, lo=-3.0, hi=3.0, Y=3, f=None, g=1.0, h=None, **kw):
    S = Grid.uniform(lo, hi, X)
    O = Grid.uniform(-2.0, 2.0, Y)
    A = Grid.from_values([-1.0, 1.0])
    xi = S.coords
    f = np.zeros((X, 2, X)) if f is None else f
    h = xi if h is None else h
    d = np.ones((X, 2, X))
    return build_gaussian(f, np.full((X, 2), g), h, d, S, O, A, 0.9, np.full(X, 1.0 / X), **kw)


def test_gaussian_no_drift_unit_noise_is_shared_normal():
    m = gaussian_model()
    P = m.transition_tensor(np.full(7, 1 / 7))
    expected = stats.norm.pdf(m.states.coords)
    expected /= expected.sum()
    for x in range(7):
        for a in range(2):
            np.testing.assert_allclose(P[x, a], expected, atol=1e-15)
    np.testing.assert_allclose(m.transition_tensor(dirac(0, 7)), P, atol=1e-15)


def test_gaussian_tight_observation_concentrates():
    S = Grid.uniform(-30.0, 30.0, 5)
    m = build_gaussian(np.zeros((5, 1, 5)), np.ones((5, 1)), S.coords, np.zeros((5, 1, 5)),
                       S, S, Grid.from_values([0.0]), 0.9, np.full(5, 0.2))
    R = m.observation_matrix(np.full(5, 0.2))
    assert np.all(np.argmax(R, axis=1) == np.arange(5))
    assert np.all(np.diag(R) > 1 - 1e-12)


def test_gaussian_drift_matches_quadrature():
    # 5-point grid on [-2, 2], f = 0.5 * mean, g = 1
    S = Grid.uniform(-2.0, 2.0, 5)
    xi = S.coords
    f = np.broadcast_to(0.5 * xi[None, None, :], (5, 1, 5)).copy()
    m = build_gaussian(f, np.ones((5, 1)), xi, np.zeros((5, 1, 5)), S, S, Grid.from_values([0.0]),
                       0.9, np.full(5, 0.2))
    mu = np.array([0.1, 0.2, 0.3, 0.25, 0.15])
    F = 0.5 * float(mu @ xi)
    np.testing.assert_allclose(m.drift(mu), F, atol=1e-15)
    # before truncation to the grid, the midpoint masses have mean F on the full lattice
    lattice = np.arange(-40, 41, dtype=float)
    exact, _ = integrate.quad(lambda s: s * stats.norm.pdf(s, F, 1.0), -50, 50)
    assert exact == pytest.approx(F, abs=1e-10)
    assert float(lattice @ stats.norm.pdf(lattice, F, 1.0)) == pytest.approx(exact, abs=1e-7)
    # on the grid, each renormalized cell is within the midpoint-rule error of the exact cell mass
    cells = np.array([integrate.quad(lambda s: stats.norm.pdf(s, F, 1.0), c - 0.5, c + 0.5)[0] for c in xi])
    cells /= cells.sum()
    P = m.transition_tensor(mu)[0, 0]
    midpoint_bound = 1.0 ** 3 / 24 * stats.norm.pdf(0.0)
    assert np.max(np.abs(P - cells)) <= 1.2 * midpoint_bound
    assert abs(P @ xi - cells @ xi) < 5e-3


def test_gaussian_requires_positive_noise():
    with pytest.raises(ModelValidationError, match="positive"):
        gaussian_model(g=0.0)


def test_gaussian_requires_coordinates():
    with pytest.raises(ModelValidationError, match="coordinates"):
        build_gaussian(np.zeros((2, 1, 2)), np.ones((2, 1)), np.zeros(2), np.zeros((2, 1, 2)),
                       Grid(2), Grid.uniform(0, 1, 2), Grid.from_values([0.0]), 0.9, [0.5, 0.5])


def test_gaussian_moment_weights_and_alpha():
    S = Grid.uniform(-3.0, 3.0, 7)
    xi = S.coords
    f = 0.5 * xi[:, None, None] + 0.25 * xi[None, None, :] + np.zeros((7, 2, 7))
    m = gaussian_model(f=f)
    np.testing.assert_allclose(m.moment_weights, 1 + xi ** 2)
    fsup = np.abs(f).max()
    assert m.moment_alpha == pytest.approx(1 + fsup ** 2 + 1.0)   # attained at x = 0
    m2 = gaussian_model(f=f, L=100.0)
    assert m2.moment_alpha == 100.0


def test_gaussian_on_grid_moment_bound(bundled):
    m = bundled["gaussian"].model
    w = m.moment_weights
    for mu in simplex_samples(m.n_states):
        P = m.transition_tensor(mu)
        lhs = P @ w
        assert np.all(lhs <= 1.05 * m.moment_alpha * w[:, None])


def test_gaussian_mean_field_observation_mode():
    S = Grid.uniform(-1, 1, 3)
    h = S.coords[:, None] + 0.5 * S.coords[None, :]
    with pytest.raises(ModelValidationError, match="second argument"):
        gaussian_model(X=3, lo=-1, hi=1, h=h)
    m = gaussian_model(X=3, lo=-1, hi=1, h=h, observation_mean_field_free=False)
    assert not np.allclose(m.observation_matrix(dirac(0, 3)), m.observation_matrix(dirac(2, 3)))


def test_grid_rejects_unsorted_coordinates():
    with pytest.raises(ModelValidationError):
        Grid(3, [0.0, 2.0, 1.0])
    with pytest.raises(ModelValidationError):
        Grid(0)
