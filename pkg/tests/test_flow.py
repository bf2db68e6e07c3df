import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pomfg import oracles
from pomfg.flow import (MeasureFlow, barycenter, induced_flow, moment_check, push_forward,
                        read_flow_csv, recursive_from_initial, state_action_flow, write_flow_csv)
from pomfg.model import ModelValidationError
from pomfg.solver import propagate, solve_pomdp

from conftest import random_flow, random_model


def test_measure_flow_validation(rng):
    with pytest.raises(ValueError):
        MeasureFlow(np.array([[0.5, 0.5]]))
    with pytest.raises(ValueError):
        MeasureFlow(np.array([[0.5, 0.6], [0.5, 0.5]]))
    f = MeasureFlow(np.array([[0.5, 0.5], [0.2, 0.8]]))
    assert f.horizon == 0 and len(f) == 2
    with pytest.raises(ValueError):
        f.measures[0, 0] = 1.0


def test_for_model_checks_initial(rng):
    m = random_model(rng)
    with pytest.raises(ValueError, match="initial"):
        MeasureFlow.for_model(m, np.tile([0.999, 0.001], (3, 1)))
    with pytest.raises(ValueError, match="states"):
        MeasureFlow.for_model(m, np.full((3, 3), 1 / 3))


def test_recursive_from_initial_rows(bundled):
    for L in bundled.values():
        f = recursive_from_initial(L.model, 4)
        assert f.measures.shape == (6, L.model.n_states)
        np.testing.assert_allclose(f.measures.sum(axis=1), 1.0, atol=1e-14)
        np.testing.assert_array_equal(f[0], L.model.initial)


@pytest.mark.parametrize("seed", range(4))
def test_induced_flow_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng, coupled=True)
    T = 3
    _, policy = solve_pomdp(m, random_flow(rng, m, T), T)
    expected = oracles.induced_flow_by_enumeration(m, T, oracles.history_row(policy, m.n_obs))
    np.testing.assert_allclose(induced_flow(m, policy).measures, expected, atol=1e-12)


def test_induced_flow_mu_free_observation(bundled):
    m = bundled["decoupled"].model
    T = 3
    _, policy = solve_pomdp(m, recursive_from_initial(m, T), T)
    expected = oracles.induced_flow_by_enumeration(m, T, oracles.history_row(policy, m.n_obs))
    np.testing.assert_allclose(induced_flow(m, policy).measures, expected, atol=1e-12)


def test_induced_flow_rejects_other_filter_flow(rng):
    m = random_model(rng)
    flow = random_flow(rng, m, 2)
    _, policy = solve_pomdp(m, flow, 2)
    with pytest.raises(ValueError):
        induced_flow(m, policy, filter_flow=random_flow(rng, m, 2))
    induced_flow(m, policy, filter_flow=flow)


def test_barycenter_is_tree_flow_marginal(rng):
    m = random_model(rng, X=3)
    T = 3
    _, policy = solve_pomdp(m, random_flow(rng, m, T), T)
    sa = state_action_flow(policy)
    prop = propagate(policy, m)
    for t in range(T + 1):
        np.testing.assert_allclose(sa.mean_field(t), prop.marginals[t], atol=1e-12)
        np.testing.assert_allclose(sa.weights[t].sum(), 1.0, atol=1e-12)
    for t in range(T):
        np.testing.assert_allclose(push_forward(m, sa, t, policy.tree.flow[t]),
                                   prop.marginals[t + 1], atol=1e-12)


def test_barycenter_basics():
    Z = np.array([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_allclose(barycenter([1, 3], Z), [0.25, 0.75])
    with pytest.raises(ValueError):
        barycenter([0, 0], Z)


def test_flow_csv_roundtrip(tmp_path, bundled):
    m = bundled["coupled_toy"].model
    f = recursive_from_initial(m, 3)
    path = tmp_path / "flow.csv"
    write_flow_csv(f, path)
    g = read_flow_csv(path, m)
    np.testing.assert_allclose(g.measures, f.measures, atol=1e-11)


def test_flow_csv_errors(tmp_path, bundled):
    m = bundled["coupled_toy"].model
    p = tmp_path / "bad.csv"
    p.write_text("t,state\n0,0\n")
    with pytest.raises(ModelValidationError, match="columns"):
        read_flow_csv(p, m)
    p.write_text("t,state,weight\n0,0,abc\n")
    with pytest.raises(ModelValidationError, match=":2:"):
        read_flow_csv(p, m)


def test_moment_check_gaussian(bundled):
    m = bundled["gaussian"].model
    T = 3
    _, policy = solve_pomdp(m, recursive_from_initial(m, T), T)
    rep = moment_check(m, state_action_flow(policy))
    assert rep.ok, rep.violations
    assert np.all(rep.w_mass <= rep.slack_bound)
    assert np.all(rep.node_ratio[:T] <= 1.05)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_induced_flow_is_a_flow(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng, X=3, coupled=True)
    _, policy = solve_pomdp(m, random_flow(rng, m, 2), 2)
    lam = induced_flow(m, policy).measures
    assert np.all(lam >= 0)
    np.testing.assert_allclose(lam.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(lam[0], m.initial)
