import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pomfg import oracles
from pomfg.filtering import (Belief, ZeroProbabilityBranch, bayes_update, belief_cost, belief_kernel,
                             expand_beliefs, observation_predictive, predict)

from conftest import mu_free_model, random_flow, random_model

P2 = np.array([[0.9, 0.1], [0.2, 0.8]])
R2 = np.array([[0.7, 0.3], [0.4, 0.6]])
MU = np.array([0.5, 0.5])


def hand_model(r=R2, P=P2):
    return mu_free_model(P[:, None, :], r, np.array([[4.0], [8.0]]))


def test_predict_identity_kernel_keeps_belief():
    m = mu_free_model(np.eye(3)[:, None, :], np.full((3, 2), 0.5), np.ones((3, 1)))
    z = Belief(2, [0.2, 0.5, 0.3])
    zh = predict(m, z, 0, np.full(3, 1 / 3))
    assert zh.time == 3
    np.testing.assert_allclose(zh.weights, z.weights, atol=1e-15)


def test_predict_hand_example():
    zh = predict(hand_model(), Belief(0, [0.5, 0.5]), 0, MU)
    np.testing.assert_allclose(zh.weights, [0.55, 0.45], atol=1e-15)


def test_predict_dirac():
    zh = predict(hand_model(), Belief(0, [0.0, 1.0]), 0, MU)
    np.testing.assert_allclose(zh.weights, P2[1], atol=1e-15)


def test_predictive_uninformative_sensor_is_uniform():
    m = hand_model(r=np.full((2, 3), 1 / 3))
    np.testing.assert_allclose(observation_predictive(m, Belief(0, [0.3, 0.7]), 0, MU, MU), 1 / 3)


def test_predictive_perfect_sensor_is_prediction():
    m = hand_model(r=np.eye(2))
    np.testing.assert_allclose(observation_predictive(m, Belief(0, [0.5, 0.5]), 0, MU, MU), [0.55, 0.45])


def test_predictive_hand_example():
    H = observation_predictive(hand_model(), Belief(0, [0.5, 0.5]), 0, MU, MU)
    np.testing.assert_allclose(H, [0.565, 0.435], atol=1e-15)


def test_bayes_uninformative_returns_prediction():
    m = hand_model(r=np.full((2, 2), 0.5))
    for y in range(2):
        np.testing.assert_allclose(bayes_update(m, Belief(0, [0.5, 0.5]), 0, y, MU, MU).weights,
                                   [0.55, 0.45], atol=1e-15)


def test_bayes_perfect_sensor_gives_dirac():
    m = hand_model(r=np.eye(2))
    for y in range(2):
        np.testing.assert_allclose(bayes_update(m, Belief(0, [0.5, 0.5]), 0, y, MU, MU).weights, np.eye(2)[y])


def test_bayes_hand_example():
    F = bayes_update(hand_model(), Belief(0, [0.5, 0.5]), 0, 0, MU, MU)
    np.testing.assert_allclose(F.weights, [0.385 / 0.565, 0.18 / 0.565], atol=1e-15)
    np.testing.assert_allclose(F.weights, [0.681416, 0.318584], atol=1e-6)
    assert F.time == 1


def test_bayes_refuses_impossible_observation():
    m = mu_free_model(np.eye(2)[:, None, :], np.eye(2), np.ones((2, 1)))
    with pytest.raises(ZeroProbabilityBranch):
        bayes_update(m, Belief(0, [1.0, 0.0]), 0, 1, MU, MU)


def test_kernel_single_observation():
    m = hand_model(r=np.ones((2, 1)))
    tr = belief_kernel(m, Belief(0, [0.5, 0.5]), 0, MU, MU)
    assert len(tr.children) == 1
    y, H, child = tr.children[0]
    assert y == 0 and H == pytest.approx(1.0)
    np.testing.assert_allclose(child.weights, [0.55, 0.45])


def test_kernel_perfect_sensor():
    tr = belief_kernel(hand_model(r=np.eye(2)), Belief(0, [0.5, 0.5]), 0, MU, MU)
    assert [(y, round(H, 12)) for y, H, _ in tr.children] == [(0, 0.55), (1, 0.45)]
    np.testing.assert_allclose(tr.children[0][2].weights, [1, 0])
    np.testing.assert_allclose(tr.children[1][2].weights, [0, 1])


def test_kernel_hand_example_matches_enumeration():
    m = hand_model()
    tr = belief_kernel(m, Belief(0, [0.5, 0.5]), 0, MU, MU)
    np.testing.assert_allclose([H for _, H, _ in tr.children], [0.565, 0.435], atol=1e-15)
    flow = np.tile(MU, (3, 1))
    m0 = mu_free_model(P2[:, None, :], R2, np.ones((2, 1)), initial=np.array([0.5, 0.5]))
    for y, _, child in tr.children:
        np.testing.assert_allclose(child.weights, oracles.filter_by_enumeration(m0, flow, [0], [y]),
                                   atol=1e-15)


def test_kernel_prunes_and_records_mass():
    m = mu_free_model(np.eye(2)[:, None, :], np.eye(2), np.ones((2, 1)))
    tr = belief_kernel(m, Belief(0, [1.0, 0.0]), 0, MU, MU)
    assert len(tr.children) == 1 and tr.pruned == [1]
    assert tr.pruned_mass <= 2 * 1e-12


def test_belief_cost_examples():
    m = hand_model()
    assert belief_cost(m, Belief(0, [0.25, 0.75]), 0, MU) == pytest.approx(7.0)
    assert belief_cost(m, Belief(0, [1.0, 0.0]), 0, MU) == 4.0
    ones = mu_free_model(P2[:, None, :], R2, np.ones((2, 1)))
    assert belief_cost(ones, Belief(3, [0.3, 0.7]), 0, MU) == pytest.approx(1.0)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_total_probability_identity(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng, X=3, Y=3, A=2)
    flow = random_flow(rng, m, 1)
    z = Belief(0, rng.dirichlet(np.ones(3)))
    a = int(rng.integers(2))
    tr = belief_kernel(m, z, a, flow[0], flow[1])
    total = sum(H * child.weights for _, H, child in tr.children)
    np.testing.assert_allclose(total, predict(m, z, a, flow[0]).weights, atol=1e-10)
    assert sum(H for _, H, _ in tr.children) + tr.pruned_mass == pytest.approx(1.0, abs=1e-10)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 100_000), length=st.integers(1, 5))
def test_filter_matches_enumeration(seed, length):
    rng = np.random.default_rng(seed)
    X, Y, A = int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(1, 3))
    m = random_model(rng, X=X, Y=Y, A=A)
    flow = random_flow(rng, m, length)
    acts = rng.integers(A, size=length)
    obs = rng.integers(Y, size=length)
    z = Belief(0, m.initial)
    for t in range(length):
        z = bayes_update(m, z, int(acts[t]), int(obs[t]), flow[t], flow[t + 1])
    np.testing.assert_allclose(z.weights, oracles.filter_by_enumeration(m, flow, acts, obs), atol=1e-10)


def test_beliefs_stay_in_simplex_after_many_updates(rng):
    m = random_model(rng, X=3, Y=2, A=2)
    z = Belief(0, m.initial)
    for t in range(500):
        mu = rng.dirichlet(np.ones(3))
        z = bayes_update(m, z, int(rng.integers(2)), int(rng.integers(2)), mu, mu)
        assert np.all(z.weights >= 0) and abs(z.weights.sum() - 1) <= 1e-12


def test_expand_beliefs_matches_scalar_kernel(rng):
    m = random_model(rng, X=3, Y=2, A=2)
    flow = random_flow(rng, m, 1)
    Z = rng.dirichlet(np.ones(3), size=4)
    H, post = expand_beliefs(Z, m.transition_tensor(flow[0]), m.observation_matrix(flow[1]))
    for i in range(4):
        for a in range(2):
            for y, h, child in belief_kernel(m, Belief(0, Z[i]), a, flow[0], flow[1]).children:
                assert H[i, a, y] == pytest.approx(h, abs=1e-15)
                np.testing.assert_allclose(post[i, a, y], child.weights, atol=1e-15)


def test_belief_rejects_non_probability():
    with pytest.raises(ValueError):
        Belief(0, [0.5, 0.6])
