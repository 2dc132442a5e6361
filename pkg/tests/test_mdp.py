import numpy as np
import pytest

from sharelora.errors import InvalidInputError, TooLargeError, UnsupportedConfigurationError
from sharelora.mdp import (
    TabularMdp,
    best_response_dp,
    check_policy,
    enumerate_policies,
    enumerate_trajectories,
    expected_features,
    feature_inner,
    make_random_mdp,
    occupancy,
    policy_from_occupancy,
    policy_value,
    policy_value_estimate,
    sample_trajectories,
    trajectory_features,
    uniform_policy,
)
from sharelora.reward import LINEAR, RewardHead
from sharelora.rng import stream


def chain_mdp(horizon=2, n_states=2, n_actions=2, dims=(2, 2), seed=0):
    """Action a moves deterministically to state a; start in state 0."""
    rng = np.random.default_rng(seed)
    initial = np.eye(n_states)[0]
    trans = np.zeros((horizon, n_states, n_actions, n_states))
    for a in range(n_actions):
        trans[:, :, a, a % n_states] = 1.0
    feats = rng.standard_normal((horizon, n_states, n_actions) + dims)
    return TabularMdp(initial, trans, feats)


def deterministic_policy(mdp, action):
    pol = np.zeros((mdp.horizon, mdp.n_states, mdp.n_actions))
    pol[..., action] = 1.0
    return pol


def test_trivial_mdp():
    mdp = make_random_mdp(1, 1, 1, 1.0, stream(0, "t"))
    np.testing.assert_array_equal(mdp.transitions[0, 0, 0], [1.0])
    assert mdp.feature_bound == pytest.approx(1.0)


def test_make_random_mdp_determinism_and_scale():
    a = make_random_mdp(3, 2, 2, 1.0, stream(7, "mdp"))
    b = make_random_mdp(3, 2, 2, 1.0, stream(7, "mdp"))
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.transitions, b.transitions)
    norms = np.linalg.norm(a.features, axis=(3, 4))
    assert abs(norms.max() - 1.0) <= 1e-8


def test_mdp_validation():
    mdp = chain_mdp()
    bad = mdp.transitions.copy()
    bad[0, 0, 0] = [0.7, 0.7]
    with pytest.raises(InvalidInputError):
        TabularMdp(mdp.initial, bad, mdp.features)
    with pytest.raises(InvalidInputError):
        TabularMdp(mdp.initial, mdp.transitions, mdp.features[..., 0])
    with pytest.raises(InvalidInputError):
        make_random_mdp(0, 1, 1, 1.0, stream(0, "t"))


def test_mdp_dict_round_trip():
    mdp = make_random_mdp(3, 2, 2, 1.0, stream(1, "mdp"))
    back = TabularMdp.from_dict(mdp.to_dict())
    np.testing.assert_array_equal(back.features, mdp.features)


def test_trajectory_features():
    mdp = chain_mdp(horizon=1)
    np.testing.assert_array_equal(trajectory_features(mdp, [(0, 1)]), mdp.features[0, 0, 1])
    mdp = chain_mdp(horizon=2)
    expect = mdp.features[0, 0, 1] + mdp.features[1, 1, 0]
    np.testing.assert_allclose(trajectory_features(mdp, [(0, 1), (1, 0)]), expect)
    zero = TabularMdp(mdp.initial, mdp.transitions, np.zeros_like(mdp.features))
    np.testing.assert_array_equal(trajectory_features(zero, [(0, 1), (1, 0)]), 0)
    with pytest.raises(InvalidInputError):
        trajectory_features(mdp, [(0, 2), (1, 0)])
    with pytest.raises(InvalidInputError):
        trajectory_features(mdp, [(0, 1)])


def test_trajectory_feature_bound():
    mdp = make_random_mdp(3, 2, 3, 0.5, stream(2, "mdp"))
    s, a = sample_trajectories(mdp, uniform_policy(mdp), 200, stream(2, "s"))
    for i in range(200):
        f = trajectory_features(mdp, list(zip(s[i], a[i])))
        assert np.linalg.norm(f) <= mdp.horizon * mdp.feature_bound + 1e-12


def test_occupancy_examples():
    mdp = chain_mdp(horizon=1, n_states=1)
    np.testing.assert_allclose(occupancy(mdp, uniform_policy(mdp))[0, 0], [0.5, 0.5])
    mdp = chain_mdp(horizon=3)
    d = occupancy(mdp, deterministic_policy(mdp, 1))
    np.testing.assert_array_equal(d[0], [[0, 1], [0, 0]])
    np.testing.assert_array_equal(d[1], [[0, 0], [0, 1]])


def test_occupancy_conservation():
    rng = stream(3, "pol")
    mdp = make_random_mdp(4, 3, 4, 1.0, stream(3, "mdp"))
    pol = rng.dirichlet(np.ones(3), size=(4, 4))
    d = occupancy(mdp, pol)
    np.testing.assert_allclose(d.sum(axis=(1, 2)), 1.0, atol=1e-10)
    for h in range(3):
        inflow = np.einsum("sa,sat->t", d[h], mdp.transitions[h])
        np.testing.assert_allclose(d[h + 1].sum(axis=1), inflow, atol=1e-10)


def test_occupancy_matches_monte_carlo():
    mdp = make_random_mdp(3, 2, 3, 1.0, stream(4, "mdp"))
    pol = stream(4, "pol").dirichlet(np.ones(2), size=(3, 3))
    n = 100_000
    s, a = sample_trajectories(mdp, pol, n, stream(4, "mc"))
    d = occupancy(mdp, pol)
    for h in range(3):
        freq = np.zeros((3, 2))
        np.add.at(freq, (s[:, h], a[:, h]), 1.0)
        freq /= n
        sigma = np.sqrt(d[h] * (1 - d[h]) / n)
        assert np.all(np.abs(freq - d[h]) <= 3 * sigma + 1e-12)


def test_expected_features_examples():
    mdp = chain_mdp(horizon=2)
    zero = TabularMdp(mdp.initial, mdp.transitions, np.zeros_like(mdp.features))
    np.testing.assert_array_equal(expected_features(zero, occupancy(zero, uniform_policy(zero))), 0)
    pol = deterministic_policy(mdp, 1)
    np.testing.assert_allclose(expected_features(mdp, occupancy(mdp, pol)),
                               trajectory_features(mdp, [(0, 1), (1, 1)]))


def test_expected_features_match_enumeration():
    mdp = make_random_mdp(3, 2, 2, 1.0, stream(5, "mdp"))
    pol = stream(5, "pol").dirichlet(np.ones(2), size=(2, 3))
    s, a, p = enumerate_trajectories(mdp, pol)
    assert p.sum() == pytest.approx(1.0)
    feats = mdp.features[np.arange(2), s, a].sum(axis=1)
    np.testing.assert_allclose(np.einsum("n,nij->ij", p, feats),
                               expected_features(mdp, occupancy(mdp, pol)), atol=1e-12)


def test_policy_value_examples():
    mdp = make_random_mdp(3, 2, 2, 1.0, stream(6, "mdp"))
    pol = uniform_policy(mdp)
    assert policy_value(mdp, pol, np.zeros((2, 2)), LINEAR) == 0.0
    assert policy_value(mdp, pol, np.zeros((2, 2)), RewardHead("tanh", 2.0)) == 0.0
    theta = stream(6, "theta").standard_normal((2, 2))
    s, a, p = enumerate_trajectories(mdp, pol)
    r = feature_inner(mdp, theta)[np.arange(2), s, a].sum(axis=1)
    assert abs(policy_value(mdp, pol, theta, LINEAR) - p @ r) <= 1e-10

    chain = chain_mdp(horizon=2)
    det = deterministic_policy(chain, 0)
    f = trajectory_features(chain, [(0, 0), (0, 0)])
    assert policy_value(chain, det, theta, LINEAR) == pytest.approx(np.sum(theta * f))


def test_policy_value_linear_in_theta():
    mdp = make_random_mdp(3, 2, 2, 1.0, stream(7, "mdp"))
    rng = stream(7, "theta")
    t1, t2 = rng.standard_normal((2, 2, 2))
    pol = uniform_policy(mdp)
    lhs = policy_value(mdp, pol, 2.0 * t1 - 0.5 * t2, LINEAR)
    rhs = 2.0 * policy_value(mdp, pol, t1, LINEAR) - 0.5 * policy_value(mdp, pol, t2, LINEAR)
    assert abs(lhs - rhs) <= 1e-9


def test_policy_value_nonlinear_beyond_cap():
    mdp = make_random_mdp(3, 2, 3, 1.0, stream(8, "mdp"))
    theta = np.ones((2, 2))
    head = RewardHead("tanh", 1.0)
    pol = uniform_policy(mdp)
    with pytest.raises(UnsupportedConfigurationError):
        policy_value_estimate(mdp, pol, theta, head, cap=10)
    exact, _ = policy_value_estimate(mdp, pol, theta, head)
    est, se = policy_value_estimate(mdp, pol, theta, head, cap=10, n_samples=20_000,
                                    rng=stream(8, "mc"))
    assert se > 0
    assert abs(est - exact) <= 4 * se


def test_best_response_examples():
    mdp = make_random_mdp(3, 2, 1, 1.0, stream(9, "mdp"))
    _, value = best_response_dp(mdp, np.zeros((1, 3, 2)))
    assert value == 0.0
    table = stream(9, "r").standard_normal((1, 3, 2))
    pol, _ = best_response_dp(mdp, table)
    np.testing.assert_array_equal(pol[0].argmax(axis=1), table[0].argmax(axis=1))


def test_best_response_beats_enumeration():
    mdp = make_random_mdp(3, 2, 2, 1.0, stream(10, "mdp"))
    table = stream(10, "r").standard_normal((2, 3, 2))
    _, value = best_response_dp(mdp, table)
    values = [np.sum(occupancy(mdp, p) * table) for p in enumerate_policies(mdp)]
    assert value == pytest.approx(max(values), abs=1e-12)


def test_enumerate_policies():
    assert len(enumerate_policies(chain_mdp(horizon=1, n_states=1))) == 2
    mdp = make_random_mdp(3, 2, 2, 1.0, stream(11, "mdp"))
    pols = enumerate_policies(mdp)
    assert len(pols) == 64
    for p in pols:
        check_policy(mdp, p)
    assert len({p.tobytes() for p in pols}) == 64
    with pytest.raises(TooLargeError):
        enumerate_policies(mdp, cap=63)


def test_policy_from_occupancy_round_trip():
    mdp = make_random_mdp(3, 2, 2, 1.0, stream(12, "mdp"))
    pol = stream(12, "pol").dirichlet(np.ones(2), size=(2, 3))
    np.testing.assert_allclose(policy_from_occupancy(mdp, occupancy(mdp, pol)), pol, atol=1e-12)


def test_policy_from_occupancy_unvisited_uniform():
    mdp = chain_mdp(horizon=2)
    pol = policy_from_occupancy(mdp, occupancy(mdp, deterministic_policy(mdp, 0)))
    np.testing.assert_allclose(pol[0, 1], [0.5, 0.5])
