"""Finite-horizon tabular MDPs with matrix-valued per-step features.

Shapes used throughout (H = horizon, S = states, A = actions):

* transitions ``(H, S, A, S)``; the last step's kernel is never used
* features ``(H, S, A, d1, d2)``
* Markov policies and occupancy measures ``(H, S, A)``

A trajectory is a sequence of ``(state, action)`` pairs of length H. Bulk
operations work on integer arrays ``states`` and ``actions`` of shape
``(n, H)`` instead.
"""

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, TooLargeError, UnsupportedConfigurationError

PROB_TOL = 1e-12
POLICY_CAP = 4096
TRAJECTORY_CAP = 1_000_000


@dataclass(frozen=True)
class TabularMdp:
    initial: np.ndarray
    transitions: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        if self.features.ndim != 5:
            raise InvalidInputError("features must have shape (H, S, A, d1, d2)")
        h, s, a = self.features.shape[:3]
        if self.initial.shape != (s,) or self.transitions.shape != (h, s, a, s):
            raise InvalidInputError("initial/transitions shapes do not match features")
        if np.any(self.initial < 0) or abs(self.initial.sum() - 1.0) > PROB_TOL:
            raise InvalidInputError("initial distribution is not a probability vector")
        if np.any(self.transitions < 0) or np.max(np.abs(self.transitions.sum(-1) - 1.0)) > PROB_TOL:
            raise InvalidInputError("transition rows must be probability vectors")
        if not np.all(np.isfinite(self.features)):
            raise InvalidInputError("features must be finite")

    @property
    def horizon(self):
        return self.features.shape[0]

    @property
    def n_states(self):
        return self.features.shape[1]

    @property
    def n_actions(self):
        return self.features.shape[2]

    @property
    def dims(self):
        return self.features.shape[3:]

    @property
    def feature_bound(self):
        return float(np.max(np.linalg.norm(self.features, axis=(3, 4))))

    def to_dict(self):
        return {
            "initial": self.initial.tolist(),
            "transitions": self.transitions.tolist(),
            "features": self.features.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            np.asarray(d["initial"], dtype=float),
            np.asarray(d["transitions"], dtype=float),
            np.asarray(d["features"], dtype=float),
        )


def make_random_mdp(n_states, n_actions, horizon, feature_scale, rng, dims=(2, 2)):
    """Random MDP with Dirichlet(1) transitions and Gaussian features.

    Features are rescaled so that the largest per-step Frobenius norm equals
    ``feature_scale``.
    """
    if min(n_states, n_actions, horizon) < 1:
        raise InvalidInputError("n_states, n_actions and horizon must be >= 1")
    d1, d2 = dims
    initial = rng.dirichlet(np.ones(n_states))
    transitions = rng.dirichlet(np.ones(n_states), size=(horizon, n_states, n_actions))
    features = rng.standard_normal((horizon, n_states, n_actions, d1, d2))
    bound = np.max(np.linalg.norm(features, axis=(3, 4)))
    features *= feature_scale / bound
    return TabularMdp(initial, transitions, features)


def uniform_policy(mdp):
    return np.full((mdp.horizon, mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)


def check_policy(mdp, policy):
    policy = np.asarray(policy, dtype=float)
    if policy.shape != (mdp.horizon, mdp.n_states, mdp.n_actions):
        raise InvalidInputError(f"policy shape {policy.shape} does not match the MDP")
    if np.any(policy < 0) or np.max(np.abs(policy.sum(-1) - 1.0)) > PROB_TOL:
        raise InvalidInputError("policy rows must be probability vectors")
    return policy


def _check_trajectory(mdp, states, actions):
    states = np.asarray(states)
    actions = np.asarray(actions)
    if states.shape[-1] != mdp.horizon or actions.shape != states.shape:
        raise InvalidInputError(f"trajectories must have length H={mdp.horizon}")
    if states.size and (states.min() < 0 or states.max() >= mdp.n_states):
        raise InvalidInputError("state index out of range")
    if actions.size and (actions.min() < 0 or actions.max() >= mdp.n_actions):
        raise InvalidInputError("action index out of range")
    return states, actions


def trajectory_features(mdp, tau):
    """F(tau) = sum_h f(h, s_h, a_h) for one trajectory of (state, action) pairs."""
    tau = np.asarray(tau, dtype=int).reshape(-1, 2)
    return feature_sums(mdp, tau[:, 0][None], tau[:, 1][None])[0]


def feature_sums(mdp, states, actions):
    """Vectorised :func:`trajectory_features` over ``(n, H)`` index arrays."""
    states, actions = _check_trajectory(mdp, states, actions)
    steps = np.arange(mdp.horizon)
    return mdp.features[steps, states, actions].sum(axis=1)


def occupancy(mdp, policy):
    """Exact per-step state-action occupancy of a Markov policy."""
    policy = check_policy(mdp, policy)
    d = np.empty_like(policy)
    state_dist = mdp.initial
    for h in range(mdp.horizon):
        d[h] = state_dist[:, None] * policy[h]
        if h + 1 < mdp.horizon:
            state_dist = np.einsum("sa,sat->t", d[h], mdp.transitions[h])
    return d


def expected_features(mdp, occ):
    """Phi = sum_{h,s,a} d_h(s,a) f(h,s,a)."""
    return np.einsum("hsa,hsaij->ij", occ, mdp.features)


def feature_inner(mdp, theta):
    """Table <theta, f(h,s,a)>_F of shape (H, S, A)."""
    return np.einsum("hsaij,ij->hsa", mdp.features, theta)


def policy_from_occupancy(mdp, occ):
    """pi_h(a|s) = d_h(s,a) / sum_a d_h(s,a); uniform on unvisited states."""
    mass = occ.sum(-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        pol = np.where(mass > 0, occ / np.where(mass > 0, mass, 1.0), 1.0 / mdp.n_actions)
    return pol / pol.sum(-1, keepdims=True)


def sample_trajectories(mdp, policy, n, rng):
    """Draw n trajectories; returns ``(states, actions)`` of shape (n, H)."""
    policy = check_policy(mdp, policy)
    states = np.empty((n, mdp.horizon), dtype=np.int64)
    actions = np.empty((n, mdp.horizon), dtype=np.int64)
    s = _draw(np.broadcast_to(mdp.initial, (n, mdp.n_states)), rng)
    for h in range(mdp.horizon):
        a = _draw(policy[h, s], rng)
        states[:, h] = s
        actions[:, h] = a
        if h + 1 < mdp.horizon:
            s = _draw(mdp.transitions[h, s, a], rng)
    return states, actions


def _draw(probs, rng):
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    idx = (cdf <= u[:, None]).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def enumerate_trajectories(mdp, policy, cap=TRAJECTORY_CAP):
    """All trajectories with their probabilities under ``policy``.

    Returns ``(states, actions, probs)``; zero-probability trajectories are
    included so the index set does not depend on the policy.
    """
    policy = check_policy(mdp, policy)
    n_sa = mdp.n_states * mdp.n_actions
    total = n_sa ** mdp.horizon
    if total > cap:
        raise TooLargeError(f"{total} trajectories exceed the enumeration cap {cap}")
    idx = np.array(list(itertools.product(range(n_sa), repeat=mdp.horizon)), dtype=np.int64)
    idx = idx.reshape(total, mdp.horizon)
    states, actions = np.divmod(idx, mdp.n_actions)
    probs = mdp.initial[states[:, 0]]
    for h in range(mdp.horizon):
        probs = probs * policy[h, states[:, h], actions[:, h]]
        if h + 1 < mdp.horizon:
            probs = probs * mdp.transitions[h, states[:, h], actions[:, h], states[:, h + 1]]
    return states, actions, probs


def policy_value_estimate(mdp, policy, theta, head, *, cap=TRAJECTORY_CAP, n_samples=None, rng=None):
    """J(pi; r_theta) as ``(value, standard_error)``.

    Linear heads are exact through the occupancy measure. Other heads use
    exhaustive enumeration when the trajectory space fits under ``cap`` and
    Monte-Carlo otherwise.
    """
    from .reward import reward_from_inner

    theta = np.asarray(theta, dtype=float)
    if theta.shape != tuple(mdp.dims):
        raise InvalidInputError(f"theta shape {theta.shape} does not match features {mdp.dims}")
    if head.kind == "linear":
        return float(np.sum(occupancy(mdp, policy) * feature_inner(mdp, theta))), 0.0
    inner = feature_inner(mdp, theta)
    steps = np.arange(mdp.horizon)
    if (mdp.n_states * mdp.n_actions) ** mdp.horizon <= cap:
        states, actions, probs = enumerate_trajectories(mdp, policy, cap)
        r = reward_from_inner(inner[steps, states, actions].sum(axis=1), head)
        return float(probs @ r), 0.0
    if not n_samples or rng is None:
        raise UnsupportedConfigurationError(
            "nonlinear head beyond the enumeration cap needs n_samples and an rng")
    states, actions = sample_trajectories(mdp, policy, n_samples, rng)
    r = reward_from_inner(inner[steps, states, actions].sum(axis=1), head)
    return float(r.mean()), float(r.std(ddof=1) / np.sqrt(n_samples)) if n_samples > 1 else 0.0


def policy_value(mdp, policy, theta, head, **kwargs):
    return policy_value_estimate(mdp, policy, theta, head, **kwargs)[0]


def best_response_dp(mdp, reward_table):
    """Deterministic policy maximising the expected sum of ``reward_table``.

    Returns ``(policy, value)``; ties break toward the lowest action index.
    """
    r = np.asarray(reward_table, dtype=float)
    if r.shape != (mdp.horizon, mdp.n_states, mdp.n_actions):
        raise InvalidInputError(f"reward table shape {r.shape} does not match the MDP")
    if not np.all(np.isfinite(r)):
        raise InvalidInputError("reward table must be finite")
    policy = np.zeros_like(r)
    v_next = np.zeros(mdp.n_states)
    for h in reversed(range(mdp.horizon)):
        q = r[h]
        if h + 1 < mdp.horizon:
            q = q + mdp.transitions[h] @ v_next
        best = np.argmax(q, axis=1)
        policy[h, np.arange(mdp.n_states), best] = 1.0
        v_next = q[np.arange(mdp.n_states), best]
    return policy, float(mdp.initial @ v_next)


def enumerate_policies(mdp, cap=POLICY_CAP):
    """Every deterministic Markov policy exactly once."""
    slots = mdp.n_states * mdp.horizon
    total = mdp.n_actions ** slots
    if total > cap:
        raise TooLargeError(f"{total} deterministic policies exceed the cap {cap}")
    out = []
    for choice in itertools.product(range(mdp.n_actions), repeat=slots):
        pol = np.zeros((mdp.horizon, mdp.n_states, mdp.n_actions))
        c = np.asarray(choice).reshape(mdp.horizon, mdp.n_states)
        h_idx, s_idx = np.indices(c.shape)
        pol[h_idx, s_idx, c] = 1.0
        out.append(pol)
    return out
