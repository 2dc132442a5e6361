"""Measurements that check the learned models against the planted truth."""

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import split_users
from .errors import DegenerateError, InvalidInputError, UnsupportedConfigurationError
from .linalg import optimal_rank_k, principal_angle_dist
from .mdp import enumerate_trajectories, expected_features, feature_inner, occupancy
from .reward import SharedLoraModel, assemble_delta_theta, reward_from_inner, reward_gaps, LINEAR


@dataclass
class DiagReport:
    dist_b: float = float("nan")
    dk_ratio: float = float("nan")
    pref_accuracy: list = field(default_factory=list)
    mean_accuracy: float = float("nan")
    concentration_ratio: float = float("nan")
    concentrability_estimate: float = float("nan")
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def _orth(m):
    q, _ = np.linalg.qr(m)
    return q


def _subspace_pair(model, truth_delta):
    """(B_hat, B_diamond, sigma_k) in the layout matching the model's shared side.

    For share_right the column space of the shared right factor is compared
    with the top-k right singular space of the user blocks stacked
    vertically.
    """
    if not isinstance(model, SharedLoraModel):
        raise InvalidInputError("subspace diagnostics need a shared-factor model")
    k = model.rank
    if model.share_mode == "share_left":
        b_hat = _orth(model.shared)
        target = truth_delta
    else:
        b_hat = _orth(model.shared.T)
        n = model.n_users
        target = split_users(truth_delta, n).reshape(-1, truth_delta.shape[1] // n).T
    opt = optimal_rank_k(target, k)
    sigma_k = float(np.linalg.norm(opt["w_diamond"][k - 1]))
    return b_hat, opt["b_diamond"], sigma_k


def subspace_error(model, truth):
    """dist(B_hat, B_diamond) between learned and optimal rank-k shared spaces."""
    b_hat, b_opt, _ = _subspace_pair(model, _delta(truth))
    return principal_angle_dist(b_hat, b_opt)


def _delta(truth):
    return truth if isinstance(truth, np.ndarray) else truth.delta_theta_star


def davis_kahan_ratio(model, truth):
    """dist^2 * sigma_k(Delta Theta*)^2 / ||Delta Theta_hat - Delta Theta*||_F^2."""
    delta = _delta(truth)
    b_hat, b_opt, sigma_k = _subspace_pair(model, delta)
    if sigma_k <= 0:
        raise DegenerateError("sigma_k of the true difference matrix is zero")
    dist = principal_angle_dist(b_hat, b_opt)
    err = float(np.sum((assemble_delta_theta(model) - delta) ** 2))
    if err <= 1e-24 * float(np.sum(delta ** 2)):  # exact recovery up to rounding
        return 0.0
    return dist ** 2 * sigma_k ** 2 / err


@dataclass
class AccuracyResult:
    per_user: np.ndarray
    mean: float


def pref_accuracy(model, test_ds):
    """Fraction of held-out labels matched by predicting o = 1 iff P(o=1) >= 1/2."""
    if test_ds.n_pairs == 0:
        raise DegenerateError("accuracy of an empty test set is undefined")
    pred = (reward_gaps(model, test_ds) >= 0).astype(np.int8)
    per_user = (pred == test_ds.labels).mean(axis=1)
    return AccuracyResult(per_user, float(per_user.mean()))


@dataclass
class ConcentrationResult:
    ratio: float
    d_exact: float
    d_hat: float
    within: bool
    degenerate: bool


def _trajectory_gain(mdp, theta_a, theta_b, head, states, actions):
    steps = np.arange(mdp.horizon)
    ua = feature_inner(mdp, theta_a)[steps, states, actions].sum(axis=1)
    ub = feature_inner(mdp, theta_b)[steps, states, actions].sum(axis=1)
    return reward_from_inner(ua, head) - reward_from_inner(ub, head)


def exact_discrepancy(theta_a, theta_b, mdp, mu0, mu1, head=LINEAR, cap=None):
    """D = E_{tau0~mu0, tau1~mu1}[(g(tau0) - g(tau1))^2] with g = r_a - r_b.

    Uses ``E[(X - Y)^2] = E X^2 + E Y^2 - 2 E X E Y`` for independent draws.
    """
    kw = {} if cap is None else {"cap": cap}
    s0, a0, p0 = enumerate_trajectories(mdp, mu0, **kw)
    s1, a1, p1 = enumerate_trajectories(mdp, mu1, **kw)
    g0 = _trajectory_gain(mdp, theta_a, theta_b, head, s0, a0)
    g1 = _trajectory_gain(mdp, theta_a, theta_b, head, s1, a1)
    val = p0 @ g0 ** 2 + p1 @ g1 ** 2 - 2.0 * (p0 @ g0) * (p1 @ g1)
    return max(float(val), 0.0)


def empirical_discrepancy(theta_a, theta_b, f0, f1, head=LINEAR, weights=None):
    def gain(f):
        ua = np.einsum("nij,ij->n", f, theta_a)
        ub = np.einsum("nij,ij->n", f, theta_b)
        return reward_from_inner(ua, head) - reward_from_inner(ub, head)

    sq = (gain(f0) - gain(f1)) ** 2
    if weights is None:
        return float(sq.mean())
    return float(np.dot(weights, sq) / np.sum(weights))


def concentration_check(theta_a, theta_b, mdp, mu0, mu1, ds_pairs, head=LINEAR, weights=None,
                        window=(0.9, 1.1)):
    """Ratio of the empirical to the exact reward-discrepancy D_hat / D.

    ``ds_pairs`` is ``(f0, f1)``: two ``(n, d1, d2)`` stacks of trajectory
    features drawn from ``mu0`` and ``mu1``; ``weights`` optionally weights
    the pairs (for instance with exact pair probabilities).
    """
    f0, f1 = (np.asarray(a, dtype=float) for a in ds_pairs)
    if len(f0) == 0:
        raise InvalidInputError("ds_pairs is empty")
    d = exact_discrepancy(theta_a, theta_b, mdp, mu0, mu1, head)
    d_hat = empirical_discrepancy(theta_a, theta_b, f0, f1, head, weights)
    scale = 1e-14 * (1.0 + float(np.sum(np.abs(theta_a)) + np.sum(np.abs(theta_b)))) ** 2
    if d <= scale:
        degenerate = d_hat <= scale
        return ConcentrationResult(1.0 if degenerate else math.inf, d, d_hat, degenerate, True)
    ratio = d_hat / d
    return ConcentrationResult(ratio, d, d_hat, window[0] <= ratio <= window[1], False)


@dataclass
class ConcentrabilityResult:
    estimate: float
    running_max: np.ndarray
    skipped: int
    n_samples: int


def concentrability_estimate(theta_star_i, center, radius, pi_tar, mu_ref, mdp, n_samples, rng,
                             head=LINEAR, cap=None):
    """Monte-Carlo lower bound on the concentrability coefficient.

    Candidate rewards ``theta = center + radius * U`` with ``U`` uniform on
    the unit Frobenius sphere. For the error ``e = r* - r`` the numerator
    ``E_{pi_tar}[e] - E_{mu_ref}[e]`` is exact through occupancies and the
    denominator ``sqrt(E_{mu_ref x mu_ref}[(e(tau0) - e(tau1))^2])`` exact
    through trajectory enumeration. Samples with a zero denominator are
    skipped and counted.
    """
    if head.kind != "linear":
        raise UnsupportedConfigurationError("concentrability estimate needs a linear head")
    kw = {} if cap is None else {"cap": cap}
    theta_star_i = np.asarray(theta_star_i, dtype=float)
    center = np.asarray(center, dtype=float)
    phi_gap = expected_features(mdp, occupancy(mdp, pi_tar)) - expected_features(mdp, occupancy(mdp, mu_ref))
    states, actions, probs = enumerate_trajectories(mdp, mu_ref, **kw)
    steps = np.arange(mdp.horizon)
    feats = mdp.features[steps, states, actions].sum(axis=1)  # (M, d1, d2)
    flat = feats.reshape(len(feats), -1)
    mean = probs @ flat
    cov = (flat * probs[:, None]).T @ flat - np.outer(mean, mean)
    best = 0.0
    running = np.empty(n_samples)
    skipped = 0
    for j in range(n_samples):
        u = rng.standard_normal(center.shape)
        u /= np.linalg.norm(u)
        err = (theta_star_i - (center + radius * u)).ravel()
        den2 = 2.0 * float(err @ cov @ err)
        num = float(err @ phi_gap.ravel())
        if den2 <= 1e-300:
            skipped += 1
        else:
            best = max(best, num / math.sqrt(den2))
        running[j] = best
    return ConcentrabilityResult(best, running, skipped, n_samples)
