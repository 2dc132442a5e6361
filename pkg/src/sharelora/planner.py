"""Confidence sets and pessimistic planning for a linear reward head.

For a Frobenius ball of squared radius ``zeta`` around ``Theta_hat`` the
worst-case advantage of a policy over the reference has the closed form

    <Theta_hat, D> - sqrt(zeta) ||D||_F,   D = Phi_pi - Phi_ref,

which is concave in the occupancy measure. The outer maximisation runs
Frank-Wolfe over the occupancy polytope with backward DP as the linear
oracle.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import minimize, minimize_scalar

from .errors import DegenerateError, InvalidInputError, UnsupportedConfigurationError
from .mdp import (
    best_response_dp,
    expected_features,
    feature_inner,
    occupancy,
    policy_from_occupancy,
    policy_value,
)

SINGULAR_EPS = 1e-12


@dataclass(frozen=True)
class ConfidenceSet:
    user: int
    center: np.ndarray  # Delta Theta_hat_i
    zeta: float  # squared radius
    theta_init: np.ndarray

    def __post_init__(self):
        if not self.zeta >= 0:
            raise InvalidInputError("zeta must be non-negative")

    @property
    def theta_hat(self):
        return self.theta_init + self.center

    def contains(self, delta):
        return float(np.sum((delta - self.center) ** 2)) <= self.zeta


@dataclass(frozen=True)
class ZetaInputs:
    n_users: int
    n_pairs: int
    nu: float
    tail: float
    k: int
    d1: int
    d2: int
    delta: float = 0.1
    min_residual: float = 0.0
    zeta_scale: float = 1.0

    def __post_init__(self):
        if self.n_users < 1 or self.n_pairs < 1:
            raise InvalidInputError("n_users and n_pairs must be >= 1")
        if not 0 < self.delta <= 1:
            raise InvalidInputError("delta must lie in (0, 1]")
        for name in ("nu", "tail", "min_residual", "zeta_scale"):
            if not getattr(self, name) >= 0:
                raise InvalidInputError(f"{name} must be non-negative")


def zeta_terms(z):
    """The four summands of the squared radius, before scaling.

    The bracketing-number log is replaced by its upper bound
    ``k (d1 + N d2) log(N N_p / delta)``.
    """
    if z.nu <= 0:
        raise DegenerateError("condition number nu is zero")
    n, npairs = z.n_users, z.n_pairs
    log_brack = z.k * (z.d1 + n * z.d2) * math.log(n * npairs / z.delta)
    return (
        z.min_residual,
        log_brack / (n * npairs * z.nu),
        math.sqrt(z.tail / n) / z.nu,
        (z.k * z.d2 + math.log(n / z.delta)) / npairs,
    )


def compute_zeta(z):
    """Squared confidence radius ``zeta_scale^2 * sum(zeta_terms)``."""
    return z.zeta_scale ** 2 * sum(zeta_terms(z))


def _require_linear(head):
    if head is not None and head.kind != "linear":
        raise UnsupportedConfigurationError("pessimistic planning needs a linear reward head")


def pessimistic_value(mdp, policy_or_occ, cs, mu_ref, head=None, is_occupancy=False):
    """min over the confidence set of J(pi; r) - J(mu_ref; r), in closed form."""
    _require_linear(head)
    occ = policy_or_occ if is_occupancy else occupancy(mdp, policy_or_occ)
    d = expected_features(mdp, occ) - expected_features(mdp, occupancy(mdp, mu_ref))
    return float(np.sum(cs.theta_hat * d) - math.sqrt(cs.zeta) * np.linalg.norm(d))


@dataclass
class PlanResult:
    policy: np.ndarray
    occupancy: np.ndarray
    fw_gap: float
    value: float
    iterations: int
    history: list


def frank_wolfe_plan(mdp, cs, mu_ref, iters=500, gap_tol=1e-6, step="monotone", head=None):
    """Maximise the pessimistic advantage over occupancy measures.

    ``step`` is ``"monotone"`` (2/(t+2), halved until the objective does not
    drop), ``"classic"`` (plain 2/(t+2)) or ``"line_search"`` (exact 1-D
    maximisation along the FW direction). ``fw_gap`` is the smallest gap
    seen; with a non-decreasing objective it bounds the final suboptimality.

    When the optimum sits at or near the kink ``D = 0`` the primal gap
    stalls. An unconverged run then re-weights the visited vertices, falls
    back to the reference occupancy if that scores higher, and reports the
    smaller of the primal gap and a dual bound (see :func:`_dual_bound`).
    """
    _require_linear(head)
    if iters < 1:
        raise InvalidInputError("iters must be >= 1")
    theta = cs.theta_hat
    root = math.sqrt(cs.zeta)
    phi_ref = expected_features(mdp, occupancy(mdp, mu_ref))
    base_table = feature_inner(mdp, theta)

    def value(phi):
        dd = phi - phi_ref
        return float(np.sum(theta * dd) - root * np.linalg.norm(dd))

    d, _ = _vertex(mdp, base_table)
    phi = expected_features(mdp, d)
    v = value(phi)
    # active set: distinct vertex occupancies, their centred features, FW weights
    verts, cuts, weights, index = [d], [phi - phi_ref], [1.0], {d.tobytes(): 0}
    best_gap = math.inf
    history = [v]
    t = 0
    for t in range(iters):
        dd = phi - phi_ref
        norm = np.linalg.norm(dd)
        table = base_table
        if root > 0 and norm > SINGULAR_EPS:
            table = base_table - root * feature_inner(mdp, dd / norm)
        vert, _ = _vertex(mdp, table)
        gap = float(np.sum(table * (vert - d)))
        best_gap = min(best_gap, gap)
        if best_gap < gap_tol:
            break
        phi_v = expected_features(mdp, vert)
        if step == "line_search":
            gamma = _line_search(theta, root, phi - phi_ref, phi_v - phi)
        else:
            gamma = 2.0 / (t + 2.0)
        if step == "monotone":
            while gamma > 1e-12 and value((1 - gamma) * phi + gamma * phi_v) < v:
                gamma /= 2.0
            if gamma <= 1e-12:
                history.append(v)
                continue
        j = index.setdefault(vert.tobytes(), len(verts))
        if j == len(verts):
            verts.append(vert)
            cuts.append(phi_v - phi_ref)
            weights.append(0.0)
        weights = [(1 - gamma) * w for w in weights]
        weights[j] += gamma
        d = (1 - gamma) * d + gamma * vert
        phi = (1 - gamma) * phi + gamma * phi_v
        v = value(phi)
        history.append(v)
    if best_gap >= gap_tol and root > 0:
        # an optimum needs at most dim + 1 vertices; keep the heaviest few
        keep = np.argsort(weights)[::-1][:4 * (theta.size + 1)]
        sub = np.array(cuts)[keep]
        w0 = np.array(weights)[keep]
        w = _corrective_weights(theta, root, sub, w0 / w0.sum())
        phi_c = phi_ref + np.tensordot(w, sub, axes=1)
        if value(phi_c) > v:
            d, phi, v = np.tensordot(w, np.array(verts)[keep], axes=1), phi_c, value(phi_c)
            history.append(v)
    if v < 0.0:
        # the reference itself scores exactly 0, which FW only reaches in the limit
        d, phi, v = occupancy(mdp, mu_ref), phi_ref, 0.0
        history.append(v)
    if best_gap >= gap_tol and root > 0:
        best_gap = min(best_gap, max(0.0, _dual_bound(mdp, theta, root, phi_ref, cuts) - v))
    return PlanResult(policy_from_occupancy(mdp, d), d, best_gap, v, t + 1, history)


def _corrective_weights(theta, root, cuts, w0):
    """Maximise the pessimistic value over the convex hull of ``cuts``.

    The FW iterate converges slowly when the optimum lies close to the kink,
    where the norm term is sharply curved; re-weighting the visited vertices
    directly is a small smooth problem away from ``D = 0``.
    """
    a = cuts.reshape(len(cuts), -1)
    lin = a @ theta.ravel()

    def neg(w):
        dd = w @ a
        n = np.linalg.norm(dd)
        grad = lin - (root * (a @ dd) / n if n > SINGULAR_EPS else 0.0)
        return -(w @ lin - root * n), -grad

    res = minimize(neg, w0, jac=True, method="SLSQP", bounds=[(0.0, 1.0)] * len(w0),
                   constraints=[{"type": "eq", "fun": lambda w: w.sum() - 1.0,
                                 "jac": lambda w: np.ones_like(w)}],
                   options={"maxiter": 500, "ftol": 1e-15})
    w = np.clip(res.x, 0.0, None)
    return w / w.sum()


def _dual_bound(mdp, theta, root, phi_ref, cuts, rounds=60, tol=1e-9):
    """Upper bound on the optimum from ``h(u) = max_D <theta - root u, D>``.

    Every unit ``u`` gives a supergradient ``theta - root u`` at ``D = 0``,
    so ``h(u)`` bounds the optimum and the DP oracle evaluates it exactly.
    ``u`` is chosen by Kelley cutting planes over the vertices seen so far.
    """
    cuts = [c.ravel() for c in cuts]
    th = theta.ravel()
    dim = th.size
    best = math.inf
    x = np.zeros(dim + 1)
    for _ in range(rounds):
        a = np.array(cuts)
        lin = a @ th
        cons = [
            {"type": "ineq", "fun": lambda z, a=a, lin=lin: z[-1] - lin + root * (a @ z[:-1]),
             "jac": lambda z, a=a: np.hstack([root * a, np.ones((len(a), 1))])},
            {"type": "ineq", "fun": lambda z: 1.0 - z[:-1] @ z[:-1],
             "jac": lambda z: np.append(-2.0 * z[:-1], 0.0)},
        ]
        x[-1] = float(np.max(lin - root * (a @ x[:-1])))
        res = minimize(lambda z: z[-1], x, jac=lambda z: np.eye(dim + 1)[-1], constraints=cons,
                       method="SLSQP", options={"maxiter": 200, "ftol": 1e-12})
        u = res.x[:-1]
        u = u / max(1.0, float(np.linalg.norm(u)))
        g = (th - root * u).reshape(theta.shape)
        vert, _ = _vertex(mdp, feature_inner(mdp, g))
        dv = (expected_features(mdp, vert) - phi_ref).ravel()
        h = float((th - root * u) @ dv)
        best = min(best, h)
        x = np.append(u, res.x[-1])
        if h - res.x[-1] <= tol:
            break
        cuts.append(dv)
    return best


def _vertex(mdp, table):
    pol, _ = best_response_dp(mdp, table)
    return occupancy(mdp, pol), pol


def _line_search(theta, root, dd, e):
    a = float(np.sum(theta * e))

    def neg(g):
        return -(a * g - root * np.linalg.norm(dd + g * e))

    return float(minimize_scalar(neg, bounds=(0.0, 1.0), method="bounded",
                                 options={"xatol": 1e-12}).x)


def value_gap(mdp, pi_tar, pi_hat, theta_star_i, head):
    """J(pi_tar; r*) - J(pi_hat; r*); ``pi_tar=None`` uses the r*-optimal policy."""
    if pi_tar is None:
        pi_tar = optimal_policy(mdp, theta_star_i, head)
    return policy_value(mdp, pi_tar, theta_star_i, head) - policy_value(mdp, pi_hat, theta_star_i, head)


def optimal_policy(mdp, theta, head=None):
    """Optimal deterministic policy for the linear reward ``<theta, F>``."""
    _require_linear(head)
    return best_response_dp(mdp, feature_inner(mdp, theta))[0]


@dataclass
class PlannerReport:
    user: int
    zeta: float
    fw_iters: int
    fw_gap: float
    pess_value: float
    value_gap: float

    def to_dict(self):
        return asdict(self)
