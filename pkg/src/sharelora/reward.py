"""Low-rank reward models with a shared factor, plus the LoRA/full baselines.

Every model exposes the same small surface used by the trainer:

* ``deltas()`` -- per-user updates ``Delta Theta_i`` as an ``(N, d1, d2)`` stack
* ``params()`` / ``replace(**params)`` -- the trainable arrays
* ``scopes()`` -- whether each array is pooled across users or per user
* ``chain(grad_deltas)`` -- pull a gradient w.r.t. the deltas back to params

A user's reward is ``r(Theta_i, F) = head(<Theta_init + Delta Theta_i, F>_F)``.
"""

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import io
from .errors import InvalidInputError, ParseError
from .data import join_users

CHECKPOINT_FORMAT = "sharelora-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class RewardHead:
    kind: str = "linear"
    range_r: float = 1.0

    def __post_init__(self):
        if self.kind not in ("linear", "tanh"):
            raise InvalidInputError(f"unknown reward head {self.kind!r}")
        if not self.range_r > 0:
            raise InvalidInputError("range_r must be positive")


LINEAR = RewardHead()


def reward_from_inner(u, head):
    if head.kind == "linear":
        return u
    return head.range_r * np.tanh(u / head.range_r)


def _head_slope(u, head):
    if head.kind == "linear":
        return np.ones_like(u)
    return 1.0 - np.tanh(u / head.range_r) ** 2


def reward(theta_i, f, head=LINEAR):
    """Reward of one parameter matrix on one feature matrix or a stack of them."""
    theta_i = np.asarray(theta_i, dtype=float)
    f = np.asarray(f, dtype=float)
    if f.shape[-2:] != theta_i.shape:
        raise InvalidInputError(f"feature shape {f.shape[-2:]} does not match theta {theta_i.shape}")
    u = np.einsum("...ij,ij->...", f, theta_i)
    return reward_from_inner(u, head)


def log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _frob(stack):
    return np.sqrt(np.einsum("nij,nij->n", stack, stack))


@dataclass(frozen=True, eq=False)
class SharedLoraModel:
    theta_init: np.ndarray
    shared: np.ndarray  # (d1, k) share_left | (k, d2) share_right
    users: np.ndarray  # (N, k, d2) share_left | (N, d1, k) share_right
    share_mode: str = "share_left"
    frob_bound: float = np.inf
    head: RewardHead = LINEAR

    def __post_init__(self):
        d1, d2 = self.theta_init.shape
        if self.share_mode == "share_left":
            ok = self.shared.shape[0] == d1 and self.users.shape[1:] == (self.shared.shape[1], d2)
        elif self.share_mode == "share_right":
            ok = self.shared.shape[1] == d2 and self.users.shape[1:] == (d1, self.shared.shape[0])
        else:
            raise InvalidInputError(f"unknown share_mode {self.share_mode!r}")
        if not ok or self.users.ndim != 3:
            raise InvalidInputError("factor shapes are inconsistent")

    @property
    def n_users(self):
        return self.users.shape[0]

    @property
    def rank(self):
        return self.shared.shape[1] if self.share_mode == "share_left" else self.shared.shape[0]

    def deltas(self):
        if self.share_mode == "share_left":
            return np.matmul(self.shared, self.users)
        return np.matmul(self.users, self.shared)

    def params(self):
        return {"shared": self.shared, "users": self.users}

    def scopes(self):
        return {"shared": "pooled", "users": "user"}

    def replace(self, **params):
        return dataclasses.replace(self, **params)

    def chain(self, g):
        if self.share_mode == "share_left":
            return {"shared": np.einsum("nij,nkj->ik", g, self.users),
                    "users": np.matmul(self.shared.T, g)}
        return {"shared": np.einsum("nik,nij->kj", self.users, g),
                "users": np.matmul(g, self.shared.T)}

    def user_factor_scale(self, factors):
        return {"users": factors}


BASELINE_KINDS = ("lora_global", "lora_local", "full_param")


@dataclass(frozen=True, eq=False)
class BaselineModel:
    """``lora_global`` keeps one (left, right) pair for every user,
    ``lora_local`` one pair per user, ``full_param`` an unconstrained
    ``Delta Theta_i`` per user (stored in ``left``; ``right`` is None)."""

    kind: str
    theta_init: np.ndarray
    n_users: int
    left: np.ndarray  # (M, d1, k) or (N, d1, d2) for full_param
    right: np.ndarray | None = None  # (M, k, d2)
    frob_bound: float = np.inf
    head: RewardHead = LINEAR

    def __post_init__(self):
        if self.kind not in BASELINE_KINDS:
            raise InvalidInputError(f"unknown baseline kind {self.kind!r}")
        m = 1 if self.kind == "lora_global" else self.n_users
        d1, d2 = self.theta_init.shape
        if self.left.shape[:2] != (m, d1):
            raise InvalidInputError("left factor shape is inconsistent")
        if self.kind == "full_param":
            if self.left.shape[2] != d2 or self.right is not None:
                raise InvalidInputError("full_param stores (N, d1, d2) in left only")
        elif self.right is None or self.right.shape != (m, self.left.shape[2], d2):
            raise InvalidInputError("right factor shape is inconsistent")

    @property
    def rank(self):
        return self.left.shape[2]

    def deltas(self):
        if self.kind == "full_param":
            return self.left
        d = np.matmul(self.left, self.right)
        if self.kind == "lora_global":
            d = np.broadcast_to(d, (self.n_users,) + d.shape[1:])
        return d

    def params(self):
        if self.kind == "full_param":
            return {"left": self.left}
        return {"left": self.left, "right": self.right}

    def scopes(self):
        scope = "pooled" if self.kind == "lora_global" else "user"
        return {name: scope for name in self.params()}

    def replace(self, **params):
        return dataclasses.replace(self, **params)

    def chain(self, g):
        if self.kind == "full_param":
            return {"left": g}
        if self.kind == "lora_global":
            g = g.sum(axis=0, keepdims=True)
        return {"left": np.matmul(g, np.swapaxes(self.right, 1, 2)),
                "right": np.matmul(np.swapaxes(self.left, 1, 2), g)}

    def user_factor_scale(self, factors):
        name = "left" if self.kind == "full_param" else "right"
        return {name: factors}


def _user_factor(model):
    if isinstance(model, SharedLoraModel):
        return model.users
    return model.left if model.kind == "full_param" else model.right


def project_frobenius(model):
    """Shrink the user-specific factor wherever ||Delta Theta_i||_F > bound."""
    if not np.isfinite(model.frob_bound):
        return model
    norms = _frob(np.ascontiguousarray(model.deltas()[: _user_factor(model).shape[0]]))
    over = norms > model.frob_bound
    if not over.any():
        return model
    factor = np.where(over, model.frob_bound / np.where(over, norms, 1.0), 1.0)
    scaled = _user_factor(model) * factor[:, None, None]
    return model.replace(**model.user_factor_scale(scaled))


def assemble_delta_theta(model):
    """Column concatenation [Delta Theta_1, ..., Delta Theta_N]."""
    return join_users(np.ascontiguousarray(model.deltas()))


def thetas(model):
    return model.theta_init + model.deltas()


def user_rewards(model, ds):
    """Rewards of both trajectories in every pair: two (N, Np) arrays."""
    th = np.ascontiguousarray(thetas(model))
    u0, u1 = _flat_inner(ds.f0, th), _flat_inner(ds.f1, th)
    return reward_from_inner(u0, model.head), reward_from_inner(u1, model.head)


def _check_dims(model, ds):
    if tuple(ds.dims) != model.theta_init.shape or ds.n_users != model.n_users:
        raise InvalidInputError(
            f"model ({model.n_users} users, {model.theta_init.shape}) does not match "
            f"dataset ({ds.n_users} users, {tuple(ds.dims)})")


def _flat_inner(stack, th):
    """<stack[n, p], th[n]>_F for (N, Np, d1, d2) x (N, d1, d2) via batched matmul."""
    n, npairs = stack.shape[:2]
    width = th.shape[1] * th.shape[2]
    return np.matmul(stack.reshape(n, npairs, width), th.reshape(n, width, 1))[..., 0]


def _flat_weighted_sum(g, stack):
    """sum_p g[n, p] stack[n, p] -> (N, d1, d2)."""
    n, npairs, d1, d2 = stack.shape
    return np.matmul(g[:, None, :], stack.reshape(n, npairs, d1 * d2))[:, 0].reshape(n, d1, d2)


def reward_gaps(model, ds):
    _check_dims(model, ds)
    if model.head.kind == "linear":
        return _flat_inner(ds.diff, np.ascontiguousarray(thetas(model)))
    r0, r1 = user_rewards(model, ds)
    return r0 - r1


def pref_prob(model, user, f0, f1):
    """P(o = 1) = sigmoid(r_i(f0) - r_i(f1)) for user ``user``."""
    if not 0 <= user < model.n_users:
        raise InvalidInputError(f"user {user} out of range [0, {model.n_users})")
    theta = model.theta_init + model.deltas()[user]
    return float(expit(reward(theta, f0, model.head) - reward(theta, f1, model.head)))


def sample_log_likelihoods(model, ds):
    x = reward_gaps(model, ds)
    return np.where(ds.labels == 1, log_sigmoid(x), log_sigmoid(-x))


def log_likelihood(model, ds, weights=None):
    """sum_i sum_j log P_{Theta_i}(o_ij | tau_ij0, tau_ij1)."""
    ll = sample_log_likelihoods(model, ds)
    if weights is not None:
        ll = ll * weights
    return float(ll.sum())


def _value_and_grad_deltas(model, ds, weights=None):
    _check_dims(model, ds)
    th = np.ascontiguousarray(thetas(model))
    if model.head.kind == "linear":
        x = _flat_inner(ds.diff, th)
    else:
        u0, u1 = _flat_inner(ds.f0, th), _flat_inner(ds.f1, th)
        x = reward_from_inner(u0, model.head) - reward_from_inner(u1, model.head)
    ll = np.where(ds.labels == 1, log_sigmoid(x), log_sigmoid(-x))
    g = ds.labels - expit(x)
    if weights is not None:
        ll = ll * weights
        g = g * weights
    if model.head.kind == "linear":
        grad = _flat_weighted_sum(g, ds.diff)
    else:
        grad = (_flat_weighted_sum(g * _head_slope(u0, model.head), ds.f0)
                - _flat_weighted_sum(g * _head_slope(u1, model.head), ds.f1))
    return float(ll.sum()), grad


def grad_deltas(model, ds, weights=None):
    """Gradient of the log-likelihood w.r.t. each user's Delta Theta_i.

    Per sample the residual is ``o - sigmoid(x)`` and the gradient is the
    residual times ``h'(u0) F0 - h'(u1) F1``.
    """
    return _value_and_grad_deltas(model, ds, weights)[1]


def value_and_grad(model, ds, weights=None):
    """``(log_likelihood, gradient dict)`` from a single pass over the data."""
    ll, g = _value_and_grad_deltas(model, ds, weights)
    return ll, model.chain(g)


def grad_log_likelihood(model, ds, weights=None):
    """Gradient w.r.t. every trainable array, keyed like ``model.params()``."""
    return model.chain(grad_deltas(model, ds, weights))


def init_shared_lora(theta_init, n_users, rank, rng, share_mode="share_left",
                     frob_bound=np.inf, head=LINEAR):
    """Shared factor ~ N(0, 1/d1) (or 1/d2 when shared on the right), user factors zero."""
    d1, d2 = theta_init.shape
    if share_mode == "share_left":
        shared = rng.standard_normal((d1, rank)) / np.sqrt(d1)
        users = np.zeros((n_users, rank, d2))
    else:
        shared = rng.standard_normal((rank, d2)) / np.sqrt(d2)
        users = np.zeros((n_users, d1, rank))
    return SharedLoraModel(theta_init, shared, users, share_mode, frob_bound, head)


def init_baseline(kind, theta_init, n_users, rank, rng, frob_bound=np.inf, head=LINEAR):
    """Left factors ~ N(0, 1/d1), right factors zero; full_param starts at zero."""
    d1, d2 = theta_init.shape
    if kind == "full_param":
        return BaselineModel(kind, theta_init, n_users, np.zeros((n_users, d1, d2)), None,
                             frob_bound, head)
    m = 1 if kind == "lora_global" else n_users
    left = rng.standard_normal((m, d1, rank)) / np.sqrt(d1)
    return BaselineModel(kind, theta_init, n_users, left, np.zeros((m, rank, d2)), frob_bound, head)


def save_checkpoint(model, path):
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION}
    doc["dims"] = list(model.theta_init.shape)
    doc["head"] = {"kind": model.head.kind, "range_r": model.head.range_r}
    doc["frob_bound"] = None if not np.isfinite(model.frob_bound) else model.frob_bound
    doc["theta_init"] = model.theta_init.ravel()
    doc["n_users"] = model.n_users
    if isinstance(model, SharedLoraModel):
        doc["kind"] = "share_lora"
        doc["share_mode"] = model.share_mode
        doc["rank"] = model.rank
        doc["shared_factor"] = model.shared.ravel()
        doc["user_factors"] = model.users.ravel()
    else:
        doc["kind"] = model.kind
        doc["rank"] = model.rank
        doc["left"] = model.left.ravel()
        doc["right"] = None if model.right is None else model.right.ravel()
    io.write(path, doc)


def load_checkpoint(path):
    doc = io.read(path, CHECKPOINT_FORMAT, CHECKPOINT_VERSION)
    try:
        d1, d2 = (int(v) for v in doc["dims"])
        n, k = int(doc["n_users"]), int(doc["rank"])
        head = RewardHead(doc["head"]["kind"], float(doc["head"]["range_r"]))
        kind = doc["kind"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: malformed header field: {exc}") from None
    bound = np.inf if doc.get("frob_bound") is None else float(doc["frob_bound"])
    theta_init = io.field(doc, "theta_init", shape=(d1 * d2,)).reshape(d1, d2)
    if kind == "share_lora":
        mode = doc.get("share_mode")
        if mode == "share_left":
            shared = io.field(doc, "shared_factor", shape=(d1 * k,)).reshape(d1, k)
            users = io.field(doc, "user_factors", shape=(n * k * d2,)).reshape(n, k, d2)
        elif mode == "share_right":
            shared = io.field(doc, "shared_factor", shape=(k * d2,)).reshape(k, d2)
            users = io.field(doc, "user_factors", shape=(n * d1 * k,)).reshape(n, d1, k)
        else:
            raise ParseError(f"{path}: field 'share_mode' invalid: {mode!r}")
        return SharedLoraModel(theta_init, shared, users, mode, bound, head)
    if kind not in BASELINE_KINDS:
        raise ParseError(f"{path}: field 'kind' invalid: {kind!r}")
    if kind == "full_param":
        left = io.field(doc, "left", shape=(n * d1 * d2,)).reshape(n, d1, d2)
        return BaselineModel(kind, theta_init, n, left, None, bound, head)
    m = 1 if kind == "lora_global" else n
    left = io.field(doc, "left", shape=(m * d1 * k,)).reshape(m, d1, k)
    right = io.field(doc, "right", shape=(m * k * d2,)).reshape(m, k, d2)
    return BaselineModel(kind, theta_init, n, left, right, bound, head)
