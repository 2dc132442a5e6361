"""Ground-truth synthesis, Bradley-Terry preference sampling and dataset files."""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import io
from .errors import InvalidInputError, ParseError
from .linalg import DiversitySummary, diversity_metrics, generate_planted
from .mdp import TabularMdp, feature_sums, sample_trajectories, uniform_policy
from .rng import stream

DATASET_FORMAT = "sharelora-dataset"
DATASET_VERSION = 1


@dataclass(frozen=True)
class GroundTruth:
    theta_init: np.ndarray  # d1 x d2, shared by every user
    delta_theta_star: np.ndarray  # d1 x (N d2), user i owns columns [i d2, (i+1) d2)
    diversity: DiversitySummary
    frob_bound: float
    scale: float = 1.0

    @property
    def n_users(self):
        return self.delta_theta_star.shape[1] // self.theta_init.shape[1]

    @property
    def user_deltas(self):
        return split_users(self.delta_theta_star, self.n_users)

    @property
    def thetas(self):
        return self.theta_init + self.user_deltas


def split_users(aggregated, n_users):
    """(d1, N d2) column blocks -> (N, d1, d2) stack."""
    d1, width = aggregated.shape
    return aggregated.reshape(d1, n_users, width // n_users).transpose(1, 0, 2).copy()


def join_users(stack):
    """(N, d1, d2) stack -> (d1, N d2) column concatenation."""
    n, d1, d2 = stack.shape
    return stack.transpose(1, 0, 2).reshape(d1, n * d2)


def tail_spectrum(leading, tail_energy, k, length):
    """Length-``length`` spectrum: the given top values, then ``tail_energy``
    spread evenly over the remaining positions (zeros when it is 0).

    Always padding to full length keeps the number of random draws fixed, so
    configs that differ only in tail energy share the same singular vectors.
    """
    lead = [float(v) for v in leading]
    if len(lead) != k:
        raise InvalidInputError(f"expected {k} leading singular values, got {len(lead)}")
    if length < k:
        raise InvalidInputError(f"spectrum length {length} is shorter than k = {k}")
    if tail_energy < 0:
        raise InvalidInputError("tail_energy must be non-negative")
    if length == k:
        if tail_energy > 0:
            raise InvalidInputError("no room for tail energy when length == k")
        return lead
    tail = float(np.sqrt(tail_energy / (length - k)))
    return lead + [tail] * (length - k)


def synthesize_ground_truth(d1, d2, n_users, k, spectrum, theta_init_mode, frob_bound, rng):
    """Planted user-difference matrix plus a shared initialisation.

    If any user's block exceeds ``frob_bound`` the whole matrix is shrunk by
    one common factor, recorded in ``GroundTruth.scale``.
    """
    if not frob_bound > 0:
        raise InvalidInputError("frob_bound must be positive")
    delta = generate_planted(d1, d2, n_users, k, spectrum, rng)
    norms = np.linalg.norm(split_users(delta, n_users), axis=(1, 2))
    scale = 1.0
    if norms.max() > frob_bound:
        scale = frob_bound / norms.max()
        delta = delta * scale
    if theta_init_mode == "zero":
        theta_init = np.zeros((d1, d2))
    elif theta_init_mode == "gaussian":
        theta_init = rng.standard_normal((d1, d2)) / np.sqrt(d1)
    else:
        raise InvalidInputError(f"unknown theta_init_mode {theta_init_mode!r}")
    return GroundTruth(theta_init, delta, diversity_metrics(delta, k, n_users), frob_bound, scale)


def btl_probability(r0, r1):
    """P(o = 1 | tau0, tau1) = sigmoid(r0 - r1)."""
    return expit(np.subtract(r0, r1))


def btl_labels(r0, r1, rng):
    p = btl_probability(r0, r1)
    return (rng.random(np.shape(p)) < p).astype(np.int8)


def btl_label(r0, r1, rng):
    return int(btl_labels(float(r0), float(r1), rng))


def sample_pair(mdp, mu0, mu1, rng):
    """One trajectory from each reference policy, as lists of (state, action)."""
    s0, a0 = sample_trajectories(mdp, mu0, 1, rng)
    s1, a1 = sample_trajectories(mdp, mu1, 1, rng)
    return list(zip(s0[0].tolist(), a0[0].tolist())), list(zip(s1[0].tolist(), a1[0].tolist()))


@dataclass(eq=False)
class PreferenceDataset:
    f0: np.ndarray  # (N, Np, d1, d2)
    f1: np.ndarray  # (N, Np, d1, d2)
    labels: np.ndarray  # (N, Np) in {0, 1}
    theta_init: np.ndarray
    delta_theta_star: np.ndarray | None = None
    seed: int = 0
    config_digest: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if self.f0.ndim != 4 or self.f0.shape != self.f1.shape:
            raise InvalidInputError("f0/f1 must share shape (N, Np, d1, d2)")
        if self.labels.shape != self.f0.shape[:2]:
            raise InvalidInputError("labels must have shape (N, Np)")
        if np.any((self.labels != 0) & (self.labels != 1)):
            raise InvalidInputError("labels must be binary")
        if self.theta_init.shape != self.f0.shape[2:]:
            raise InvalidInputError("theta_init shape does not match the features")
        self._diff = None

    @property
    def n_users(self):
        return self.f0.shape[0]

    @property
    def n_pairs(self):
        return self.f0.shape[1]

    @property
    def dims(self):
        return self.f0.shape[2:]

    @property
    def diff(self):
        """F(tau0) - F(tau1); the sufficient statistic under a linear head."""
        if self._diff is None:
            self._diff = self.f0 - self.f1
        return self._diff

    def take(self, idx):
        """Dataset restricted to the per-user sample positions ``idx``."""
        return PreferenceDataset(
            self.f0[:, idx], self.f1[:, idx], self.labels[:, idx], self.theta_init,
            self.delta_theta_star, self.seed, self.config_digest, dict(self.meta))

    def split(self, test_fraction):
        """Hold out the last ``round(test_fraction * Np)`` samples of every user."""
        n_test = int(round(test_fraction * self.n_pairs))
        cut = self.n_pairs - n_test
        return self.take(slice(0, cut)), self.take(slice(cut, None))


def config_digest(config):
    text = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def generate_dataset(mdp, truth, n_pairs, mu0, mu1, head, seed, config=None):
    """Sample ``n_pairs`` labelled trajectory pairs for every user.

    User ``i`` draws from its own stream keyed by ``(seed, i)`` so the result
    does not depend on generation order.
    """
    from .reward import reward

    if tuple(mdp.dims) != truth.theta_init.shape:
        raise InvalidInputError(f"MDP features {mdp.dims} do not match truth {truth.theta_init.shape}")
    n, (d1, d2) = truth.n_users, truth.theta_init.shape
    f0 = np.empty((n, n_pairs, d1, d2))
    f1 = np.empty((n, n_pairs, d1, d2))
    labels = np.empty((n, n_pairs), dtype=np.int8)
    for i, theta in enumerate(truth.thetas):
        rng = stream(seed, "pairs", i)
        f0[i] = feature_sums(mdp, *sample_trajectories(mdp, mu0, n_pairs, rng))
        f1[i] = feature_sums(mdp, *sample_trajectories(mdp, mu1, n_pairs, rng))
        labels[i] = btl_labels(reward(theta, f0[i], head), reward(theta, f1[i], head), rng)
    meta = {"mdp": mdp.to_dict()}
    if config is not None:
        meta["config"] = config
    return PreferenceDataset(f0, f1, labels, truth.theta_init, truth.delta_theta_star,
                             int(seed), config_digest(config or {}), meta)


def save_dataset(ds, path):
    n, npairs, d1, d2 = ds.f0.shape
    samples = []
    for i in range(n):
        samples.append([
            {"f0": ds.f0[i, j].ravel(), "f1": ds.f1[i, j].ravel(), "o": int(ds.labels[i, j])}
            for j in range(npairs)
        ])
    doc = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "d1": d1, "d2": d2, "n_users": n, "n_pairs": npairs,
        "seed": ds.seed,
        "config_digest": ds.config_digest,
        "theta_init": ds.theta_init.ravel(),
        "delta_theta_star": None if ds.delta_theta_star is None else ds.delta_theta_star.ravel(),
        "meta": ds.meta,
        "samples": samples,
    }
    io.write(path, doc)


def _int_field(doc, name):
    v = doc.get(name)
    if not isinstance(v, int) or v < 0:
        raise ParseError(f"field {name!r} must be a non-negative integer, got {v!r}")
    return v


def load_dataset(path):
    doc = io.read(path, DATASET_FORMAT, DATASET_VERSION)
    d1, d2 = _int_field(doc, "d1"), _int_field(doc, "d2")
    n, npairs = _int_field(doc, "n_users"), _int_field(doc, "n_pairs")
    theta_init = io.field(doc, "theta_init", shape=(d1 * d2,)).reshape(d1, d2)
    delta = None
    if doc.get("delta_theta_star") is not None:
        delta = io.field(doc, "delta_theta_star", shape=(d1 * n * d2,)).reshape(d1, n * d2)
    samples = doc.get("samples")
    if not isinstance(samples, list) or len(samples) != n:
        raise ParseError(f"field 'samples' must list {n} users")
    f0 = np.empty((n, npairs, d1, d2))
    f1 = np.empty((n, npairs, d1, d2))
    labels = np.empty((n, npairs), dtype=np.int8)
    for i, user in enumerate(samples):
        if not isinstance(user, list) or len(user) != npairs:
            raise ParseError(f"samples[{i}]: expected {npairs} samples (per-user sizes must be equal)")
        for j, s in enumerate(user):
            where = f"samples[{i}][{j}]."
            if not isinstance(s, dict):
                raise ParseError(f"{where[:-1]} must be an object")
            f0[i, j] = io.field(s, "f0", where, (d1 * d2,)).reshape(d1, d2)
            f1[i, j] = io.field(s, "f1", where, (d1 * d2,)).reshape(d1, d2)
            if s.get("o") not in (0, 1):
                raise ParseError(f"field '{where}o' must be 0 or 1")
            labels[i, j] = s["o"]
    return PreferenceDataset(f0, f1, labels, theta_init, delta, doc.get("seed", 0),
                             doc.get("config_digest", ""), doc.get("meta") or {})


def dataset_mdp(ds):
    """The MDP stored alongside a dataset, if any."""
    if "mdp" not in ds.meta:
        raise InvalidInputError("dataset carries no MDP")
    return TabularMdp.from_dict(ds.meta["mdp"])


def default_reference(mdp):
    return uniform_policy(mdp)
