"""Dense matrix analysis: SVD, rank-k truncation, subspace distances and
diversity metrics of the aggregated user-difference matrix.

Matrices are plain 2-D ``numpy`` float arrays. Singular vectors are not sign
normalised; anything that compares bases goes through a subspace distance.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

ORTHO_TOL = 1e-8


@dataclass(frozen=True)
class SvdResult:
    left: np.ndarray  # d1 x r, orthonormal columns
    values: np.ndarray  # length r, non-increasing
    right: np.ndarray  # d2 x r, orthonormal columns

    def reconstruct(self):
        return (self.left * self.values) @ self.right.T


@dataclass(frozen=True)
class DiversitySummary:
    nu: float
    tail: float
    spectrum: np.ndarray
    k: int
    n_users: int


def as_matrix(m, name="matrix"):
    a = np.asarray(m, dtype=float)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise InvalidInputError(f"{name} must be a non-empty 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} has non-finite entries")
    return a


def svd(m):
    """Thin SVD with singular values sorted in descending order."""
    a = as_matrix(m)
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    return SvdResult(u, s, vt.T)


def _check_rank(k, m):
    if not (1 <= k <= min(m.shape)):
        raise InvalidInputError(f"rank k={k} outside [1, {min(m.shape)}]")


def optimal_rank_k(delta_theta_star, k):
    """Best rank-k approximation in Frobenius norm (Eckart-Young).

    Returns a dict with ``theta_diamond`` = ``b_diamond @ w_diamond``, where
    ``b_diamond`` holds the top-k left singular vectors and
    ``w_diamond = diag(s_k) V_k^T``.
    """
    a = as_matrix(delta_theta_star, "delta_theta_star")
    _check_rank(k, a)
    res = svd(a)
    b = res.left[:, :k]
    w = res.values[:k, None] * res.right[:, :k].T
    return {"theta_diamond": b @ w, "b_diamond": b, "w_diamond": w}


def check_orthonormal(b, name="basis"):
    b = as_matrix(b, name)
    k = b.shape[1]
    err = np.linalg.norm(b.T @ b - np.eye(k))
    if err > ORTHO_TOL:
        raise InvalidInputError(f"{name} columns are not orthonormal (||B^T B - I|| = {err:.3g})")
    return b


def orthonormal_complement(b):
    """Orthonormal basis (d x (d-k)) of the orthogonal complement of span(b)."""
    b = check_orthonormal(b)
    d, k = b.shape
    if k >= d:
        raise InvalidInputError(f"complement of a {d}x{k} basis is empty")
    q, _ = np.linalg.qr(b, mode="complete")
    comp = q[:, k:]
    # One re-orthogonalisation pass removes the O(eps) leakage onto span(b).
    comp = comp - b @ (b.T @ comp)
    comp, _ = np.linalg.qr(comp)
    return comp


def _check_pair(b1, b2):
    b1 = check_orthonormal(b1, "b1")
    b2 = check_orthonormal(b2, "b2")
    if b1.shape != b2.shape:
        raise InvalidInputError(f"basis shapes differ: {b1.shape} vs {b2.shape}")
    return b1, b2


def principal_angle_dist(b1, b2):
    """(1/sqrt 2) ||B1 B1^T - B2 B2^T||_F for orthonormal bases of equal shape."""
    b1, b2 = _check_pair(b1, b2)
    return float(np.linalg.norm(b1 @ b1.T - b2 @ b2.T) / np.sqrt(2.0))


def principal_angle_dist_complement(b1, b2):
    """Same distance computed as ||B1^T B2_perp||_F."""
    b1, b2 = _check_pair(b1, b2)
    if b1.shape[1] == b1.shape[0]:
        return 0.0
    return float(np.linalg.norm(b1.T @ orthonormal_complement(b2)))


def diversity_metrics(delta_theta_star, k, n_users):
    """Condition number ``nu = s_k^2 / N`` and tail energy ``sum_{i>k} s_i^2``."""
    a = as_matrix(delta_theta_star, "delta_theta_star")
    _check_rank(k, a)
    if n_users < 1 or a.shape[1] % n_users:
        raise InvalidInputError(f"{a.shape[1]} columns do not split into {n_users} users")
    s = np.linalg.svd(a, compute_uv=False)
    return DiversitySummary(
        nu=float(s[k - 1] ** 2 / n_users),
        tail=float(np.sum(s[k:] ** 2)),
        spectrum=s,
        k=k,
        n_users=n_users,
    )


def haar_orthonormal(rng, d, r):
    """d x r matrix with Haar-distributed orthonormal columns."""
    q, rr = np.linalg.qr(rng.standard_normal((d, r)))
    return q * np.sign(np.diag(rr))


def generate_planted(d1, d2, n_users, k, spectrum, rng):
    """Random d1 x (N d2) matrix whose singular values are ``spectrum``.

    Trailing singular values not listed are zero.
    """
    s = np.asarray(spectrum, dtype=float)
    width = n_users * d2
    r = min(d1, width)
    if s.ndim != 1 or len(s) == 0 or len(s) > r:
        raise InvalidInputError(f"spectrum length must be in [1, {r}]")
    if not np.all(np.isfinite(s)) or np.any(s < 0) or np.any(np.diff(s) > 0):
        raise InvalidInputError("spectrum must be finite, non-negative and non-increasing")
    if not (1 <= k <= r):
        raise InvalidInputError(f"rank k={k} outside [1, {r}]")
    u = haar_orthonormal(rng, d1, len(s))
    v = haar_orthonormal(rng, width, len(s))
    return (u * s) @ v.T
