"""Self-contained invariant suite behind ``sharelora check``.

Each check returns a :class:`CheckResult`; a failing check explains itself
in ``detail`` (the gradient check names the worst coordinate). Nothing here
raises on failure, so the suite always produces a full report.
"""

import itertools
import os
import tempfile
from dataclasses import asdict, dataclass

import numpy as np

from .data import (
    generate_dataset,
    load_dataset,
    save_dataset,
    synthesize_ground_truth,
)
from .linalg import (
    haar_orthonormal,
    optimal_rank_k,
    principal_angle_dist,
    principal_angle_dist_complement,
    svd,
)
from .mdp import enumerate_policies, make_random_mdp, occupancy, uniform_policy
from .planner import ConfidenceSet, frank_wolfe_plan, pessimistic_value
from .reward import (
    LINEAR,
    RewardHead,
    grad_log_likelihood,
    init_baseline,
    init_shared_lora,
    load_checkpoint,
    log_likelihood,
    save_checkpoint,
)
from .rng import stream

SEED = 20240611


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def __post_init__(self):
        self.passed = bool(self.passed)


def _random_model(kind, ds, rank, rng, head):
    """A model of ``kind`` with every factor random (user factors too)."""
    if kind in ("share_left", "share_right"):
        m = init_shared_lora(ds.theta_init, ds.n_users, rank, rng, kind, head=head)
    else:
        m = init_baseline(kind, ds.theta_init, ds.n_users, rank, rng, head=head)
    return m.replace(**{k: rng.standard_normal(p.shape) * 0.7 for k, p in m.params().items()})


def small_problem(seed, d1=3, d2=2, n_users=3, n_pairs=6, head=LINEAR):
    """A tiny MDP with a planted truth and a dataset drawn from it."""
    mdp = make_random_mdp(3, 2, 2, 1.0, stream(seed, "check-mdp"), dims=(d1, d2))
    truth = synthesize_ground_truth(d1, d2, n_users, 1, [2.0], "gaussian", 10.0,
                                    stream(seed, "check-truth"))
    pol = uniform_policy(mdp)
    ds = generate_dataset(mdp, truth, n_pairs, pol, pol, head, seed)
    return mdp, truth, ds


MODEL_KINDS = ("share_left", "share_right", "lora_global", "lora_local", "full_param")


def finite_difference_error(model, ds, grad_fn=grad_log_likelihood, step=1e-5):
    """Worst relative error of ``grad_fn`` against central differences.

    Returns ``(error, where)`` with ``where = (param, flat_index)``.
    """
    grads = grad_fn(model, ds)
    worst, where = 0.0, None
    for name, p in model.params().items():
        g = np.asarray(grads[name]).ravel()
        for j in range(p.size):
            plus, minus = p.copy().ravel(), p.copy().ravel()
            plus[j] += step
            minus[j] -= step
            fp = log_likelihood(model.replace(**{name: plus.reshape(p.shape)}), ds)
            fm = log_likelihood(model.replace(**{name: minus.reshape(p.shape)}), ds)
            fd = (fp - fm) / (2 * step)
            err = abs(fd - g[j]) / max(1.0, abs(fd), abs(g[j]))
            if err > worst:
                worst, where = err, (name, j)
    return worst, where


def check_gradients(grad_fn=grad_log_likelihood, n_instances=4, tol=1e-6):
    worst, where, label = 0.0, None, ""
    for t, kind, head in itertools.product(range(n_instances), MODEL_KINDS,
                                           (LINEAR, RewardHead("tanh", 1.5))):
        rng = stream(SEED, "check-grad", t)
        _, _, ds = small_problem(SEED + t, head=head)
        model = _random_model(kind, ds, 2, rng, head)
        err, at = finite_difference_error(model, ds, grad_fn)
        if err > worst:
            worst, where, label = err, at, f"{kind}/{head.kind}/instance {t}"
    ok = worst < tol
    detail = f"max relative error {worst:.3g}"
    if not ok and where is not None:
        detail += f" at {label}, parameter {where[0]!r} coordinate {where[1]}"
    return CheckResult("gradient", ok, detail)


def check_angle_formulas(n=50, tol=1e-9):
    rng = stream(SEED, "check-angle")
    worst = 0.0
    for _ in range(n):
        d = int(rng.integers(2, 31))
        k = int(rng.integers(1, min(5, d - 1) + 1))
        b1, b2 = haar_orthonormal(rng, d, k), haar_orthonormal(rng, d, k)
        worst = max(worst, abs(principal_angle_dist(b1, b2) - principal_angle_dist_complement(b1, b2)))
    return CheckResult("angle_formulas", worst <= tol, f"max disagreement {worst:.3g}")


def check_eckart_young(n=10, competitors=20, tol=1e-9):
    rng = stream(SEED, "check-ey")
    ok, worst = True, 0.0
    for _ in range(n):
        d1, width = int(rng.integers(3, 12)), int(rng.integers(3, 12))
        k = int(rng.integers(1, min(d1, width)))
        m = rng.standard_normal((d1, width))
        res = np.linalg.norm(m - optimal_rank_k(m, k)["theta_diamond"])
        tail = float(np.sum(svd(m).values[k:] ** 2))
        worst = max(worst, abs(res ** 2 - tail) / max(tail, 1e-300))
        for _ in range(competitors):
            comp = rng.standard_normal((d1, k)) @ rng.standard_normal((k, width))
            ok &= res <= np.linalg.norm(m - comp) + 1e-12
    ok &= worst <= tol
    return CheckResult("eckart_young", bool(ok), f"max relative tail mismatch {worst:.3g}")


def check_occupancy(n=10, tol=1e-10):
    worst = 0.0
    for t in range(n):
        rng = stream(SEED, "check-occ", t)
        mdp = make_random_mdp(4, 3, 4, 1.0, rng)
        pol = rng.dirichlet(np.ones(3), size=(4, 4))
        d = occupancy(mdp, pol)
        worst = max(worst, float(np.max(np.abs(d.sum(axis=(1, 2)) - 1))))
        for h in range(mdp.horizon - 1):
            inflow = np.einsum("sa,sat->t", d[h], mdp.transitions[h])
            worst = max(worst, float(np.max(np.abs(d[h + 1].sum(axis=1) - inflow))))
    return CheckResult("occupancy", worst <= tol, f"max conservation error {worst:.3g}")


def check_fw_certificates(n=5, tol=1e-3):
    ok, details = True, []
    for t in range(n):
        mdp, truth, _ = small_problem(SEED + 100 + t)
        center = truth.user_deltas[0]
        theta = truth.theta_init + center
        cs = ConfidenceSet(0, center, 0.1 * float(np.sum(theta ** 2)), truth.theta_init)
        ref = uniform_policy(mdp)
        res = frank_wolfe_plan(mdp, cs, ref)
        best = max(pessimistic_value(mdp, p, cs, ref) for p in enumerate_policies(mdp))
        if not (res.fw_gap < tol and res.value + res.fw_gap >= best - 1e-12):
            ok = False
            details.append(f"instance {t}: gap {res.fw_gap:.3g}, value {res.value:.6g}, best vertex {best:.6g}")
    return CheckResult("fw_certificates", ok, "; ".join(details) or f"{n} instances certified")


def check_round_trips():
    _, _, ds = small_problem(SEED + 200)
    rng = stream(SEED, "check-io")
    model = _random_model("share_left", ds, 2, rng, LINEAR)
    with tempfile.TemporaryDirectory() as tmp:
        p_ds, p_ck = os.path.join(tmp, "ds.json"), os.path.join(tmp, "ck.json")
        save_dataset(ds, p_ds)
        back = load_dataset(p_ds)
        save_checkpoint(model, p_ck)
        m2 = load_checkpoint(p_ck)
    ok = (np.array_equal(back.f0, ds.f0) and np.array_equal(back.f1, ds.f1)
          and np.array_equal(back.labels, ds.labels)
          and np.array_equal(m2.shared, model.shared) and np.array_equal(m2.users, model.users))
    return CheckResult("round_trips", bool(ok), "dataset and checkpoint" + (" identical" if ok else " differ"))


CHECKS = (check_gradients, check_angle_formulas, check_eckart_young, check_occupancy,
          check_fw_certificates, check_round_trips)


def run_checks(grad_fn=None):
    """Run every check; ``grad_fn`` replaces the gradient under test."""
    results = []
    for fn in CHECKS:
        kwargs = {"grad_fn": grad_fn} if fn is check_gradients and grad_fn is not None else {}
        try:
            results.append(fn(**kwargs))
        except Exception as exc:  # a crash is a failed check, not a crashed suite
            results.append(CheckResult(fn.__name__.removeprefix("check_"), False,
                                       f"{type(exc).__name__}: {exc}"))
    return results


def verdict(results):
    return {"passed": all(r.passed for r in results), "checks": [asdict(r) for r in results]}
