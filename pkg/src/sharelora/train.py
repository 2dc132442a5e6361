"""Projected gradient ascent on the pooled preference log-likelihood.

One optimiser drives every parameterisation. Gradients are averaged per
block before the step: pooled arrays (the shared factor, the global pair)
by the number of samples in the batch, per-user arrays by that user's
sample count. This is a fixed positive rescaling of the plain gradient, so
every step is still an ascent direction; it keeps the learning rate
meaningful across different N and N_p.
"""

import itertools
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidInputError, NumericalFailureError, TooLargeError
from .reward import (
    BaselineModel,
    init_baseline,
    log_likelihood,
    project_frobenius,
    value_and_grad,
    LINEAR,
)
from .rng import stream

VARIANTS = ("SI", "G", "WU")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    warmup_epochs: int | None = None
    variant: str = "SI"
    learning_rate: float = 0.5
    lr_schedule: str = "constant"
    batch_size: int = 1 << 30
    grad_tol: float = 1e-6
    seed: int = 0
    momentum: float = 0.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidInputError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.epochs < 0:
            raise InvalidInputError("epochs must be >= 0")
        if self.warmup_epochs is not None and not 0 <= self.warmup_epochs <= self.epochs:
            raise InvalidInputError("warmup_epochs must lie in [0, epochs]")
        if not self.learning_rate > 0:
            raise InvalidInputError("learning_rate must be positive")
        if self.lr_schedule not in ("constant", "linear_decay"):
            raise InvalidInputError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise InvalidInputError("momentum must lie in [0, 1)")

    def resolved_warmup(self):
        """Warm-up length after applying the variant's defaults.

        G defaults to two thirds of the epochs (two global epochs then one
        personalised epoch), WU to a tenth.
        """
        if self.variant == "SI":
            return 0
        if self.warmup_epochs is not None:
            return self.warmup_epochs
        if self.variant == "G":
            return (2 * self.epochs) // 3
        return min(self.epochs, max(1, self.epochs // 10))


@dataclass
class TrainReport:
    log_likelihood: list = field(default_factory=list)
    final_grad_norm: float = float("nan")
    wall_time: float = 0.0
    epochs_run: int = 0
    warmup_boundary: int = 0

    def to_dict(self):
        return asdict(self)


def _grad_norm(grads):
    return float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))


def _param_norm(model):
    return float(np.sqrt(sum(np.sum(p * p) for p in model.params().values())))


def _scaled_grads(model, ds, weights, with_value=False):
    """Block-averaged gradient for a batch given by 0/1 ``weights`` (None = all)."""
    ll, grads = value_and_grad(model, ds, weights)
    if weights is None:
        per_user = np.full(ds.n_users, float(ds.n_pairs))
    else:
        per_user = weights.sum(axis=1)
    total = per_user.sum()
    out = {}
    for name, scope in model.scopes().items():
        if scope == "pooled":
            out[name] = grads[name] / max(total, 1.0)
        else:
            out[name] = grads[name] / np.maximum(per_user, 1.0)[:, None, None]
    return (ll, out) if with_value else out


def _batches(ds, batch_size, rng):
    """0/1 weight masks covering a seeded permutation of all samples."""
    total = ds.n_users * ds.n_pairs
    if batch_size >= total:
        yield None
        return
    order = rng.permutation(total)
    for start in range(0, total, batch_size):
        w = np.zeros(total)
        w[order[start:start + batch_size]] = 1.0
        yield w.reshape(ds.n_users, ds.n_pairs)


def _lr_at(base, schedule, t, n_epochs):
    if schedule == "linear_decay":
        return base * (1.0 - t / n_epochs)
    return base


def _run_phase(model, ds, n_epochs, base_lr, cfg, shuffle_tag, report, epoch_offset):
    """Run ``n_epochs`` epochs; returns (model, stopped_early)."""
    rng = stream(cfg.seed, shuffle_tag)
    velocity = {name: np.zeros_like(p) for name, p in model.params().items()}
    full = None  # full-batch gradient at the current model, reused by the next step
    for t in range(n_epochs):
        lr = _lr_at(base_lr, cfg.lr_schedule, t, n_epochs)
        for weights in _batches(ds, cfg.batch_size, rng):
            grads = full if (weights is None and full is not None) else _scaled_grads(model, ds, weights)
            params = model.params()
            new = {}
            for name, p in params.items():
                velocity[name] = cfg.momentum * velocity[name] + grads[name]
                new[name] = p + lr * velocity[name]
            model = project_frobenius(model.replace(**new))
        ll, full = _scaled_grads(model, ds, None, with_value=True)
        if not np.isfinite(ll):
            raise NumericalFailureError(f"non-finite log-likelihood at epoch {epoch_offset + t + 1}")
        report.log_likelihood.append(ll)
        report.epochs_run += 1
        gnorm = _grad_norm(full)
        report.final_grad_norm = gnorm
        if gnorm < cfg.grad_tol * max(1.0, _param_norm(model)):
            return model, True
    return model, False


def _global_from_shared(model):
    if model.share_mode == "share_left":
        left, right = model.shared[None], model.users[:1]
    else:
        left, right = model.users[:1], model.shared[None]
    return BaselineModel("lora_global", model.theta_init, model.n_users, left.copy(), right.copy(),
                         model.frob_bound, model.head)


def _shared_from_global(g, template):
    n = template.n_users
    if template.share_mode == "share_left":
        shared, users = g.left[0], np.repeat(g.right, n, axis=0)
    else:
        shared, users = g.right[0], np.repeat(g.left, n, axis=0)
    return template.replace(shared=shared.copy(), users=users)


def train_share_lora(ds, init, cfg):
    """Fit a shared-factor model, optionally after a global warm-up.

    ``cfg.epochs`` counts both phases: the first ``resolved_warmup()``
    epochs train a single global pair on the pooled data, whose factors
    then seed the shared factor and every user factor for the remaining
    epochs. Variant G restarts the personalised phase at a third of the
    learning rate.
    """
    start = time.perf_counter()
    report = TrainReport()
    n_warm = cfg.resolved_warmup()
    report.warmup_boundary = n_warm
    model = project_frobenius(init)
    if cfg.epochs == 0:
        return init, report
    if n_warm > 0:
        glob, _ = _run_phase(_global_from_shared(model), ds, n_warm, cfg.learning_rate, cfg,
                             "shuffle-global", report, 0)
        model = project_frobenius(_shared_from_global(glob, model))
    if cfg.epochs > n_warm:
        lr = cfg.learning_rate / 3.0 if (cfg.variant == "G" and n_warm > 0) else cfg.learning_rate
        model, _ = _run_phase(model, ds, cfg.epochs - n_warm, lr, cfg, "shuffle-share", report, n_warm)
    report.wall_time = time.perf_counter() - start
    return model, report


def train_baseline(ds, kind, cfg, *, rank=None, frob_bound=np.inf, head=LINEAR, init=None):
    """Train a LoRA-global, LoRA-local or full-parameter baseline.

    The initial model comes from the same ``(seed, "init")`` stream as
    :func:`init_for`, so a global baseline and a share-left warm-up with the
    same seed start from identical factors.
    """
    start = time.perf_counter()
    if init is None:
        if kind != "full_param" and rank is None:
            raise InvalidInputError("rank is required for LoRA baselines")
        init = init_baseline(kind, ds.theta_init, ds.n_users, rank or 1, stream(cfg.seed, "init"),
                             frob_bound, head)
    report = TrainReport()
    model = project_frobenius(init)
    if cfg.epochs == 0:
        return init, report
    # One shuffle stream for every baseline: with N = 1 local and global coincide,
    # and the global baseline replays a full-length warm-up exactly.
    model, _ = _run_phase(model, ds, cfg.epochs, cfg.learning_rate, cfg, "shuffle-global", report, 0)
    report.wall_time = time.perf_counter() - start
    return model, report


def init_for(ds, rank, cfg, share_mode="share_left", frob_bound=np.inf, head=LINEAR):
    """Default starting point for :func:`train_share_lora`."""
    from .reward import init_shared_lora

    return init_shared_lora(ds.theta_init, ds.n_users, rank, stream(cfg.seed, "init"), share_mode,
                            frob_bound, head)


def probe_learning_rate(model, ds, lr0=1.0, steps=50, max_halvings=40):
    """Half of the largest ``lr0 / 2^j`` for which ``steps`` full-batch
    steps never decrease the log-likelihood.

    The halving leaves a margin for the curvature growth a factorised model
    sees once it leaves the probed region.
    """
    lr = lr0
    for _ in range(max_halvings):
        m, prev, ok = model, log_likelihood(model, ds), True
        for _ in range(steps):
            grads = _scaled_grads(m, ds, None)
            m = project_frobenius(m.replace(**{k: p + lr * grads[k] for k, p in m.params().items()}))
            cur = log_likelihood(m, ds)
            if cur < prev - 1e-12 * max(1.0, abs(prev)):
                ok = False
                break
            prev = cur
        if ok:
            return lr / 2.0
        lr /= 2.0
    return lr


def mle_bruteforce(ds, template, grid, max_points=1_000_000):
    """Exhaustive grid maximiser of the log-likelihood over a tiny model.

    ``grid`` is a sequence of 1-D coordinate arrays, one per scalar
    parameter of ``template`` (in ``params()`` order, row-major), or a
    single array reused for every parameter. Returns ``(model, value)``.
    """
    params = template.params()
    sizes = [p.size for p in params.values()]
    n_scalars = sum(sizes)
    if n_scalars > 4:
        raise TooLargeError(f"{n_scalars} scalar parameters; the grid oracle allows at most 4")
    axes = list(grid) if isinstance(grid, (list, tuple)) else [np.asarray(grid)] * n_scalars
    if len(axes) != n_scalars:
        raise InvalidInputError(f"expected {n_scalars} grid axes, got {len(axes)}")
    n_points = int(np.prod([len(a) for a in axes]))
    if n_points > max_points:
        raise TooLargeError(f"{n_points} grid points exceed the budget {max_points}")
    best, best_val = None, -np.inf
    names = list(params)
    for point in itertools.product(*axes):
        flat = np.asarray(point, dtype=float)
        new, pos = {}, 0
        for name, size in zip(names, sizes):
            new[name] = flat[pos:pos + size].reshape(params[name].shape)
            pos += size
        model = template.replace(**new)
        val = log_likelihood(model, ds)
        if val > best_val:
            best, best_val = model, val
    return best, best_val
