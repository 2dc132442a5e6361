"""Seeded end-to-end runs: synthesise, train, plan, diagnose.

Every random draw is keyed by the config seed and a purpose tag, so one
``(config, algo)`` pair always yields the same row, whichever worker runs it.
"""

import csv
import dataclasses
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .config import ALGOS, to_dict
from .data import generate_dataset, synthesize_ground_truth, tail_spectrum
from .diagnostics import davis_kahan_ratio, pref_accuracy, subspace_error
from .errors import InvalidInputError, ShareLoraError, UnsupportedConfigurationError
from .linalg import diversity_metrics
from .mdp import make_random_mdp, uniform_policy
from .planner import (
    ConfidenceSet,
    PlannerReport,
    ZetaInputs,
    compute_zeta,
    frank_wolfe_plan,
    pessimistic_value,
    value_gap,
)
from .reward import SharedLoraModel
from .rng import stream
from .train import init_for, train_baseline, train_share_lora

BASELINE_FOR = {"local": "lora_local", "global": "lora_global", "full": "full_param"}


def reference_policy(mdp, kind, seed, tag):
    if kind == "uniform":
        return uniform_policy(mdp)
    rng = stream(seed, tag)
    p = rng.dirichlet(np.ones(mdp.n_actions), size=(mdp.horizon, mdp.n_states))
    return p


def synthesize(cfg):
    """(mdp, truth, dataset, mu0, mu1) for a config."""
    d, s, m = cfg.dims, cfg.spectrum, cfg.mdp
    mdp = make_random_mdp(m.n_states, m.n_actions, m.horizon, m.feature_scale,
                          stream(cfg.seed, "mdp"), dims=(d.d1, d.d2))
    spectrum = tail_spectrum(s.leading, s.tail_energy, d.k_true, min(d.d1, d.n_users * d.d2))
    truth = synthesize_ground_truth(d.d1, d.d2, d.n_users, d.k_true, spectrum, cfg.data.theta_init,
                                    cfg.data.frob_bound, stream(cfg.seed, "truth"))
    mu0 = reference_policy(mdp, cfg.data.mu0, cfg.seed, "mu0")
    mu1 = reference_policy(mdp, cfg.data.mu1, cfg.seed, "mu1")
    ds = generate_dataset(mdp, truth, cfg.data.n_pairs, mu0, mu1, cfg.model.reward_head(), cfg.seed,
                          to_dict(cfg))
    return mdp, truth, ds, mu0, mu1


def train(ds, cfg, algo, train_cfg=None):
    """Fit the model selected by ``algo``; returns (model, TrainReport).

    The experiment seed replaces ``train.seed`` so that initialisation and
    shuffling vary with the cell seed.
    """
    if algo not in ALGOS:
        raise InvalidInputError(f"algo must be one of {ALGOS}, got {algo!r}")
    tc = dataclasses.replace(train_cfg or cfg.train, seed=cfg.seed)
    head, bound, k = cfg.model.reward_head(), cfg.model.frob_bound, cfg.dims.k_model
    if algo in ("share-left", "share-right"):
        mode = algo.replace("-", "_")
        return train_share_lora(ds, init_for(ds, k, tc, mode, bound, head), tc)
    return train_baseline(ds, BASELINE_FOR[algo], tc, rank=k, frob_bound=bound, head=head)


def zeta_for(cfg, n_users, n_pairs, delta_star):
    """Squared radius from the diversity of ``delta_star`` and the plan settings."""
    div = diversity_metrics(delta_star, cfg.dims.k_model, n_users)
    z = ZetaInputs(n_users, n_pairs, div.nu, div.tail, cfg.dims.k_model, cfg.dims.d1, cfg.dims.d2,
                   cfg.plan.delta, zeta_scale=cfg.plan.zeta_scale)
    return compute_zeta(z)


def plan(mdp, model, cfg, zeta, mu_ref, truth_deltas=None):
    """Per-user pessimistic policies; value gaps need ``truth_deltas``."""
    if model.head.kind != "linear":
        raise UnsupportedConfigurationError("planning needs a linear reward head")
    p = cfg.plan
    deltas = model.deltas()
    reports, policies = [], []
    for i in range(model.n_users):
        cs = ConfidenceSet(i, deltas[i], zeta, model.theta_init)
        res = frank_wolfe_plan(mdp, cs, mu_ref, p.fw_iters, p.gap_tol, p.step)
        gap = math.nan
        if truth_deltas is not None:
            gap = value_gap(mdp, None, res.policy, model.theta_init + truth_deltas[i], model.head)
        pess = pessimistic_value(mdp, res.occupancy, cs, mu_ref, is_occupancy=True)
        reports.append(PlannerReport(i, zeta, res.iterations, res.fw_gap, pess, gap))
        policies.append(res.policy)
    return reports, policies


SWEEP_FIELDS = (
    "seed", "N", "N_p", "k", "d1", "d2", "tail", "nu", "dist_b", "dk_ratio", "acc_share",
    "acc_local", "acc_global", "mean_value_gap", "zeta", "fw_gap_max", "ll_final", "wall_ms",
    "algo", "error",
)


@dataclass
class SweepRow:
    seed: int
    N: int
    N_p: int
    k: int
    d1: int
    d2: int
    tail: float = math.nan
    nu: float = math.nan
    dist_b: float = math.nan
    dk_ratio: float = math.nan
    acc_share: float = math.nan
    acc_local: float = math.nan
    acc_global: float = math.nan
    mean_value_gap: float = math.nan
    zeta: float = math.nan
    fw_gap_max: float = math.nan
    ll_final: float = math.nan
    wall_ms: float = math.nan
    algo: str = ""
    error: str = ""

    def cells(self):
        return [format_cell(getattr(self, name)) for name in SWEEP_FIELDS]


def format_cell(v):
    """Shortest round-trip decimal for floats, ``nan`` for missing values."""
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def parse_row(record):
    """Inverse of :meth:`SweepRow.cells` for one ``csv.DictReader`` record."""
    kw = {}
    for f in dataclasses.fields(SweepRow):
        raw = record[f.name]
        kw[f.name] = raw if f.type is str or f.type == "str" else (
            int(raw) if f.type in (int, "int") else float(raw))
    return SweepRow(**kw)


def run_cell(cfg, algo, timing=False):
    """One sweep row. Failures are caught and recorded in the ``error`` column."""
    d = cfg.dims
    row = SweepRow(cfg.seed, d.n_users, cfg.data.n_pairs, d.k_model, d.d1, d.d2, algo=algo)
    start = time.perf_counter()
    try:
        mdp, truth, ds, mu0, _ = synthesize(cfg)
        row.tail = truth.diversity.tail
        row.nu = truth.diversity.nu
        tr, te = ds.split(cfg.data.test_fraction)
        model, report = train(tr, cfg, algo)
        row.ll_final = report.log_likelihood[-1] if report.log_likelihood else math.nan
        if te.n_pairs > 0:
            acc = pref_accuracy(model, te).mean
            column = {"local": "acc_local", "global": "acc_global"}.get(algo, "acc_share")
            setattr(row, column, acc)
        if isinstance(model, SharedLoraModel):
            row.dist_b = subspace_error(model, truth)
            row.dk_ratio = davis_kahan_ratio(model, truth)
        if model.head.kind == "linear":
            zeta = zeta_for(cfg, d.n_users, tr.n_pairs, truth.delta_theta_star)
            reports, _ = plan(mdp, model, cfg, zeta, mu0, truth.user_deltas)
            row.zeta = zeta
            row.fw_gap_max = max(r.fw_gap for r in reports)
            row.mean_value_gap = float(np.mean([r.value_gap for r in reports]))
    except ShareLoraError as exc:
        row.error = f"{type(exc).__name__}: {exc}"
    if timing:
        row.wall_ms = 1000.0 * (time.perf_counter() - start)
    return row


GRID_KEYS = {"n_pairs": "data.n_pairs", "n_users": "dims.n_users", "tail_energy": "spectrum.tail_energy"}


def expand_grid(base, grid, seeds):
    """Cartesian product in a fixed order: n_pairs, n_users, tail_energy, algo, seed."""
    axes = {key: list(grid.get(key, [None])) for key in (*GRID_KEYS, "algo")}
    cells = []
    for n_pairs in axes["n_pairs"]:
        for n_users in axes["n_users"]:
            for tail in axes["tail_energy"]:
                for algo in axes["algo"]:
                    for seed in seeds:
                        changes = {"seed": seed}
                        for key, value in (("n_pairs", n_pairs), ("n_users", n_users), ("tail_energy", tail)):
                            if value is not None:
                                changes[GRID_KEYS[key]] = value
                        cells.append((base.replace(**changes), algo or "share-left"))
    return cells


def _run(args):
    return run_cell(*args)


def sweep(cells, out_csv, threads=1, timing=False):
    """Run cells on a bounded pool and append rows to ``out_csv`` in cell order.

    Each row is flushed and synced before the next is written, so an
    interrupted sweep leaves a valid CSV prefix.
    """
    rows = []
    with open(out_csv, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_FIELDS)
        fh.flush()
        jobs = [(cfg, algo, timing) for cfg, algo in cells]
        if threads <= 1:
            results = map(_run, jobs)
            pool = None
        else:
            pool = ProcessPoolExecutor(max_workers=threads)
            results = pool.map(_run, jobs)
        try:
            for row in results:
                writer.writerow(row.cells())
                fh.flush()
                os.fsync(fh.fileno())
                rows.append(row)
        finally:
            if pool is not None:
                pool.shutdown(cancel_futures=True)
    return rows


def read_sweep(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SWEEP_FIELDS:
            raise InvalidInputError(f"{path}: header does not match the sweep schema")
        return [parse_row(r) for r in reader]


def calibrate_zeta_scale(capture_ratios, coverage=0.9):
    """Smallest scale capturing at least ``coverage`` of the given instances.

    ``capture_ratios`` holds ``||Delta_hat_i - Delta*_i||_F^2 / zeta(scale=1)``
    per instance; the truth is captured at scale ``s`` iff ratio <= s^2.
    """
    r = np.sort(np.asarray(capture_ratios, dtype=float))
    if r.size == 0:
        raise InvalidInputError("no instances to calibrate on")
    idx = max(0, math.ceil(coverage * r.size) - 1)
    return float(np.sqrt(r[idx]))
