"""``sharelora`` command-line front end.

Subcommands: synth, train, plan, sweep, check. Exit codes: 0 ok,
1 validation error, 2 numerical failure, 3 I/O or file-format error.
``SHARELORA_OUT_DIR`` sets the directory that relative ``--out`` paths
resolve against and ``SHARELORA_THREADS`` the default worker count.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import config as config_mod
from . import io
from .check import run_checks, verdict
from .config import ALGOS, ExperimentConfig
from .data import dataset_mdp, default_reference, load_dataset, save_dataset, split_users
from .errors import (
    ConfigError,
    InvalidInputError,
    NumericalFailureError,
    ParseError,
    ShareLoraError,
)
from .linalg import diversity_metrics
from .pipeline import expand_grid, plan, synthesize, sweep, train, zeta_for
from .reward import assemble_delta_theta, load_checkpoint, save_checkpoint

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3


def _out_path(path):
    base = os.environ.get("SHARELORA_OUT_DIR")
    if base and not os.path.isabs(path):
        os.makedirs(base, exist_ok=True)
        return os.path.join(base, path)
    return path


def _load_config(args):
    cfg = config_mod.load(args.config) if args.config else ExperimentConfig()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "zeta_scale", None) is not None:
        changes["plan.zeta_scale"] = args.zeta_scale
    if getattr(args, "variant", None) is not None:
        changes["train.variant"] = args.variant.upper()
    return cfg.replace(**changes) if changes else cfg


def _print_json(obj):
    sys.stdout.write(io.dumps(obj))


def cmd_synth(args):
    cfg = _load_config(args)
    _, truth, ds, _, _ = synthesize(cfg)
    save_dataset(ds, _out_path(args.out))
    div = truth.diversity
    _print_json({"nu": div.nu, "tail": div.tail, "spectrum": div.spectrum, "scale": truth.scale,
                 "out": args.out})
    return EXIT_OK


def _dims_from_dataset(cfg, ds):
    d1, d2 = ds.dims
    if (cfg.dims.d1, cfg.dims.d2, cfg.dims.n_users) == (d1, d2, ds.n_users):
        return cfg
    return cfg.replace(**{"dims.d1": d1, "dims.d2": d2, "dims.n_users": ds.n_users})


def cmd_train(args):
    cfg = _load_config(args)
    ds = load_dataset(args.dataset)
    cfg = _dims_from_dataset(cfg, ds)
    train_ds, _ = ds.split(cfg.data.test_fraction)
    model, report = train(train_ds, cfg, args.algo)
    out = _out_path(args.out)
    save_checkpoint(model, out)
    root, _ = os.path.splitext(out)
    io.write(root + ".report.json", report.to_dict())
    _print_json({"algo": args.algo, "variant": cfg.train.variant, "epochs_run": report.epochs_run,
                 "final_log_likelihood": report.log_likelihood[-1] if report.log_likelihood else None,
                 "final_grad_norm": report.final_grad_norm, "checkpoint": args.out})
    return EXIT_OK


def cmd_plan(args):
    cfg = _load_config(args)
    ds = load_dataset(args.dataset)
    cfg = _dims_from_dataset(cfg, ds)
    model = load_checkpoint(args.checkpoint)
    mdp = dataset_mdp(ds)
    mu_ref = default_reference(mdp)
    train_ds, _ = ds.split(cfg.data.test_fraction)
    truth = ds.delta_theta_star
    basis = truth if truth is not None else assemble_delta_theta(model)
    zeta = zeta_for(cfg, ds.n_users, train_ds.n_pairs, basis)
    truth_deltas = None if truth is None else split_users(truth, ds.n_users)
    reports, _ = plan(mdp, model, cfg, zeta, mu_ref, truth_deltas)
    div = diversity_metrics(basis, cfg.dims.k_model, ds.n_users)
    doc = {
        "zeta": zeta,
        "zeta_scale": cfg.plan.zeta_scale,
        "nu": div.nu,
        "tail": div.tail,
        "diversity_source": "truth" if truth is not None else "estimate",
        "users": [_report_dict(r, cfg.plan.gap_tol) for r in reports],
    }
    if args.out:
        io.write(_out_path(args.out), doc)
    _print_json(doc)
    return EXIT_OK


def _report_dict(r, gap_tol):
    d = r.to_dict()
    d["gap_flagged"] = bool(r.fw_gap > gap_tol)
    if not np.isfinite(d["value_gap"]):
        d["value_gap"] = None
    return d


def _load_grid(path):
    """A grid document: ``{"base": <config>, "grid": {...}, "seeds": [...]}``."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(path, f"line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "grid config must be an object")
    for key in doc:
        if key not in ("base", "grid", "seeds", "timing"):
            raise ConfigError(key, "unknown field")
    base = config_mod.from_dict(doc.get("base") or {})
    grid = doc.get("grid") or {}
    if not isinstance(grid, dict):
        raise ConfigError("grid", "must be an object")
    for key, values in grid.items():
        if key not in ("n_pairs", "n_users", "tail_energy", "algo"):
            raise ConfigError(f"grid.{key}", "unknown axis")
        if not isinstance(values, list) or not values:
            raise ConfigError(f"grid.{key}", "must be a non-empty list")
        if key == "algo":
            for i, a in enumerate(values):
                if a not in ALGOS:
                    raise ConfigError(f"grid.algo[{i}]", f"must be one of {list(ALGOS)}, got {a!r}")
    seeds = doc.get("seeds", [base.seed])
    if not isinstance(seeds, list) or not seeds or not all(
            isinstance(s, int) and not isinstance(s, bool) and 0 <= s < 1 << 64 for s in seeds):
        raise ConfigError("seeds", "must be a non-empty list of 64-bit non-negative integers")
    return base, grid, seeds, bool(doc.get("timing", False))


def cmd_sweep(args):
    base, grid, seeds, timing = _load_grid(args.config)
    if args.seed is not None:
        seeds = [args.seed]
    if args.algo is not None:
        grid = dict(grid, algo=[args.algo])
    if args.zeta_scale is not None:
        base = base.replace(**{"plan.zeta_scale": args.zeta_scale})
    cells = expand_grid(base, grid, seeds)
    threads = args.threads or int(os.environ.get("SHARELORA_THREADS", "1"))
    rows = sweep(cells, _out_path(args.out), threads=threads, timing=timing)
    failed = sum(1 for r in rows if r.error)
    print(f"{len(rows)} rows written to {args.out} ({failed} with errors)")
    return EXIT_OK


def cmd_check(args):
    results = run_checks()
    report = verdict(results)
    _print_json(report)
    return EXIT_OK if report["passed"] else EXIT_VALIDATION


def build_parser():
    parser = argparse.ArgumentParser(prog="sharelora", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a preference dataset")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit a model to a dataset")
    p.add_argument("dataset")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--algo", choices=ALGOS, default="share-left")
    p.add_argument("--variant", type=str.upper, choices=("SI", "G", "WU"))
    p.add_argument("--out", required=True, help="checkpoint path; the report goes next to it")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("plan", help="pessimistic per-user policies from a checkpoint")
    p.add_argument("dataset")
    p.add_argument("checkpoint")
    p.add_argument("--config")
    p.add_argument("--zeta-scale", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("sweep", help="run a parameter grid and write one CSV row per cell")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--algo", choices=ALGOS)
    p.add_argument("--zeta-scale", type=float)
    p.add_argument("--threads", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("check", help="run the invariant suite")
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InvalidInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalFailureError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, ParseError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ShareLoraError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
