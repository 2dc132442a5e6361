"""Experiment configuration documents.

A config is one JSON object with the sections ``dims``, ``spectrum``,
``mdp``, ``data``, ``model``, ``train``, ``plan`` and ``seed``. Every
section and field is optional; missing values take the defaults below.
Validation errors name the full path of the offending field, for example
``dims.k_model``. The top-level ``seed`` drives every random draw of a
run, training included; ``train.seed`` only matters when a
:class:`TrainConfig` is used on its own.
"""

import dataclasses
import json
import math
from dataclasses import dataclass, field

from .errors import ConfigError, InvalidInputError
from .reward import RewardHead
from .train import TrainConfig

ALGOS = ("share-left", "share-right", "local", "global", "full")
REFERENCE_POLICIES = ("uniform", "random")


@dataclass(frozen=True)
class Dims:
    d1: int = 8
    d2: int = 2
    n_users: int = 16
    k_true: int = 2
    k_model: int = 2


@dataclass(frozen=True)
class SpectrumSpec:
    leading: tuple = (20.0, 16.0)
    tail_energy: float = 0.0


@dataclass(frozen=True)
class MdpSpec:
    n_states: int = 8
    n_actions: int = 4
    horizon: int = 3
    feature_scale: float = 1.0


@dataclass(frozen=True)
class DataSpec:
    n_pairs: int = 100
    mu0: str = "uniform"
    mu1: str = "uniform"
    test_fraction: float = 0.2
    theta_init: str = "zero"
    frob_bound: float = math.inf  # bound on the planted user differences


@dataclass(frozen=True)
class ModelSpec:
    head: str = "linear"
    range_r: float = 1.0
    frob_bound: float = math.inf  # bound enforced by the learner

    def reward_head(self):
        return RewardHead(self.head, self.range_r)


@dataclass(frozen=True)
class PlanSpec:
    zeta_scale: float = 1.0
    delta: float = 0.1
    fw_iters: int = 500
    gap_tol: float = 1e-6
    step: str = "monotone"


DEFAULT_TRAIN = TrainConfig(epochs=6000, learning_rate=0.5, momentum=0.9, grad_tol=1e-9)


@dataclass(frozen=True)
class ExperimentConfig:
    dims: Dims = field(default_factory=Dims)
    spectrum: SpectrumSpec = field(default_factory=SpectrumSpec)
    mdp: MdpSpec = field(default_factory=MdpSpec)
    data: DataSpec = field(default_factory=DataSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = DEFAULT_TRAIN
    plan: PlanSpec = field(default_factory=PlanSpec)
    seed: int = 0

    def __post_init__(self):
        validate(self)

    def replace(self, **changes):
        """Copy with dotted-path overrides, e.g. ``replace(**{"data.n_pairs": 64})``."""
        doc = to_dict(self)
        for path, value in changes.items():
            node = doc
            *parents, leaf = path.split(".")
            for p in parents:
                node = node[p]
            node[leaf] = value
        return from_dict(doc)


SECTIONS = {
    "dims": Dims,
    "spectrum": SpectrumSpec,
    "mdp": MdpSpec,
    "data": DataSpec,
    "model": ModelSpec,
    "train": TrainConfig,
    "plan": PlanSpec,
}


def _positive_int(path, v):
    if isinstance(v, bool) or not isinstance(v, int) or v < 1:
        raise ConfigError(path, f"must be a positive integer, got {v!r}")


def _non_negative_int(path, v):
    if isinstance(v, bool) or not isinstance(v, int) or v < 0:
        raise ConfigError(path, f"must be a non-negative integer, got {v!r}")


def _number(path, v, lo=None, lo_open=False, hi=None, hi_open=False, allow_inf=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(path, f"must be a number, got {v!r}")
    if math.isnan(v) or (math.isinf(v) and not allow_inf):
        raise ConfigError(path, f"must be finite, got {v!r}")
    if lo is not None and (v < lo or (lo_open and v == lo)):
        raise ConfigError(path, f"must be {'>' if lo_open else '>='} {lo}, got {v!r}")
    if hi is not None and (v > hi or (hi_open and v == hi)):
        raise ConfigError(path, f"must be {'<' if hi_open else '<='} {hi}, got {v!r}")


def _choice(path, v, options):
    if v not in options:
        raise ConfigError(path, f"must be one of {list(options)}, got {v!r}")


def validate(cfg):
    d = cfg.dims
    for name in ("d1", "d2", "n_users", "k_true", "k_model"):
        _positive_int(f"dims.{name}", getattr(d, name))
    bound = min(d.d1, d.d2 * d.n_users)
    if d.k_model > bound:
        raise ConfigError("dims.k_model", f"must be <= min(d1, d2 * n_users) = {bound}, got {d.k_model}")
    if d.k_true > bound:
        raise ConfigError("dims.k_true", f"must be <= min(d1, d2 * n_users) = {bound}, got {d.k_true}")

    s = cfg.spectrum
    if len(s.leading) != d.k_true:
        raise ConfigError("spectrum.leading", f"must list k_true = {d.k_true} values, got {len(s.leading)}")
    for i, v in enumerate(s.leading):
        _number(f"spectrum.leading[{i}]", v, lo=0)
    if any(a < b for a, b in zip(s.leading, s.leading[1:])):
        raise ConfigError("spectrum.leading", "must be non-increasing")
    _number("spectrum.tail_energy", s.tail_energy, lo=0)
    if s.tail_energy > 0 and bound == d.k_true:
        raise ConfigError("spectrum.tail_energy", "no room for a tail when k_true = min(d1, d2 * n_users)")

    m = cfg.mdp
    for name in ("n_states", "n_actions", "horizon"):
        _positive_int(f"mdp.{name}", getattr(m, name))
    _number("mdp.feature_scale", m.feature_scale, lo=0, lo_open=True)

    dt = cfg.data
    _positive_int("data.n_pairs", dt.n_pairs)
    _choice("data.mu0", dt.mu0, REFERENCE_POLICIES)
    _choice("data.mu1", dt.mu1, REFERENCE_POLICIES)
    _number("data.test_fraction", dt.test_fraction, lo=0, hi=1, hi_open=True)
    if dt.n_pairs - int(round(dt.test_fraction * dt.n_pairs)) < 1:
        raise ConfigError("data.test_fraction", "leaves no training samples")
    _choice("data.theta_init", dt.theta_init, ("zero", "gaussian"))
    _number("data.frob_bound", dt.frob_bound, lo=0, lo_open=True, allow_inf=True)

    mo = cfg.model
    _choice("model.head", mo.head, ("linear", "tanh"))
    _number("model.range_r", mo.range_r, lo=0, lo_open=True)
    _number("model.frob_bound", mo.frob_bound, lo=0, lo_open=True, allow_inf=True)

    if not isinstance(cfg.train, TrainConfig):
        raise ConfigError("train", "must be a TrainConfig")

    p = cfg.plan
    _number("plan.zeta_scale", p.zeta_scale, lo=0)
    _number("plan.delta", p.delta, lo=0, lo_open=True, hi=1)
    _positive_int("plan.fw_iters", p.fw_iters)
    _number("plan.gap_tol", p.gap_tol, lo=0)
    _choice("plan.step", p.step, ("monotone", "classic", "line_search"))

    _non_negative_int("seed", cfg.seed)
    if cfg.seed >= 1 << 64:
        raise ConfigError("seed", "must fit in 64 bits")


def _section(name, cls, raw):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(name, f"must be an object, got {type(raw).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown field")
    values = dict(raw)
    for key in ("frob_bound",):
        if key in values and values[key] is None:
            values[key] = math.inf
    if "leading" in values:
        if not isinstance(values["leading"], list):
            raise ConfigError(f"{name}.leading", "must be a list of numbers")
        values["leading"] = tuple(values["leading"])
    if cls is TrainConfig:
        for key, v in values.items():
            if key in ("variant", "lr_schedule"):
                if not isinstance(v, str):
                    raise ConfigError(f"{name}.{key}", f"must be a string, got {v!r}")
            elif key == "warmup_epochs":
                if v is not None:
                    _non_negative_int(f"{name}.{key}", v)
            elif key in ("learning_rate", "grad_tol", "momentum"):
                _number(f"{name}.{key}", v)
            else:
                _non_negative_int(f"{name}.{key}", v)
        try:
            return cls(**values)
        except InvalidInputError as exc:
            raise ConfigError(name, str(exc)) from None
    return cls(**values)


def from_dict(doc):
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    for key in doc:
        if key not in SECTIONS and key != "seed":
            raise ConfigError(key, "unknown section")
    parts = {name: _section(name, cls, doc.get(name)) for name, cls in SECTIONS.items()}
    return ExperimentConfig(**parts, seed=doc.get("seed", 0))


def to_dict(cfg):
    doc = {}
    for name in SECTIONS:
        sec = dataclasses.asdict(getattr(cfg, name))
        for key, v in sec.items():
            if isinstance(v, float) and math.isinf(v):
                sec[key] = None
            elif isinstance(v, tuple):
                sec[key] = list(v)
        doc[name] = sec
    doc["seed"] = cfg.seed
    return doc


def loads(text, source="<config>"):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(source, f"line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return from_dict(doc)


def load(path):
    """Read and validate a config file; ``OSError`` propagates for missing files."""
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read(), str(path))
