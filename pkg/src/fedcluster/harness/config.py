"""Experiment configuration: YAML (or JSON) files with a versioned schema.

Every section is a dataclass; unknown keys anywhere are rejected so typos
fail fast. See the README for the full key reference.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from ..errors import ConfigError

SCHEMA_VERSION = 1
KINDS = ("sim-table", "sim-curve", "optimize-l2gd", "optimize-al2sgd", "hlm-estimators", "logistic-synthetic")


@dataclass
class HlmSection:
    d: int = 20
    clusters: int = 20
    clients_per_cluster: int = 20
    cluster_sizes: list | None = None  # overrides clusters x clients_per_cluster
    sigma_bar_sq: float = 1.0
    sigma_j_sq: Any = 1.0
    sigma_i_sq: Any = 1.0
    theta_star_bar: Any = 0.0
    design: str = "gaussian"

    def sizes(self) -> tuple:
        if self.cluster_sizes is not None:
            return tuple(int(s) for s in self.cluster_sizes)
        return (int(self.clients_per_cluster),) * int(self.clusters)


@dataclass
class PenaltySection:
    """``lam`` / ``gamma`` of the penalized estimator; ``auto`` matches the model variances."""

    lam: Any = 1.0
    gamma: Any = 1.0


@dataclass
class SolverSection:
    """How ``our`` is computed: exactly (``closed-form``) or by the single-coin optimizer."""

    kind: str = "simple"
    p: float = 0.1
    eta: Any = 1e-4  # number, or "auto" for the stability step of the single-coin schedule
    T: int = 50_000

    def __post_init__(self):
        if self.kind not in ("simple", "closed-form"):
            raise ConfigError(f"solver.kind must be 'simple' or 'closed-form', got {self.kind!r}")
        if not 0 < self.p < 1:
            raise ConfigError("solver.p must lie in (0, 1)")
        if self.T < 1:
            raise ConfigError("solver.T must be positive")


@dataclass
class SingleClusterSection:
    lam: float | None = None  # fixed penalty; None selects it by cross-validation
    grid_low: float = 0.01
    grid_high: float = 2.0
    grid_points: int = 20
    holdout: float = 0.2
    min_rows: int = 5
    fallback: float = 1.0


@dataclass
class ProblemSection:
    """Random clustered least-squares instance for the optimizer experiments."""

    sizes: list = field(default_factory=lambda: [4, 4, 4])
    d: int = 4
    n_obs: int = 8
    seed: int = 0
    gamma: Any = field(default_factory=lambda: [0.5, 2.0])
    alpha: Any = field(default_factory=lambda: [0.1, 0.9])
    noise_var: float = 1.0
    condition: float | None = None


@dataclass
class ScheduleSection:
    """``auto`` fields are filled by the tuners."""

    p0: Any = "auto"
    p: Any = "auto"
    tau: Any = "auto"
    eta: Any = "auto"
    mode: str = "async"
    rho: float = 0.2
    safe_step: bool = False


@dataclass
class LogisticSection:
    d: int = 5
    clusters: int = 4
    clients_per_cluster: int = 10
    n_train: int = 40
    n_test: int = 200
    sigma_bar_sq: float = 1.0
    sigma_j_sq: float = 1.0
    theta_star_bar: Any = 0.0
    ridge: float = 1e-4
    lam: float = 1.0
    gamma: float = 1.0
    degenerate_clients: int = 0  # clients whose training labels are all one class


@dataclass
class ExperimentConfig:
    kind: str
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    replications: int = 5
    output: str = "out"
    m_grid: list = field(default_factory=lambda: [10, 100])
    methods: list | None = None
    hlm: HlmSection = field(default_factory=HlmSection)
    penalty: PenaltySection = field(default_factory=PenaltySection)
    solver: SolverSection = field(default_factory=SolverSection)
    single_cluster: SingleClusterSection = field(default_factory=SingleClusterSection)
    problem: ProblemSection = field(default_factory=ProblemSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    logistic: LogisticSection = field(default_factory=LogisticSection)
    T: int = 1000
    record_every: int = 10
    target: int = 0  # target client of the GLS comparison

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}; this build reads {SCHEMA_VERSION}")
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        if self.replications < 1:
            raise ConfigError("replications must be at least 1")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        self.m_grid = [int(m) for m in self.m_grid]
        if not self.m_grid or min(self.m_grid) < 1:
            raise ConfigError("m_grid needs positive sample counts")
        if self.methods is None:
            self.methods = list(DEFAULT_METHODS[self.kind])
        allowed = ALLOWED_METHODS[self.kind]
        bad = [m for m in self.methods if m not in allowed]
        if bad:
            raise ConfigError(f"methods {bad} are not available for {self.kind}; choose from {allowed}")


DEFAULT_METHODS = {
    "sim-table": ("our", "lt", "sm", "sc"),
    "sim-curve": ("our", "lt", "sm", "sc"),
    "hlm-estimators": ("our", "lt", "sm", "gls"),
    "logistic-synthetic": ("our", "lt", "sm"),
    "optimize-l2gd": ("l2gd",),
    "optimize-al2sgd": ("al2sgd",),
}
ALLOWED_METHODS = {
    "sim-table": ("our", "lt", "sm", "sc"),
    "sim-curve": ("our", "lt", "sm", "sc"),
    "hlm-estimators": ("our", "lt", "sm", "sc", "gls"),
    "logistic-synthetic": ("our", "lt", "sm"),
    "optimize-l2gd": ("l2gd",),
    "optimize-al2sgd": ("al2sgd",),
}

#: per-kind defaults that differ from the field defaults
KIND_DEFAULTS = {
    "sim-curve": {"m_grid": [1, 5, 10, 25, 100, 200], "replications": 50, "solver": {"kind": "closed-form"}},
    "hlm-estimators": {"replications": 500, "m_grid": [10],
                       "hlm": {"d": 3, "clusters": 3, "clients_per_cluster": 3}, "penalty": {"lam": "auto", "gamma": "auto"},
                       "solver": {"kind": "closed-form"}},
    "logistic-synthetic": {"replications": 3, "solver": {"kind": "simple", "p": 0.1, "eta": "auto", "T": 20_000}},
}

_SECTIONS = {
    "hlm": HlmSection,
    "penalty": PenaltySection,
    "solver": SolverSection,
    "single_cluster": SingleClusterSection,
    "problem": ProblemSection,
    "schedule": ScheduleSection,
    "logistic": LogisticSection,
}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for key, val in over.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict) or "kind" not in data:
        raise ConfigError("config must be a mapping with a 'kind' key")
    data = _merge(KIND_DEFAULTS.get(data["kind"], {}), data)
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(data) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs = {}
    for key, val in data.items():
        kwargs[key] = _build(_SECTIONS[key], val, key) if key in _SECTIONS else val
    try:
        return ExperimentConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    return config_from_dict(data)


def default_config(kind: str = "sim-table") -> ExperimentConfig:
    return config_from_dict({"kind": kind})


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)
