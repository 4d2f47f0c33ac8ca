"""Experiment configuration: validated, serializable, hashable.

Configs round-trip losslessly through JSON. Unknown keys are rejected so a
typo in a config file fails loudly instead of silently running defaults.
The config hash is the sha256 of a canonical JSON encoding and identifies
the experiment across platforms; the output directory is excluded from it.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

from .optimizers import ALL_MODES, SCHEDULES

PROBLEM_KINDS = ("clusters", "quadratic")


class ConfigError(Exception):
    """Structurally bad configuration: unreadable file, malformed JSON,
    unknown keys, wrong value types."""


@dataclass(frozen=True)
class ProblemConfig:
    kind: str = "clusters"
    dataset_seed: int = 0
    num_domains: int = 4
    num_classes: int = 3
    d_in: int = 2
    per_domain_counts: tuple[int, ...] = (400, 300, 200, 100)
    shift_scale: float = 0.6
    difficulty_skew: float = 1.6
    hidden: int = 16
    quad_dim: int = 2

    def __post_init__(self):
        if self.kind not in PROBLEM_KINDS:
            raise ValueError(f"unknown problem kind {self.kind!r}")
        if self.num_domains < 2:
            raise ValueError("need at least two domains")
        if self.kind == "clusters":
            if self.num_classes < 2:
                raise ValueError("need at least two classes")
            if self.d_in < 2:
                raise ValueError("need at least two feature dimensions")
            if len(self.per_domain_counts) != self.num_domains:
                raise ValueError(
                    f"per_domain_counts must have {self.num_domains} entries"
                )
            if any(n < self.num_classes for n in self.per_domain_counts):
                raise ValueError("every domain needs at least one sample per class")
            if self.shift_scale < 0:
                raise ValueError("shift_scale must be nonnegative")
            if self.difficulty_skew < 1:
                raise ValueError("difficulty_skew must be at least 1")
            if self.hidden < 1:
                raise ValueError("hidden width must be positive")
        else:
            if self.quad_dim < 1:
                raise ValueError("quad_dim must be positive")


@dataclass(frozen=True)
class OptimizerConfig:
    mode: str = "disam"
    rho: float = 0.05
    lam: float = 0.1
    beta: float = 1.0
    eta0: float = 0.1
    schedule: str = "inv_sqrt"

    def __post_init__(self):
        if self.mode not in ALL_MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if self.eta0 <= 0:
            raise ValueError("eta0 must be positive")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    problem: ProblemConfig = ProblemConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    steps: int = 2000
    batch_size: int = 32
    heldout_domain: int | None = 3
    seeds: tuple[int, ...] = (0,)
    out_dir: str = ""

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not self.seeds:
            raise ValueError("need at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if any(s < 0 for s in self.seeds):
            raise ValueError("seeds must be nonnegative")
        if self.problem.kind == "quadratic":
            if self.heldout_domain is not None:
                raise ValueError("quadratic problems have no held-out domain")
        elif self.heldout_domain is not None:
            if not (0 <= self.heldout_domain < self.problem.num_domains):
                raise ValueError(
                    f"heldout_domain must lie in [0, {self.problem.num_domains})"
                )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["problem"]["per_domain_counts"] = list(self.problem.per_domain_counts)
        d["seeds"] = list(self.seeds)
        return d

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")
        canon = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _build_section(cls, data: dict, context: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{context} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {context} keys: {sorted(unknown)}")
    kwargs = dict(data)
    if "per_domain_counts" in kwargs:
        kwargs["per_domain_counts"] = tuple(int(n) for n in kwargs["per_domain_counts"])
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad {context}: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    """Build a validated ExperimentConfig, rejecting unknown keys.

    Value-level violations (negative rho and the like) surface as
    ValueError from the dataclass validators; structural problems raise
    ConfigError.
    """
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs = dict(data)
    if "problem" in kwargs:
        kwargs["problem"] = _build_section(ProblemConfig, kwargs["problem"], "problem")
    if "optimizer" in kwargs:
        kwargs["optimizer"] = _build_section(
            OptimizerConfig, kwargs["optimizer"], "optimizer"
        )
    if "seeds" in kwargs:
        if not isinstance(kwargs["seeds"], (list, tuple)):
            raise ConfigError("seeds must be a list")
        kwargs["seeds"] = tuple(int(s) for s in kwargs["seeds"])
    try:
        return ExperimentConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad config: {exc}") from exc


def config_from_file(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)


def default_toy_config(**overrides) -> ExperimentConfig:
    """The reference experiment: four drifting cluster domains, a small
    tanh network, 2000 inverse-sqrt SGD steps, domain 3 held out."""
    cfg = ExperimentConfig()
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    return cfg


def with_optimizer(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    return dataclasses.replace(
        cfg, optimizer=dataclasses.replace(cfg.optimizer, **changes)
    )
