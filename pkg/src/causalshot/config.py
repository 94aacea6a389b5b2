"""Run configuration: validation, JSON round-trip and flag overrides."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from . import backbone, training
from .causality import SWEEP_P, VARIANTS, CausalityMethod
from .episodes import EXPERIMENTS


class ConfigError(ValueError):
    """Invalid combination of run settings."""


# the sweep's method grid: max plus every Lehmer p, for each causality variant
METHOD_GRID = (("max", None),) + tuple(("lehmer", p) for p in SWEEP_P)


@dataclass
class RunConfig:
    experiment: str = "2way"
    causality: str = "none"
    method: str | None = None
    p: float | None = None
    seed: int = 0
    preset: str = "desk"
    train_tasks: int = 600
    val_tasks: int = 100
    test_tasks: int = 600
    val_every: int = 10
    shot: int = 1
    queries: int = 10
    lr: float = 1e-2
    weight_decay: float = 1e-2
    epochs: int = 100
    decay_epochs: tuple = (20, 80)
    decay_factor: float = 10.0
    margin: float = 1.0
    eval_seed: int = 12345
    data_dir: str | None = None
    out_dir: str = "runs"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        if self.p is not None:
            self.p = float(self.p)
        self.validate()

    def validate(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {self.experiment!r}")
        if self.causality not in VARIANTS:
            raise ConfigError(f"causality must be one of {VARIANTS}, got {self.causality!r}")
        if self.causality in ("none", "ablation-mulcat", "ablation-mulcatbool"):
            if self.method is not None or self.p is not None:
                raise ConfigError(f"causality {self.causality!r} takes no method or p")
        else:
            if self.method is None:
                raise ConfigError(f"causality {self.causality!r} needs --method max|lehmer")
            if self.method == "max" and self.p is not None:
                raise ConfigError("the max method forbids p")
            if self.method == "lehmer" and self.p not in SWEEP_P:
                raise ConfigError(f"lehmer needs p in {SWEEP_P}, got {self.p}")
            if self.method not in ("max", "lehmer"):
                raise ConfigError(f"unknown method {self.method!r}")
        if self.preset not in backbone.PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        for name in ("train_tasks", "val_tasks", "test_tasks", "epochs", "val_every", "shot", "queries"):
            if getattr(self, name) < (0 if name == "val_tasks" else 1):
                raise ConfigError(f"{name} must be positive")
        if self.train_tasks % self.epochs:
            raise ConfigError(f"train_tasks ({self.train_tasks}) must split evenly over {self.epochs} epochs")
        if self.lr <= 0 or self.weight_decay < 0 or self.decay_factor <= 0:
            raise ConfigError("lr and decay_factor must be positive, weight_decay non-negative")

    @property
    def causality_method(self) -> CausalityMethod | None:
        if self.method is None:
            return None
        return CausalityMethod(self.method, self.p)

    @property
    def pesg(self) -> training.PesgConfig:
        return training.PesgConfig(self.lr, self.weight_decay, self.epochs, self.decay_epochs, self.decay_factor)

    @property
    def tasks_per_epoch(self) -> int:
        return self.train_tasks // self.epochs

    @property
    def label(self) -> str:
        if self.method is None:
            return self.causality
        m = "max" if self.method == "max" else f"lehmer{self.p:g}"
        return f"{self.causality}-{m}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decay_epochs"] = list(self.decay_epochs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path, **overrides) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError("config file must hold a JSON object")
        d.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(d)

    def with_(self, **changes) -> "RunConfig":
        return replace(self, **changes)
