"""Experiment configuration: one YAML document per experiment, CLI flags on top."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from lamina.errors import ConfigError

EXPERIMENTS = (
    "baseline",
    "decision-linear",
    "least-squares-tp",
    "linear-tp",
    "fa",
    "dfa",
    "neural-decision",
)


@dataclass
class ExperimentConfig:
    """Everything that determines a run besides the data.

    ``params`` holds the per-layer hyperparameters the experiment builder
    reads (learning rate, ridge lambda, population size, ...).
    ``batch_schedule="double"`` doubles the batch size every
    ``double_every`` epochs.
    """

    name: str
    seed: int = 0
    epochs: int = 3
    batch_size: int = 128
    batch_schedule: str = "fixed"
    double_every: int = 2
    step_order: str = "step_x_first"
    diagnostics: bool = False
    description: str = ""
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.name!r}; valid names: {', '.join(EXPERIMENTS)}")
        if self.batch_schedule not in ("fixed", "double"):
            raise ConfigError(f"unknown batch schedule {self.batch_schedule!r}")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch size must be positive")

    def batch_size_at(self, epoch):
        """Batch size used in 1-based ``epoch``."""
        if self.batch_schedule == "fixed":
            return self.batch_size
        return self.batch_size * 2 ** ((epoch - 1) // self.double_every)

    def to_dict(self):
        return dataclasses.asdict(self)

    def replace(self, **changes):
        params = dict(self.params)
        top = {}
        names = {f.name for f in dataclasses.fields(self)}
        for key, value in changes.items():
            if value is None:
                continue
            if key in names:
                top[key] = value
            else:
                params[key] = value
        return dataclasses.replace(self, params=params, **top)


def _parse(doc, origin):
    if not isinstance(doc, dict):
        raise ConfigError(f"{origin}: expected a mapping at the top level")
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(doc) - names
    if unknown:
        raise ConfigError(f"{origin}: unknown keys {sorted(unknown)}")
    if "name" not in doc:
        raise ConfigError(f"{origin}: missing 'name'")
    return ExperimentConfig(**doc)


def config_text(name):
    if name not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {name!r}; valid names: {', '.join(EXPERIMENTS)}")
    return resources.files("lamina.configs").joinpath(f"{name}.yaml").read_text()


def load_config(name=None, path=None, **overrides):
    """Load the packaged config for ``name`` (or a file at ``path``) and apply overrides."""
    if path is not None:
        path = Path(path)
        config = _parse(yaml.safe_load(path.read_text()), str(path))
        if name is not None and name != config.name:
            raise ConfigError(f"{path} configures {config.name!r}, not {name!r}")
    elif name is not None:
        config = _parse(yaml.safe_load(config_text(name)), f"{name}.yaml")
    else:
        raise ConfigError("need an experiment name or a config path")
    return config.replace(**overrides)
