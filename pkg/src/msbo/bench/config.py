"""Experiment configuration files (YAML).

Example::

    name: demo
    preset: demo2d            # or: dataset: tasks/solubility.csv
    generator_seed: 0         # master seed of the synthetic cascade
    drivers: [msbo, bo, bofn, random]
    seeds: [0, 1, 2]
    budget: 60
    costs: uniform            # or a ratio list such as [1, 10]
    normalise_costs: true     # scale costs so one full cascade costs 1
    metric: regret            # or percentile (dataset tasks)

Optional keys: ``mc_samples``, ``restarts``, ``init_size``,
``min_stage_frequency`` (list, defaults to the preset's), ``cost_weighting``,
``surrogate_mode``, ``minimise`` (dataset tasks), ``workers``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from ..drivers import DRIVERS


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    preset: str | None = None
    dataset: str | None = None
    generator_seed: int = 0
    drivers: list[str] = field(default_factory=lambda: list(DRIVERS))
    seeds: list[int] = field(default_factory=lambda: [0])
    budget: float = 60.0
    costs: str | list[float] = "uniform"
    normalise_costs: bool = True
    metric: str = "regret"
    mc_samples: int = 64
    restarts: int = 8
    init_size: int | None = None
    min_stage_frequency: list[float] | None = None
    cost_weighting: bool = False
    surrogate_mode: str | None = None
    minimise: bool = False
    workers: int = 1

    def __post_init__(self):
        if (self.preset is None) == (self.dataset is None):
            raise ConfigError("give exactly one of 'preset' or 'dataset'")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        self.seeds = [int(s) for s in self.seeds]
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        bad = [d for d in self.drivers if d not in DRIVERS]
        if bad or not self.drivers:
            raise ConfigError(f"drivers must be a nonempty subset of {DRIVERS}; got {self.drivers}")
        if self.metric not in ("regret", "percentile"):
            raise ConfigError("metric must be 'regret' or 'percentile'")
        if self.metric == "percentile" and self.dataset is None:
            raise ConfigError("the percentile metric needs a dataset task")
        if self.budget <= 0:
            raise ConfigError("budget must be positive")
        if isinstance(self.costs, str):
            if self.costs != "uniform":
                raise ConfigError("costs must be 'uniform' or a list of positive ratios")
        else:
            self.costs = [float(c) for c in self.costs]
            if not self.costs or min(self.costs) <= 0:
                raise ConfigError("cost ratios must be positive")

    def stage_costs(self, n_stages: int) -> tuple[float, ...]:
        """Per-stage costs; normalised to sum to 1 unless ``normalise_costs`` is off."""
        ratios = [1.0] * n_stages if self.costs == "uniform" else list(self.costs)
        if len(ratios) != n_stages:
            raise ConfigError(f"{len(ratios)} cost ratios given for a {n_stages}-stage process")
        if not self.normalise_costs:
            return tuple(ratios)
        total = sum(ratios)
        return tuple(r / total for r in ratios)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict, base_dir: Path | None = None) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        data = dict(data)
        if data.get("dataset") and base_dir is not None and not Path(data["dataset"]).is_absolute():
            data["dataset"] = str(base_dir / data["dataset"])
        return cls(**data)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at the top level")
    return ExperimentConfig.from_dict(data, path.parent)
