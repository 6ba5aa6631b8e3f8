"""Experiment configuration files.

A config is a YAML mapping validated against ``schemas/experiment.schema.json``
(unknown keys are errors). One top-level ``seed`` drives the model init, the
training sampler, the datasets and the search, so equal configs give equal
artifacts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from .cost import total_bitops
from .data import Dataset, gen_synthetic
from .evolve import EvolutionHyper
from .model import LoRASpec
from .space import SearchSpace
from .train import TrainSchedule


class ExperimentConfigError(ValueError):
    pass


@lru_cache(maxsize=None)
def schema() -> dict:
    text = resources.files(__package__).joinpath("schemas/experiment.schema.json").read_text()
    return json.loads(text)


@dataclass(frozen=True)
class SearchSettings:
    budget_fraction: float | None = 0.25
    budget: float | None = None
    val_subset: int = 16
    sweep: int = 8
    hyper: EvolutionHyper = field(default_factory=EvolutionHyper)

    def tau(self, space: SearchSpace) -> float:
        """Absolute BitOPs budget."""
        if self.budget is not None:
            return float(self.budget)
        return self.budget_fraction * total_bitops(space.max_config(), space)


@dataclass(frozen=True)
class DataSettings:
    task: str = "shapes-seg"
    train_size: int = 256
    val_size: int = 64
    resolution: int | None = None  # defaults to the largest search resolution


@dataclass(frozen=True)
class ExperimentConfig:
    space: SearchSpace
    lora: LoRASpec
    schedule: TrainSchedule
    search: SearchSettings
    data: DataSettings
    seed: int = 0
    output_dir: str = "runs/default"
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    def datasets(self) -> tuple[Dataset, Dataset]:
        res = self.data.resolution or self.space.max_resolution
        train = gen_synthetic(self.data.task, self.data.train_size, res, self.seed)
        val = gen_synthetic(self.data.task, self.data.val_size, res, self.seed + 1)
        return train, val

    def rng(self, stream: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, stream])



def _build(raw: dict) -> ExperimentConfig:
    seed = raw.get("seed", 0)
    sp = dict(raw.get("space", {}))
    if "depths" in sp:
        sp["depths"] = tuple(tuple(d) for d in sp["depths"])
    sp.update(raw.get("model", {}))
    space = SearchSpace(**{k: tuple(v) if isinstance(v, list) else v for k, v in sp.items()})
    lora = LoRASpec(**raw.get("lora", {}))
    lora.groups  # raises on a bad mode/modules combination
    schedule = TrainSchedule(seed=seed, **raw.get("schedule", {}))
    s = dict(raw.get("search", {}))
    hyper_keys = set(EvolutionHyper.__dataclass_fields__)
    hyper = EvolutionHyper(**{k: s.pop(k) for k in list(s) if k in hyper_keys})
    if "budget" in s:
        s.setdefault("budget_fraction", None)
    search = SearchSettings(hyper=hyper, **s)
    data = DataSettings(**raw.get("data", {}))
    if data.resolution is not None and data.resolution < space.max_resolution:
        raise ExperimentConfigError("data.resolution is below the largest search resolution")
    cfg = ExperimentConfig(space, lora, schedule, search, data, seed,
                           raw.get("output_dir", "runs/default"), raw)
    return cfg


def parse_config(raw) -> ExperimentConfig:
    """Validate a mapping against the schema and build typed sub-configs."""
    if raw is None:
        raw = {}
    search = raw.get("search") if isinstance(raw, dict) else None
    if isinstance(search, dict) and {"budget", "budget_fraction"} <= search.keys():
        raise ExperimentConfigError("search: give either budget or budget_fraction, not both")
    try:
        jsonschema.validate(raw, schema())
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ExperimentConfigError(f"{where}: {e.message}") from None
    try:
        return _build(raw)
    except (TypeError, ValueError) as e:
        if isinstance(e, ExperimentConfigError):
            raise
        raise ExperimentConfigError(str(e)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as e:
        raise ExperimentConfigError(f"cannot read {path}: {e.strerror}") from None
    except yaml.YAMLError as e:
        raise ExperimentConfigError(f"{path}: invalid YAML: {e}") from None
    return parse_config(raw)
