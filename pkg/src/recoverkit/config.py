"""JSON experiment configs: strict validation, defaults echoed back.

A config document looks like::

    {"format_version": 1, "task": "train-curriculum", "seed": 0,
     "output_dir": "runs/cur", "curriculum": {"iterations": 20}}

``format_version``, ``task``, ``seed`` and ``output_dir`` are required.  Every
other top-level key must be one of the blocks the task declares; each block is
checked field by field against its dataclass, recursively.
"""
from __future__ import annotations

import dataclasses
import json
import os
from pathlib import Path

import numpy as np

from .curriculum import TrainCurriculumConfig
from .dp import GridSpec
from .eap import EAPConfig, EnvRanges
from .envs.cartpole import GaussianStart
from .mace import MaceConfig
from .relay import RelayConfig
from .seeding import SEED_ENV_VAR

FORMAT_VERSION = 1
REQUIRED = ("format_version", "task", "seed", "output_dir")


class ConfigError(ValueError):
    def __init__(self, message, fields=()):
        super().__init__(message)
        self.fields = list(fields)

    def to_dict(self):
        return {"error": str(self), "fields": self.fields}


@dataclasses.dataclass
class FallSetup:
    n_parts: int = 4
    seed_grid: GridSpec = dataclasses.field(default_factory=lambda: GridSpec(theta2_bins=3, delta_bins=3, rdot_bins=2))
    test_states: int = 100


@dataclasses.dataclass
class PlanSetup:
    n_parts: int = 4
    grid: GridSpec = dataclasses.field(default_factory=GridSpec)
    test_states: int = 100
    policy: str = None              # optional trained MACE net for the comparison report


@dataclasses.dataclass
class StabilitySetup:
    policy: str = ""                # curriculum policy artifact
    directions: int = 8
    trials: int = 20
    omega_max: float = 64.0
    resolution: float = 0.25


@dataclasses.dataclass
class RelayEvalSetup:
    probes: int = 50
    train_one: bool = True          # also train the single-policy baseline on the same budget
    threshold_rollouts: int = 100


@dataclasses.dataclass
class EnvSetup:
    n_train: int = 6
    n_validation: int = 5
    env_seed: int = 0
    ranges: EnvRanges = dataclasses.field(default_factory=EnvRanges)


@dataclasses.dataclass
class ZeroShotSetup:
    policies: list = dataclasses.field(default_factory=list)    # policy artifact paths
    probes: int = 20
    stability: bool = False


@dataclasses.dataclass
class CompareSetup:
    reports: list = dataclasses.field(default_factory=list)     # CSV paths
    bins: int = 10
    svg: bool = True


@dataclasses.dataclass
class PlotSetup:
    roa: list = dataclasses.field(default_factory=list)         # RoA CSV paths


# blocks each task accepts (block name -> dataclass)
TASK_BLOCKS = {
    "train-fall": {"fall": FallSetup, "mace": MaceConfig},
    "plan-fall": {"plan": PlanSetup},
    "train-curriculum": {"curriculum": TrainCurriculumConfig},
    "eval-stability": {"stability": StabilitySetup},
    "train-relay": {"relay": RelayConfig, "evaluation": RelayEvalSetup},
    "train-eap": {"envs": EnvSetup, "eap": EAPConfig},
    "train-dr": {"envs": EnvSetup, "eap": EAPConfig},
    "train-up": {"envs": EnvSetup, "eap": EAPConfig},
    "eval-zeroshot": {"envs": EnvSetup, "zeroshot": ZeroShotSetup},
    "compare": {"compare": CompareSetup},
    "plot-roa": {"plot": PlotSetup},
}
TOP_LEVEL_OPTIONAL = ("sample_budget",)


def _field_types(cls):
    hints = {}
    for f in dataclasses.fields(cls):
        default = None
        if f.default is not dataclasses.MISSING:
            default = f.default
        elif f.default_factory is not dataclasses.MISSING:
            default = f.default_factory()
        hints[f.name] = default
    return hints


def build(cls, doc, path):
    """Instantiate dataclass ``cls`` from ``doc``; nested dataclass fields
    (and GaussianStart) are built from nested dicts."""
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path} must be an object", [path])
    defaults = _field_types(cls)
    unknown = sorted(set(doc) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown keys in {path}: {', '.join(unknown)}",
                          [f"{path}.{k}" for k in unknown])
    kwargs = {}
    for name, value in doc.items():
        default = defaults[name]
        where = f"{path}.{name}"
        if dataclasses.is_dataclass(default) and not isinstance(default, type):
            kwargs[name] = build(type(default), value, where)
        elif isinstance(default, GaussianStart):
            try:
                kwargs[name] = GaussianStart(value["mean"], value["cov"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"{where}: expected {{mean, cov}} ({exc})", [where]) from exc
        elif isinstance(default, tuple) and isinstance(value, list):
            kwargs[name] = tuple(float(v) if v in ("inf", "-inf") else v for v in value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}", [path]) from exc


def to_plain(obj):
    """JSON-ready view of dataclasses, numpy arrays and GaussianStart."""
    if isinstance(obj, GaussianStart):
        return obj.to_dict()
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and np.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    return obj


class Resolved:
    """Validated config: ``blocks`` maps block name -> dataclass instance."""

    def __init__(self, task, seed, output_dir, blocks, sample_budget=None, seed_overridden=False):
        self.task, self.seed, self.output_dir = task, seed, output_dir
        self.blocks, self.sample_budget = blocks, sample_budget
        self.seed_overridden = seed_overridden

    def __getitem__(self, name):
        return self.blocks[name]

    def to_dict(self):
        d = {"format_version": FORMAT_VERSION, "task": self.task, "seed": self.seed,
             "output_dir": self.output_dir, "sample_budget": self.sample_budget}
        d.update({k: to_plain(v) for k, v in self.blocks.items()})
        return d


def resolve(doc, task=None):
    """Validate a config document (already parsed JSON) for ``task``."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    missing = [k for k in REQUIRED if k not in doc]
    if missing:
        raise ConfigError(f"missing required field(s): {', '.join(missing)}", missing)
    if doc["format_version"] != FORMAT_VERSION:
        raise ConfigError(f"unsupported format_version {doc['format_version']!r}", ["format_version"])
    if task is not None and doc["task"] != task:
        raise ConfigError(f"config is for task {doc['task']!r}, not {task!r}", ["task"])
    task = doc["task"]
    if task not in TASK_BLOCKS:
        raise ConfigError(f"unknown task {task!r}", ["task"])
    blocks = TASK_BLOCKS[task]
    unknown = sorted(set(doc) - set(REQUIRED) - set(TOP_LEVEL_OPTIONAL) - set(blocks))
    if unknown:
        raise ConfigError(f"unknown keys: {', '.join(unknown)}", unknown)
    if not isinstance(doc["seed"], int) or isinstance(doc["seed"], bool):
        raise ConfigError("seed must be an integer", ["seed"])
    seed, overridden = doc["seed"], False
    env = os.environ.get(SEED_ENV_VAR)
    if env not in (None, ""):
        try:
            seed, overridden = int(env), True
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env!r}", [SEED_ENV_VAR]) from exc
    built = {name: build(cls, doc.get(name), name) for name, cls in blocks.items()}
    budget = doc.get("sample_budget")
    if budget is not None and (not isinstance(budget, int) or budget < 0):
        raise ConfigError("sample_budget must be a non-negative integer", ["sample_budget"])
    if budget is not None and "eap" in built:
        built["eap"].sample_budget = budget
    return Resolved(task, seed, str(doc["output_dir"]), built, budget, overridden)


def load(path, task=None):
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}", ["config"]) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}", ["config"]) from exc
    return resolve(doc, task)


def template(task, output_dir=None):
    """Fully populated default config for ``task``."""
    doc = {"format_version": FORMAT_VERSION, "task": task, "seed": 0,
           "output_dir": output_dir or f"runs/{task}"}
    return resolve(doc).to_dict()
