"""
Experiment configuration
========================

A flat mapping read from JSON or YAML, validated into frozen dataclasses.
`ExperimentConfig.resolved()` gives back the complete mapping with every
default filled in; writing it next to a run and loading it again reproduces
that run.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import numpy as np
import yaml

from .dataset import GeneratorConfig
from .errors import ConfigError
from .loss import LossConfig
from .memory import DEFAULT_WRU_SUBSET, UpdatePolicy
from .metrics import FORGETTING_CONVENTIONS, TIE_CONVENTIONS
from .model import SgdConfig

logger = logging.getLogger(__name__)

DEFAULTS: Dict[str, Any] = {
    "generator": None,
    "dataset": None,
    "tasks": None,
    "split_seed": 0,
    "test_fraction": 0.2,
    "negative_ratio": 1.0,
    "loss": "rldam",
    "base": "hinge",
    "lambda": 1.0,
    "normalized_margin": False,
    "reweighting": "view",
    "eta": 0.05,
    "batch_size": 32,
    "epochs": 30,
    "weight_decay": 1e-5,
    "momentum": 0.0,
    "feature_map": {"kind": "identity", "bias": False},
    "norm_cap": None,
    "seed": 0,
    "memory_size": 120,
    "policy": "wru",
    "wru_subset": DEFAULT_WRU_SUBSET,
    "ties": "strict",
    "forgetting": "max",
    "bound_delta": 0.05,
    "seeds": [0],
    "out": "runs/default",
    "workers": 1,
}

STANDARD_BENCHMARK: Dict[str, Any] = {
    **DEFAULTS,
    "generator": {
        "d": 32,
        "K": 12,
        "T": 4,
        "n_per_task": 800,
        "imbalance_profile": {"min": 0.02, "max": 0.4},
        "label_correlation": 0.5,
        "seed": 2024,
    },
    "tasks": 4,
    "lambda": 1.0,
    "memory_size": 120,
    "batch_size": 32,
    "eta": 0.05,
    "epochs": 30,
    "feature_map": {"kind": "identity", "bias": True},
    "seeds": list(range(10)),
    "out": "runs/standard",
}

# stage codes mixed into every derived seed
STAGES = {"generate": 1, "split": 2, "holdout": 3, "train": 4, "memory": 5}


def derive_seed(*parts: int) -> int:
    """A 63-bit seed that depends on every part"""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


@dataclass(frozen=True)
class ExperimentConfig:
    generator: Optional[GeneratorConfig]
    dataset: Optional[str]
    tasks: int
    split_seed: int
    test_fraction: float
    negative_ratio: float
    loss: LossConfig
    sgd: SgdConfig
    feature_map: Mapping[str, Any]
    norm_cap: Optional[float]
    memory_size: int
    policy: UpdatePolicy
    wru_subset: Optional[int]
    ties: str
    forgetting: str
    bound_delta: float
    seeds: Tuple[int, ...]
    out: str
    workers: int

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ExperimentConfig":
        unknown = sorted(set(data) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        merged = {**DEFAULTS, **data}

        generator = None
        if merged["generator"] is not None:
            generator = GeneratorConfig.from_dict(merged["generator"])
            generator.validate()
        dataset = merged["dataset"]
        if (generator is None) == (dataset is None):
            raise ConfigError("set exactly one of 'generator' and 'dataset'")
        if dataset is not None and not Path(dataset).exists():
            raise ConfigError(f"dataset file not found: {dataset}")

        tasks = merged["tasks"]
        if tasks is None:
            if generator is None:
                raise ConfigError("'tasks' is required with a dataset file")
            tasks = generator.T

        wru_subset = merged["wru_subset"]
        if wru_subset in ("all", None):
            wru_subset = None

        seeds = merged["seeds"]
        if isinstance(seeds, int):
            seeds = [seeds]
        if not seeds:
            raise ConfigError("'seeds' must be nonempty")

        try:
            loss = LossConfig(kind=merged["loss"], base=merged["base"], lam=float(merged["lambda"]),
                              normalized_margin=bool(merged["normalized_margin"]),
                              reweighting=merged["reweighting"])
            sgd = SgdConfig(eta=float(merged["eta"]), batch_size=int(merged["batch_size"]),
                            epochs=int(merged["epochs"]), weight_decay=float(merged["weight_decay"]),
                            momentum=float(merged["momentum"]), seed=int(merged["seed"]))
            policy = UpdatePolicy(merged["policy"])
        except ValueError as e:
            raise ConfigError(str(e)) from e
        sgd.validate()

        cfg = cls(
            generator=generator,
            dataset=dataset,
            tasks=int(tasks),
            split_seed=int(merged["split_seed"]),
            test_fraction=float(merged["test_fraction"]),
            negative_ratio=float(merged["negative_ratio"]),
            loss=loss,
            sgd=sgd,
            feature_map=dict(merged["feature_map"]) if isinstance(merged["feature_map"], Mapping)
            else {"kind": merged["feature_map"]},
            norm_cap=None if merged["norm_cap"] is None else float(merged["norm_cap"]),
            memory_size=int(merged["memory_size"]),
            policy=policy,
            wru_subset=None if wru_subset is None else int(wru_subset),
            ties=merged["ties"],
            forgetting=merged["forgetting"],
            bound_delta=float(merged["bound_delta"]),
            seeds=tuple(int(s) for s in seeds),
            out=str(merged["out"]),
            workers=int(merged["workers"]),
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.tasks < 1:
            raise ConfigError("'tasks' must be >= 1")
        if self.generator is not None and self.tasks > self.generator.K:
            raise ConfigError(f"cannot split {self.generator.K} classes into {self.tasks} tasks")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("'test_fraction' must lie in (0, 1)")
        if self.memory_size < 1:
            raise ConfigError("'memory_size' must be >= 1")
        if self.wru_subset is not None and self.wru_subset < 1:
            raise ConfigError("'wru_subset' must be >= 1 or 'all'")
        if self.ties not in TIE_CONVENTIONS:
            raise ConfigError(f"'ties' must be one of {TIE_CONVENTIONS}")
        if self.forgetting not in FORGETTING_CONVENTIONS:
            raise ConfigError(f"'forgetting' must be one of {FORGETTING_CONVENTIONS}")
        if self.workers < 1:
            raise ConfigError("'workers' must be >= 1")

    def resolved(self) -> Dict[str, Any]:
        return {
            "generator": self.generator.to_dict() if self.generator is not None else None,
            "dataset": self.dataset,
            "tasks": self.tasks,
            "split_seed": self.split_seed,
            "test_fraction": self.test_fraction,
            "negative_ratio": self.negative_ratio,
            "loss": self.loss.kind.value,
            "base": self.loss.base.value,
            "lambda": self.loss.lam,
            "normalized_margin": self.loss.normalized_margin,
            "reweighting": self.loss.reweighting,
            "eta": self.sgd.eta,
            "batch_size": self.sgd.batch_size,
            "epochs": self.sgd.epochs,
            "weight_decay": self.sgd.weight_decay,
            "momentum": self.sgd.momentum,
            "feature_map": dict(self.feature_map),
            "norm_cap": self.norm_cap,
            "seed": self.sgd.seed,
            "memory_size": self.memory_size,
            "policy": self.policy.value,
            "wru_subset": self.wru_subset if self.wru_subset is not None else "all",
            "ties": self.ties,
            "forgetting": self.forgetting,
            "bound_delta": self.bound_delta,
            "seeds": list(self.seeds),
            "out": self.out,
            "workers": self.workers,
        }

    def with_overrides(self, **overrides: Any) -> "ExperimentConfig":
        return ExperimentConfig.from_dict({**self.resolved(), **overrides})


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    return ExperimentConfig.from_dict(read_mapping(path))


def read_mapping(path: Union[str, Path]) -> Dict[str, Any]:
    """Parse a JSON or YAML file into a mapping"""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            if path.suffix == ".json":
                data = json.load(f)
            elif path.suffix in (".yaml", ".yml"):
                data = yaml.safe_load(f)
            else:
                raise ConfigError(f"config must be .json, .yaml or .yml: {path}")
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a mapping at the top level")
    logger.debug(f"Loaded config from {path}")
    return data
