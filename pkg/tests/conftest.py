"""Shared fixtures for the maucl test suite"""

import numpy as np
import pytest

from maucl.config import ExperimentConfig
from maucl.dataset import GeneratorConfig, MultiLabelDataset, generate_synthetic


def tiny_experiment(out, **overrides) -> ExperimentConfig:
    """A two-task run that trains in well under a second per seed"""
    data = {
        "generator": {
            "d": 6,
            "K": 4,
            "T": 2,
            "n_per_task": 120,
            "imbalance_profile": {"min": 0.1, "max": 0.4},
            "label_correlation": 0.6,
            "seed": 7,
        },
        "epochs": 3,
        "batch_size": 16,
        "memory_size": 20,
        "wru_subset": 16,
        "seeds": [0, 1],
        "out": str(out),
    }
    data.update(overrides)
    return ExperimentConfig.from_dict(data)


@pytest.fixture
def tiny_cfg(tmp_path) -> ExperimentConfig:
    return tiny_experiment(tmp_path / "runs")


@pytest.fixture
def correlated_dataset() -> MultiLabelDataset:
    cfg = GeneratorConfig(d=5, K=6, T=3, n_per_task=200,
                          imbalance_profile=(0.1, 0.15, 0.2, 0.25, 0.3, 0.4),
                          label_correlation=0.8, seed=11)
    return generate_synthetic(cfg)


def make_dataset(labels, d: int = 3, seed: int = 0) -> MultiLabelDataset:
    labels = np.asarray(labels, dtype=np.int8)
    features = np.random.default_rng(seed).standard_normal((labels.shape[0], d))
    return MultiLabelDataset(features, labels)
