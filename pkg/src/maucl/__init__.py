"""
maucl
=====

Continual multi-label learning for Macro-AUC: reweighted label-distribution
aware margin losses, a ratio-preserving rehearsal memory and the replay
harness that runs them over class-incremental task sequences.
"""

from .config import STANDARD_BENCHMARK, ExperimentConfig, load_config
from .dataset import GeneratorConfig, MultiLabelDataset, Task, TaskSequence, generate_synthetic, split_tasks
from .errors import MauclError
from .loss import BaseLoss, LossConfig, LossKind
from .memory import MemoryBuffer, UpdatePolicy
from .metrics import RunRecord, forgetting, macro_auc, overall_macro_auc
from .model import Scorer, SgdConfig, train_task

__version__ = "0.1.0"

__all__ = [
    "STANDARD_BENCHMARK",
    "BaseLoss",
    "ExperimentConfig",
    "GeneratorConfig",
    "LossConfig",
    "LossKind",
    "MauclError",
    "MemoryBuffer",
    "MultiLabelDataset",
    "RunRecord",
    "Scorer",
    "SgdConfig",
    "Task",
    "TaskSequence",
    "UpdatePolicy",
    "forgetting",
    "generate_synthetic",
    "load_config",
    "macro_auc",
    "overall_macro_auc",
    "split_tasks",
    "train_task",
]
