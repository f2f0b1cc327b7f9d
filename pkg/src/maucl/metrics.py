"""
Evaluation metrics
==================

Macro-AUC with the strict pair indicator, overall Macro-AUC and Forgetting
over a continual run, and the generalization-bound diagnostics.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dataset import MultiLabelDataset, class_stats
from .errors import ConfigError, DegenerateEvaluationError, StructuralError
from .loss import BaseLoss, MarginSchedule, base_loss
from .model import Scorer

logger = logging.getLogger(__name__)

TIE_CONVENTIONS = ("strict", "half")
FORGETTING_CONVENTIONS = ("max", "previous")


@dataclass
class AucReport:
    per_class: Dict[int, Optional[float]]
    macro: float
    skipped: List[int]

    @property
    def zero_one_risk(self) -> float:
        return 1.0 - self.macro


def class_auc(scores: np.ndarray, labels: np.ndarray, ties: str = "strict") -> Optional[float]:
    """Fraction of positive/negative pairs ranked correctly; None when a side is empty.

    Sorting the negatives once gives, for each positive, the number of
    negatives strictly below it (and tied with it) by binary search.
    """
    if ties not in TIE_CONVENTIONS:
        raise ConfigError(f"ties must be one of {TIE_CONVENTIONS}")
    scores = np.asarray(scores, dtype=np.float64)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(scores) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    negatives = np.sort(scores[~pos])
    below = np.searchsorted(negatives, scores[pos], side="left")
    wins = int(below.sum())
    if ties == "strict":
        return wins / (n_pos * n_neg)
    tied = int((np.searchsorted(negatives, scores[pos], side="right") - below).sum())
    return (wins + 0.5 * tied) / (n_pos * n_neg)


def macro_auc(scores: np.ndarray, labels: np.ndarray, class_set: Sequence[int], ties: str = "strict") -> AucReport:
    """Mean per-class AUC over `class_set`; classes missing a side are skipped.

    Raises DegenerateEvaluationError when no class is left to average.
    """
    class_set = [int(k) for k in class_set]
    if not class_set:
        raise StructuralError("class_set must be nonempty")
    per_class: Dict[int, Optional[float]] = {}
    skipped = []
    for k in class_set:
        per_class[k] = class_auc(scores[:, k], labels[:, k], ties)
        if per_class[k] is None:
            skipped.append(k)
    values = [v for v in per_class.values() if v is not None]
    if not values:
        raise DegenerateEvaluationError(f"every class in {class_set} lacks positives or negatives in the evaluation set")
    if skipped:
        logger.debug(f"Classes {skipped} are degenerate in the evaluation set and were skipped")
    return AucReport(per_class, float(np.mean(values)), skipped)


# ---------------------------------------------------------------------------
# Continual metrics
# ---------------------------------------------------------------------------

@dataclass
class RunRecord:
    """a[l][j]: Macro-AUC on task j after finishing task l (0-based, j <= l)"""

    auc_matrix: np.ndarray
    skipped: Dict[Tuple[int, int], List[int]] = field(default_factory=dict)

    @classmethod
    def empty(cls, num_tasks: int) -> "RunRecord":
        return cls(np.full((num_tasks, num_tasks), np.nan))

    @property
    def num_tasks(self) -> int:
        return self.auc_matrix.shape[0]

    def record(self, checkpoint: int, task: int, value: float) -> None:
        if task > checkpoint:
            raise StructuralError(f"task {task} cannot be evaluated at checkpoint {checkpoint}")
        self.auc_matrix[checkpoint, task] = value

    @property
    def overall(self) -> List[float]:
        return [overall_macro_auc(self, l) for l in range(1, self.num_tasks + 1)]


def overall_macro_auc(run: RunRecord, l: int) -> float:
    """Mean Macro-AUC over tasks 1..l after training task l (1-based)"""
    if not 1 <= l <= run.num_tasks:
        raise StructuralError(f"checkpoint {l} outside 1..{run.num_tasks}")
    return float(np.mean(run.auc_matrix[l - 1, :l]))


def forgetting(run: RunRecord, T: Optional[int] = None, convention: str = "max") -> Tuple[Dict[int, float], float]:
    """Per-task drop from the best earlier checkpoint (or the previous one) to checkpoint T.

    Tasks are numbered from 1. With `convention="max"` values are never
    negative; `"previous"` compares against checkpoint T-1 only.
    """
    if convention not in FORGETTING_CONVENTIONS:
        raise ConfigError(f"forgetting convention must be one of {FORGETTING_CONVENTIONS}")
    T = run.num_tasks if T is None else T
    if T < 2:
        raise StructuralError("forgetting needs at least two checkpoints")
    a = run.auc_matrix
    per_task = {}
    for j in range(T - 1):
        final = float(a[T - 1, j])
        if convention == "max":
            # best earlier checkpoint against the final one, clipped so never negative
            per_task[j + 1] = max(float(np.max(a[j:T - 1, j])) - final, 0.0)
        else:
            per_task[j + 1] = float(a[T - 2, j]) - final
    return per_task, float(np.mean(list(per_task.values())))


# ---------------------------------------------------------------------------
# Bound diagnostics
# ---------------------------------------------------------------------------

@dataclass
class BoundInputs:
    Lambda: float
    r: float
    n: int
    tau: Sequence[float]
    rho_pos: Sequence[float]
    rho_neg: Sequence[float]
    B_loss: float = 1.0
    delta: float = 0.05

    def validate(self) -> None:
        if self.n < 1:
            raise StructuralError("bound needs n >= 1")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError("delta must lie in (0, 1)")
        if not (len(self.tau) == len(self.rho_pos) == len(self.rho_neg)) or not len(self.tau):
            raise StructuralError("tau, rho_pos and rho_neg need one entry per class")
        tau = np.asarray(self.tau, dtype=np.float64)
        if np.any(tau <= 0.0) or np.any(tau > 0.5):
            raise StructuralError("every tau_k must lie in (0, 0.5]")


@dataclass
class BoundTerms:
    complexity: float
    confidence: float
    total: float


def _complexity(b: BoundInputs) -> float:
    tau = np.asarray(b.tau, dtype=np.float64)
    rho = np.asarray(b.rho_pos, dtype=np.float64) + np.asarray(b.rho_neg, dtype=np.float64)
    return 4.0 * b.Lambda * b.r / math.sqrt(b.n) * float(np.mean(np.sqrt(1.0 / tau) * rho))


def _confidence(b: BoundInputs, log_term: float) -> float:
    tau = np.asarray(b.tau, dtype=np.float64)
    return 6.0 * b.B_loss * math.sqrt(log_term / (2.0 * b.n)) * math.sqrt(float(np.mean(1.0 / tau)))


def batch_bound(b: BoundInputs, empirical_risk: float) -> BoundTerms:
    """Risk bound of the batch RLDAM learner: empirical risk + complexity + confidence"""
    b.validate()
    complexity = _complexity(b)
    confidence = _confidence(b, math.log(2.0 / b.delta))
    return BoundTerms(complexity, confidence, empirical_risk + complexity + confidence)


def continual_bound_terms(per_task: Sequence[BoundInputs]) -> List[Tuple[float, float]]:
    """(epsilon_i, xi_i) for each task: the computable terms of the continual bound"""
    terms = []
    for b in per_task:
        b.validate()
        terms.append((_complexity(b), _confidence(b, math.log(6.0 / b.delta))))
    return terms


def bound_inputs_for(scorer: Scorer,
                     data: MultiLabelDataset,
                     classes: Sequence[int],
                     sched: MarginSchedule,
                     base: BaseLoss = BaseLoss.HINGE,
                     delta: float = 0.05) -> BoundInputs:
    """Assemble bound inputs from data, margins and the current scorer.

    Lambda is the norm cap when set, else the largest row norm of W; r is the
    feature-map radius over `data`; B is the largest base-loss value seen on
    `data`. Classes with tau_k = 0 are left out.
    """
    stats = class_stats(data)
    usable = [k for k in classes if stats[k][2] > 0]
    if len(usable) < len(classes):
        logger.warning(f"⚠️ Classes {sorted(set(classes) - set(usable))} have tau = 0; left out of the bound")

    scores = scorer.forward(data.features)
    worst = 0.0
    for k in usable:
        pos = data.labels[:, k] == 1
        d_pos, d_neg = float(sched.delta_pos[k]), float(sched.delta_neg[k])
        losses = np.concatenate([base_loss(scores[pos, k] - d_pos, base),
                                 base_loss(-scores[~pos, k] - d_neg, base)])
        worst = max(worst, float(losses.max()))

    def inverse(d: float) -> float:
        return math.inf if d == 0 else 1.0 / d

    return BoundInputs(
        Lambda=scorer.norm_cap if scorer.norm_cap is not None else scorer.max_row_norm(),
        r=scorer.feature_map.radius(data.features),
        n=data.n,
        tau=[stats[k][2] for k in usable],
        rho_pos=[inverse(float(sched.delta_pos[k])) for k in usable],
        rho_neg=[inverse(float(sched.delta_neg[k])) for k in usable],
        B_loss=worst,
        delta=delta,
    )
