"""
Reweighted margin losses
========================

The RLDAM loss family for Macro-AUC: per-class reweighted univariate losses
(RU), the same with label-distribution-aware margins (RLDAM), an unweighted
margin loss (LDAM) and the plain binary cross-entropy baseline (BCE).

Every risk function returns its gradient with respect to the scores next to
the value so the model can chain it through the feature map.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DegenerateRiskError, StructuralError

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]


class LossKind(str, Enum):
    RLDAM = "rldam"
    RU = "ru"
    LDAM = "ldam"
    BCE = "bce"


class BaseLoss(str, Enum):
    HINGE = "hinge"
    LOGISTIC = "logistic"


REWEIGHTING_SOURCES = ("view", "stored")


@dataclass(frozen=True)
class LossConfig:
    kind: LossKind = LossKind.RLDAM
    base: BaseLoss = BaseLoss.HINGE
    lam: float = 1.0
    normalized_margin: bool = False
    reweighting: str = "view"

    def __post_init__(self):
        object.__setattr__(self, "kind", LossKind(self.kind))
        object.__setattr__(self, "base", BaseLoss(self.base))
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.reweighting not in REWEIGHTING_SOURCES:
            raise ConfigError(f"reweighting must be one of {REWEIGHTING_SOURCES}")
        if self.normalized_margin and self.uses_margins and self.lam == 0:
            raise ConfigError("normalized_margin needs lambda > 0")

    @property
    def uses_margins(self) -> bool:
        return self.kind in (LossKind.RLDAM, LossKind.LDAM)

    @property
    def reweighted(self) -> bool:
        return self.kind in (LossKind.RLDAM, LossKind.RU)


# ---------------------------------------------------------------------------
# Base losses
# ---------------------------------------------------------------------------

def base_loss(z: ArrayLike, base: BaseLoss = BaseLoss.HINGE) -> ArrayLike:
    """hinge: max(0, 1 - z); logistic: log(1 + exp(-z)) evaluated stably"""
    arr = np.asarray(z, dtype=np.float64)
    if BaseLoss(base) is BaseLoss.HINGE:
        out = np.maximum(0.0, 1.0 - arr)
    else:
        out = np.logaddexp(0.0, -arr)
    return float(out) if out.ndim == 0 else out


def base_loss_grad(z: ArrayLike, base: BaseLoss = BaseLoss.HINGE) -> ArrayLike:
    """Derivative in z; the hinge subgradient is 0 at the kink z = 1"""
    arr = np.asarray(z, dtype=np.float64)
    if BaseLoss(base) is BaseLoss.HINGE:
        out = np.where(arr < 1.0, -1.0, 0.0)
    else:
        out = -expit(-arr)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Margins and weights
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MarginSchedule:
    """Per-class margins indexed by global class id; classes without a count get 0"""

    lam: float
    delta_pos: np.ndarray
    delta_neg: np.ndarray
    counts: Dict[int, int] = field(default_factory=dict)

    @classmethod
    def zeros(cls, num_classes: int) -> "MarginSchedule":
        return cls(0.0, np.zeros(num_classes), np.zeros(num_classes), {})


def build_margins(counts_pos: Mapping[int, int], lam: float, num_classes: Optional[int] = None) -> MarginSchedule:
    """Delta_k+ = Delta_k- = lam / |D_k+|^(1/4)"""
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    counts = {int(k): int(c) for k, c in counts_pos.items()}
    zero = [k for k, c in counts.items() if c < 1]
    if zero:
        raise StructuralError(f"classes {sorted(zero)} have no positives; exclude them before building margins")
    if num_classes is None:
        num_classes = max(counts) + 1 if counts else 0
    delta = np.zeros(num_classes)
    for k, c in counts.items():
        delta[k] = lam / c ** 0.25
    return MarginSchedule(float(lam), delta, delta.copy(), counts)


def schedule_for(cfg: LossConfig, counts_pos: Mapping[int, int], num_classes: int) -> MarginSchedule:
    """Margins for a loss config; classes with no positives are left out"""
    if not cfg.uses_margins:
        return MarginSchedule.zeros(num_classes)
    usable = {k: c for k, c in counts_pos.items() if c >= 1}
    if len(usable) < len(counts_pos):
        missing = sorted(set(counts_pos) - set(usable))
        logger.warning(f"⚠️ Classes {missing} have no positives; margins left at 0")
    return build_margins(usable, cfg.lam, num_classes)


@dataclass(frozen=True)
class ClassWeights:
    """Reweighting factors 1/count per class with the counts they came from"""

    count_pos: np.ndarray
    count_neg: np.ndarray
    source: str = "view"

    @classmethod
    def from_labels(cls, labels: np.ndarray) -> "ClassWeights":
        pos = labels.sum(axis=0).astype(np.float64)
        return cls(pos, labels.shape[0] - pos, "view")

    @classmethod
    def from_counts(cls,
                    counts: Mapping[int, Tuple[int, int]],
                    n_view: int,
                    num_classes: int,
                    source: str = "memory") -> "ClassWeights":
        """Expected view counts under a population's positive/negative ratio.

        A view drawn from that population then gives an unbiased estimate of
        the population risk, and a class stays usable when the view happens
        to miss one of its sides.
        """
        pos = np.zeros(num_classes)
        neg = np.zeros(num_classes)
        for k, (p, q) in counts.items():
            total = p + q
            if total == 0:
                continue
            pos[k] = n_view * p / total
            neg[k] = n_view * q / total
        return cls(pos, neg, source)

    @classmethod
    def from_stored(cls,
                    stored_counts: Mapping[int, Tuple[int, int]],
                    n_view: int,
                    num_classes: int) -> "ClassWeights":
        """Expected view counts under the stored original positive/negative ratio"""
        return cls.from_counts(stored_counts, n_view, num_classes, "stored")

    @property
    def from_view(self) -> bool:
        return self.source == "view"

    def w_pos(self, k: int) -> float:
        return 1.0 / self.count_pos[k]

    def w_neg(self, k: int) -> float:
        return 1.0 / self.count_neg[k]


# ---------------------------------------------------------------------------
# Risks
# ---------------------------------------------------------------------------

def rldam_pair(f_pos: float, f_neg: float, k: int, sched: MarginSchedule,
               base: BaseLoss = BaseLoss.HINGE, normalized: bool = False) -> float:
    """l(f(x+) - Delta_k+) + l(-f(x-) - Delta_k-)"""
    d_pos, d_neg = float(sched.delta_pos[k]), float(sched.delta_neg[k])
    if normalized:
        _check_positive_margin(k, d_pos, d_neg)
        return base_loss(f_pos / d_pos, base) + base_loss(-f_neg / d_neg, base)
    return base_loss(f_pos - d_pos, base) + base_loss(-f_neg - d_neg, base)


@dataclass
class ClassRisk:
    value: float
    grad: np.ndarray
    degenerate: bool = False
    missing: Optional[str] = None


def class_risk(scores: np.ndarray,
               labels: np.ndarray,
               k: int,
               weights: ClassWeights,
               sched: MarginSchedule,
               base: BaseLoss = BaseLoss.HINGE,
               normalized: bool = False) -> ClassRisk:
    """Reweighted per-class empirical risk over one view.

    `scores` and `labels` are the class-k columns of the view. A side with no
    examples contributes 0 and the result is flagged degenerate.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    value, grad, missing = _class_terms(
        scores, labels, weights.count_pos[k], weights.count_neg[k],
        float(sched.delta_pos[k]), float(sched.delta_neg[k]), base, normalized, k)
    return ClassRisk(value, grad, missing is not None, missing)


def _class_terms(s: np.ndarray, y: np.ndarray, count_pos: float, count_neg: float,
                 d_pos: float, d_neg: float, base: BaseLoss, normalized: bool,
                 k: int) -> Tuple[float, np.ndarray, Optional[str]]:
    pos = y == 1
    neg = ~pos
    grad = np.zeros_like(s)
    value = 0.0
    missing = None
    if normalized:
        _check_positive_margin(k, d_pos, d_neg)

    if pos.any():
        z = s[pos] / d_pos if normalized else s[pos] - d_pos
        value += np.sum(base_loss(z, base)) / count_pos
        g = base_loss_grad(z, base) / count_pos
        grad[pos] = g / d_pos if normalized else g
    else:
        missing = "positive"
    if neg.any():
        z = -s[neg] / d_neg if normalized else -s[neg] - d_neg
        value += np.sum(base_loss(z, base)) / count_neg
        g = base_loss_grad(z, base) / count_neg
        grad[neg] = -g / d_neg if normalized else -g
    else:
        missing = "negative"
    return float(value), grad, missing


def _check_positive_margin(k: int, d_pos: float, d_neg: float) -> None:
    if d_pos <= 0 or d_neg <= 0:
        raise ConfigError(f"normalized margin loss needs positive margins, class {k} has 0")


@dataclass
class TaskRisk:
    value: float
    grad: np.ndarray
    used: List[int]
    dropped: List[int]


def task_risk(scores: np.ndarray,
              labels: np.ndarray,
              class_set: Sequence[int],
              weights: Optional[ClassWeights],
              sched: MarginSchedule,
              cfg: LossConfig) -> TaskRisk:
    """Mean class risk over `class_set` and its gradient in the scores.

    Degenerate classes are dropped from the mean and reported in `dropped`.
    `scores` and `labels` are (n, K) over global classes; the gradient has the
    same shape and is zero outside `class_set`.
    """
    class_set = [int(k) for k in class_set]
    if not class_set:
        raise StructuralError("class_set must be nonempty")
    if scores.shape != labels.shape:
        raise StructuralError(f"scores {scores.shape} and labels {labels.shape} differ in shape")
    n = scores.shape[0]
    if n == 0:
        raise StructuralError("task_risk needs a nonempty view")

    if cfg.kind is LossKind.BCE:
        value, grad = _bce_terms(scores, labels, class_set)
        return TaskRisk(value, grad, class_set, [])

    grad = np.zeros_like(scores, dtype=np.float64)
    total = 0.0
    used, dropped = [], []
    for k in class_set:
        if cfg.kind is LossKind.LDAM:
            count_pos = count_neg = float(n)
        else:
            count_pos, count_neg = weights.count_pos[k], weights.count_neg[k]
        if cfg.uses_margins:
            d_pos, d_neg = float(sched.delta_pos[k]), float(sched.delta_neg[k])
        else:
            d_pos = d_neg = 0.0
        normalized = cfg.normalized_margin and cfg.uses_margins
        value, g, missing = _class_terms(scores[:, k], labels[:, k], count_pos, count_neg,
                                         d_pos, d_neg, cfg.base, normalized, k)
        if cfg.kind is not LossKind.LDAM:
            if weights.from_view:
                degenerate = missing is not None
            else:
                degenerate = count_pos <= 0 or count_neg <= 0
            if degenerate:
                dropped.append(k)
                continue
        used.append(k)
        total += value
        grad[:, k] = g

    if not used:
        raise DegenerateRiskError(f"every class in {class_set} lacks positives or negatives in the view")
    m = len(used)
    return TaskRisk(total / m, grad / m, used, dropped)


def adjusted_cl_risk(current_task_risk: float, memory_task_risks: Sequence[float]) -> float:
    """(1/t) * (current risk + sum of memory task risks), t = 1 + #memory tasks"""
    risks = [current_task_risk, *memory_task_risks]
    return float(sum(risks) / len(risks))


def bce_risk(scores: np.ndarray, labels: np.ndarray, class_set: Sequence[int]) -> float:
    """Unweighted binary cross-entropy with logits, mean over classes and samples"""
    value, _ = _bce_terms(np.asarray(scores, dtype=np.float64), np.asarray(labels), list(class_set))
    return value


def _bce_terms(scores: np.ndarray, labels: np.ndarray, class_set: List[int]) -> Tuple[float, np.ndarray]:
    s = scores[:, class_set]
    y = labels[:, class_set].astype(np.float64)
    sign = 2.0 * y - 1.0
    count = s.size
    value = float(np.sum(np.logaddexp(0.0, -sign * s)) / count)
    grad = np.zeros_like(scores, dtype=np.float64)
    grad[:, class_set] = (expit(s) - y) / count
    return value, grad
