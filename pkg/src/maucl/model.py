"""
Linear scorer over a feature map
================================

A single-head scorer f(x) = W Phi(x) with one weight row per global class, an
optional per-row norm cap, analytic gradients of the task risks, plain SGD
(optionally with momentum) and the replay training loop for one task.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .dataset import MultiLabelDataset
from .errors import ConfigError, DegenerateRiskError, NonFiniteGradientError, StructuralError
from .loss import (
    ClassWeights,
    LossConfig,
    MarginSchedule,
    adjusted_cl_risk,
    schedule_for,
    task_risk,
)
from .memory import MemoryBuffer, sample_memory_batch

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Feature maps
# ---------------------------------------------------------------------------

class FeatureMap:
    """Maps raw features to the space the scorer is linear in"""

    kind = "base"

    def __init__(self, input_dim: int, bias: bool = False):
        self.input_dim = int(input_dim)
        self.bias = bool(bias)

    @property
    def output_dim(self) -> int:
        raise NotImplementedError

    def _map(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise StructuralError(f"expected features of width {self.input_dim}, got shape {X.shape}")
        phi = self._map(X)
        if self.bias:
            phi = np.hstack([phi, np.ones((phi.shape[0], 1))])
        return phi

    def radius(self, X: np.ndarray) -> float:
        """max ||Phi(x)|| over the rows of X"""
        if len(X) == 0:
            return 0.0
        return float(np.linalg.norm(self.transform(X), axis=1).max())

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "bias": self.bias}


class IdentityMap(FeatureMap):
    kind = "identity"

    @property
    def output_dim(self) -> int:
        return self.input_dim + int(self.bias)

    def _map(self, X: np.ndarray) -> np.ndarray:
        return X


class RandomFourierMap(FeatureMap):
    """Random Fourier features for the RBF kernel exp(-gamma * ||x - y||^2)"""

    kind = "rff"

    def __init__(self, input_dim: int, dim: int = 256, gamma: float = 0.05, seed: int = 0, bias: bool = False):
        super().__init__(input_dim, bias)
        if dim < 1 or gamma <= 0:
            raise ConfigError("random Fourier features need dim >= 1 and gamma > 0")
        self.dim = int(dim)
        self.gamma = float(gamma)
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        self.omega = rng.normal(0.0, np.sqrt(2.0 * self.gamma), size=(self.dim, self.input_dim))
        self.offset = rng.uniform(0.0, 2.0 * np.pi, size=self.dim)

    @property
    def output_dim(self) -> int:
        return self.dim + int(self.bias)

    def _map(self, X: np.ndarray) -> np.ndarray:
        return np.sqrt(2.0 / self.dim) * np.cos(X @ self.omega.T + self.offset)

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "dim": self.dim, "gamma": self.gamma, "seed": self.seed, "bias": self.bias}


def make_feature_map(spec: Union[str, Mapping[str, Any], None], input_dim: int) -> FeatureMap:
    if spec is None:
        spec = {"kind": "identity"}
    if isinstance(spec, str):
        spec = {"kind": spec}
    spec = dict(spec)
    kind = spec.pop("kind", "identity")
    if kind == "identity":
        return IdentityMap(input_dim, bias=spec.get("bias", False))
    if kind in ("rff", "random-fourier"):
        return RandomFourierMap(input_dim, **spec)
    raise ConfigError(f"unknown feature map {kind!r}")


# ---------------------------------------------------------------------------
# Scorer and SGD
# ---------------------------------------------------------------------------

class Scorer:
    """W has one row per global class; all K heads are always exposed"""

    def __init__(self,
                 num_classes: int,
                 feature_map: FeatureMap,
                 norm_cap: Optional[float] = None,
                 weights: Optional[np.ndarray] = None):
        if norm_cap is not None and norm_cap <= 0:
            raise ConfigError("norm_cap must be positive")
        self.num_classes = int(num_classes)
        self.feature_map = feature_map
        self.norm_cap = norm_cap
        shape = (self.num_classes, feature_map.output_dim)
        if weights is None:
            weights = np.zeros(shape)
        weights = np.array(weights, dtype=np.float64)
        if weights.shape != shape:
            raise StructuralError(f"weights must have shape {shape}, got {weights.shape}")
        self.W = weights

    def features(self, X: np.ndarray) -> np.ndarray:
        return self.feature_map.transform(X)

    def forward(self, X: np.ndarray) -> np.ndarray:
        return self.features(X) @ self.W.T

    def scores_from_features(self, phi: np.ndarray) -> np.ndarray:
        return phi @ self.W.T

    def max_row_norm(self) -> float:
        return float(np.linalg.norm(self.W, axis=1).max()) if self.W.size else 0.0

    def copy(self) -> "Scorer":
        return Scorer(self.num_classes, self.feature_map, self.norm_cap, self.W.copy())


def forward(scorer: Scorer, X: np.ndarray) -> np.ndarray:
    return scorer.forward(X)


@dataclass
class SgdConfig:
    eta: float = 0.05
    batch_size: int = 32
    epochs: int = 30
    weight_decay: float = 1e-5
    momentum: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.eta <= 0:
            raise ConfigError("eta must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")


@dataclass
class GradResult:
    risk: float
    grad: np.ndarray
    used: List[int]
    dropped: List[int]


def risk_and_grad(scorer: Scorer,
                  X: np.ndarray,
                  labels: np.ndarray,
                  class_set: Sequence[int],
                  weights: Optional[ClassWeights],
                  sched: MarginSchedule,
                  cfg: LossConfig,
                  phi: Optional[np.ndarray] = None) -> GradResult:
    """Task risk of a batch and its gradient with respect to W.

    Pass `phi` to reuse precomputed features; rows of the gradient outside
    `class_set` are exactly zero.
    """
    if phi is None:
        phi = scorer.features(X)
    if phi.shape[0] == 0:
        raise StructuralError("risk_and_grad needs a nonempty batch")
    result = task_risk(scorer.scores_from_features(phi), labels, class_set, weights, sched, cfg)
    return GradResult(result.value, result.grad.T @ phi, result.used, result.dropped)


def sgd_step(scorer: Scorer,
             grad_current: np.ndarray,
             grad_memory: Optional[np.ndarray] = None,
             eta: float = 0.05,
             weight_decay: float = 0.0,
             momentum: float = 0.0,
             velocity: Optional[np.ndarray] = None) -> Scorer:
    """W <- W - eta * grad_current - eta * grad_memory, then decay, then projection"""
    step = grad_current if grad_memory is None else grad_current + grad_memory
    if step.shape != scorer.W.shape:
        raise StructuralError(f"gradient shape {step.shape} != weight shape {scorer.W.shape}")
    if not np.all(np.isfinite(step)):
        bad = np.argwhere(~np.isfinite(step))
        raise NonFiniteGradientError(f"non-finite gradient at {len(bad)} entries, first at {tuple(bad[0])}")

    if momentum > 0.0:
        if velocity is None:
            raise StructuralError("momentum needs a velocity buffer")
        velocity *= momentum
        velocity += step
        step = velocity
    scorer.W -= eta * step
    if weight_decay > 0.0:
        scorer.W -= eta * weight_decay * scorer.W
    if scorer.norm_cap is not None:
        norms = np.linalg.norm(scorer.W, axis=1)
        over = norms > scorer.norm_cap
        scorer.W[over] *= (scorer.norm_cap / norms[over])[:, None]
    return scorer


# ---------------------------------------------------------------------------
# Training one task
# ---------------------------------------------------------------------------

@dataclass
class TrainingLog:
    task_id: int
    epoch_risks: List[float] = field(default_factory=list)
    epoch_objectives: List[float] = field(default_factory=list)
    steps: int = 0
    skipped_batches: int = 0
    dropped_classes: int = 0
    replay: bool = False


@dataclass
class _MemoryRoute:
    classes: List[int]
    sched: MarginSchedule
    weight_counts: Mapping[int, Tuple[int, int]]


def _weights_for(labels: np.ndarray,
                 cfg: LossConfig,
                 stored_counts: Optional[Mapping[int, Tuple[int, int]]]) -> ClassWeights:
    if cfg.reweighting == "stored" and stored_counts is not None:
        return ClassWeights.from_stored(stored_counts, labels.shape[0], labels.shape[1])
    return ClassWeights.from_labels(labels)


def _memory_routes(memory: MemoryBuffer, cfg: LossConfig, num_classes: int) -> Dict[int, _MemoryRoute]:
    # replayed rows are weighted by the counts of their whole task in memory,
    # or by the task's stored original counts under reweighting "stored"
    routes = {}
    for task_id in memory.task_ids:
        record = memory.records[task_id]
        sched = schedule_for(cfg, memory.margin_counts(task_id), num_classes)
        counts = memory.memory_counts(task_id)
        if cfg.reweighting == "stored" and record.stored_counts is not None:
            counts = dict(record.stored_counts)
        routes[task_id] = _MemoryRoute(list(record.classes), sched, counts)
    return routes


def _memory_gradient(scorer: Scorer,
                     phi: np.ndarray,
                     labels: np.ndarray,
                     tags: np.ndarray,
                     routes: Dict[int, _MemoryRoute],
                     cfg: LossConfig,
                     log: TrainingLog) -> Tuple[Optional[np.ndarray], List[float]]:
    grads, risks = [], []
    for task_id in sorted(set(tags.tolist())):
        rows = tags == task_id
        route = routes[task_id]
        y = labels[rows]
        try:
            result = risk_and_grad(scorer, None, y, route.classes,
                                   ClassWeights.from_counts(route.weight_counts, len(y), y.shape[1]),
                                   route.sched, cfg, phi=phi[rows])
        except DegenerateRiskError:
            log.dropped_classes += len(route.classes)
            continue
        log.dropped_classes += len(result.dropped)
        grads.append(result.grad)
        risks.append(result.risk)
    if not grads:
        return None, []
    return np.mean(grads, axis=0), risks


def train_task(scorer: Scorer,
               task_data: MultiLabelDataset,
               memory: Optional[MemoryBuffer],
               loss_cfg: LossConfig,
               sgd_cfg: SgdConfig,
               task_id: int = 1,
               classes: Optional[Sequence[int]] = None) -> Tuple[Scorer, TrainingLog]:
    """Replay training on one task.

    Each epoch shuffles the task with a stream derived from (seed, task_id,
    epoch). With an empty memory this is plain batch learning; otherwise each
    step also draws a memory batch of the same size and applies both
    gradients. Margins for the task come from its full positive counts.
    """
    if task_data.n == 0:
        raise StructuralError(f"task {task_id} has no training examples")
    classes = list(task_data.class_ids if classes is None else classes)
    num_classes = scorer.num_classes
    counts = {k: int(task_data.labels[:, k].sum()) for k in classes}
    stored = {k: (c, task_data.n - c) for k, c in counts.items()}
    sched = schedule_for(loss_cfg, counts, num_classes)

    phi = scorer.features(task_data.features)
    replay = memory is not None and not memory.empty
    routes = _memory_routes(memory, loss_cfg, num_classes) if replay else {}
    memory_phi = scorer.features(memory.features) if replay else None

    velocity = np.zeros_like(scorer.W) if sgd_cfg.momentum > 0 else None
    log = TrainingLog(task_id=task_id, replay=replay)
    n, batch_size = task_data.n, sgd_cfg.batch_size
    mode = "replay" if replay else "batch"
    logger.info(f"🚀 Training task {task_id} ({mode}, n={n}, classes={classes}, epochs={sgd_cfg.epochs})")

    for epoch in range(sgd_cfg.epochs):
        rng = np.random.default_rng([sgd_cfg.seed, task_id, epoch])
        order = rng.permutation(n)
        objectives = []
        for start in range(0, n, batch_size):
            rows = order[start:start + batch_size]
            y = task_data.labels[rows]
            try:
                current = risk_and_grad(scorer, None, y, classes, _weights_for(y, loss_cfg, stored),
                                        sched, loss_cfg, phi=phi[rows])
                log.dropped_classes += len(current.dropped)
            except DegenerateRiskError:
                current = None
                log.dropped_classes += len(classes)

            grad_memory, memory_risks = None, []
            if replay:
                batch = sample_memory_batch(memory, batch_size, rng)
                grad_memory, memory_risks = _memory_gradient(
                    scorer, memory_phi[batch.indices], batch.labels, batch.task_ids, routes, loss_cfg, log)

            if current is None and grad_memory is None:
                log.skipped_batches += 1
                logger.debug(f"Task {task_id} epoch {epoch}: batch at {start} has no usable class")
                continue
            grad_current = current.grad if current is not None else np.zeros_like(scorer.W)
            sgd_step(scorer, grad_current, grad_memory, sgd_cfg.eta, sgd_cfg.weight_decay,
                     sgd_cfg.momentum, velocity)
            log.steps += 1
            if current is not None:
                objectives.append(adjusted_cl_risk(current.risk, memory_risks))

        log.epoch_risks.append(_full_risk(scorer, phi, task_data.labels, classes, sched, loss_cfg))
        log.epoch_objectives.append(float(np.mean(objectives)) if objectives else float("nan"))
        logger.debug(f"Task {task_id} epoch {epoch}: risk {log.epoch_risks[-1]:.6f}")

    if log.epoch_risks:
        logger.info(f"✅ Task {task_id} trained: risk {log.epoch_risks[0]:.4f} -> {log.epoch_risks[-1]:.4f}, "
                    f"{log.steps} steps, {log.skipped_batches} skipped batches")
    return scorer, log


def _full_risk(scorer: Scorer, phi: np.ndarray, labels: np.ndarray, classes: List[int],
               sched: MarginSchedule, cfg: LossConfig) -> float:
    try:
        return task_risk(scorer.scores_from_features(phi), labels, classes,
                         ClassWeights.from_labels(labels), sched, cfg).value
    except DegenerateRiskError:
        return float("nan")
