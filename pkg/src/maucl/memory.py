"""
Rehearsal memory
================

A fixed-capacity buffer of past-task examples with three updating policies
(plus `none`, sequential fine-tuning without any buffer):

- WRU (weight retain updating): per-task quota floor(M/t), greedy selection
  that keeps each class's positive/negative ratio close to the task's, and the
  task's original per-class counts stored next to the samples.
- Reservoir: classical reservoir sampling over the stream of all examples.
- Random: per-task quota filled uniformly at random.

Only WRU stores original counts. Losses over baseline memories fall back to the
counts of the memory itself.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from types import MappingProxyType
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .dataset import MultiLabelDataset, class_stats
from .errors import EmptyMemoryError, MemoryCapacityError, StructuralError

logger = logging.getLogger(__name__)

INFINITE_RATIO = math.inf
# discrepancy charged when exactly one of two ratios is infinite
RATIO_PENALTY = 1e6
DEFAULT_WRU_SUBSET = 64

Seed = Union[int, Sequence[int]]


class UpdatePolicy(str, Enum):
    WRU = "wru"
    RESERVOIR = "reservoir"
    RANDOM = "random"
    NONE = "none"


# ---------------------------------------------------------------------------
# Ratio bookkeeping
# ---------------------------------------------------------------------------

def rat(view: Mapping[int, Tuple[int, int]], k: int) -> float:
    """|D_k+| / |D_k-|, or INFINITE_RATIO when the class has no negatives"""
    pos, neg = view[k]
    if neg == 0:
        return INFINITE_RATIO
    return pos / neg


def _ratios(pos: np.ndarray, neg: np.ndarray) -> np.ndarray:
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    out = np.full(np.broadcast(pos, neg).shape, INFINITE_RATIO)
    np.divide(pos, neg, out=out, where=neg > 0)
    return out


def ratio_discrepancy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """|a - b| elementwise with |inf - inf| = 0 and |finite - inf| = RATIO_PENALTY"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a_inf, b_inf = np.isinf(a), np.isinf(b)
    both_finite = ~(a_inf | b_inf)
    diff = np.zeros(np.broadcast(a, b).shape)
    np.subtract(a, b, out=diff, where=both_finite)
    diff = np.abs(diff)
    return np.where(a_inf ^ b_inf, RATIO_PENALTY, diff)


def summed_ratio_discrepancy(labels: np.ndarray, selected: Sequence[int], classes: Sequence[int]) -> float:
    """Sum over `classes` of |Rat(full, k) - Rat(selected rows, k)|"""
    classes = list(classes)
    full = labels[:, classes]
    part = labels[np.asarray(selected, dtype=np.int64)][:, classes]
    target = _ratios(full.sum(axis=0), full.shape[0] - full.sum(axis=0))
    got = _ratios(part.sum(axis=0), part.shape[0] - part.sum(axis=0))
    return float(ratio_discrepancy(target, got).sum())


def greedy_ratio_selection(labels: np.ndarray,
                           quota: int,
                           classes: Sequence[int],
                           subset_size: Optional[int] = DEFAULT_WRU_SUBSET,
                           seed: Seed = 0) -> Tuple[List[int], int]:
    """Greedy ratio-matching selection; returns (indices, candidate evaluations).

    Each step scores a fresh random subset of the unselected rows (all of them
    when `subset_size` is None or not smaller than what is left) and keeps the
    candidate with the smallest summed ratio discrepancy, lowest index on ties.
    """
    n = labels.shape[0]
    if quota > n:
        raise StructuralError(f"quota {quota} exceeds the {n} available examples")
    if subset_size is not None and subset_size < 1:
        raise StructuralError("subset_size must be >= 1")
    classes = list(classes)
    y = labels[:, classes].astype(np.int64)
    total_pos = y.sum(axis=0)
    target = _ratios(total_pos, n - total_pos)

    rng = np.random.default_rng(seed)
    available = np.ones(n, dtype=bool)
    pos = np.zeros(len(classes), dtype=np.int64)
    neg = np.zeros(len(classes), dtype=np.int64)
    selected: List[int] = []
    evaluations = 0

    for _ in range(quota):
        pool = np.flatnonzero(available)
        if subset_size is None or subset_size >= len(pool):
            candidates = pool
        else:
            candidates = np.sort(rng.choice(pool, size=subset_size, replace=False))
        cand_y = y[candidates]
        scores = ratio_discrepancy(target, _ratios(pos + cand_y, neg + 1 - cand_y)).sum(axis=1)
        evaluations += len(candidates)
        best = int(candidates[np.argmin(scores)])
        selected.append(best)
        available[best] = False
        pos += y[best]
        neg += 1 - y[best]

    return selected, evaluations


def wru_select(task_data: MultiLabelDataset,
               quota: int,
               subset_size: Optional[int] = DEFAULT_WRU_SUBSET,
               seed: Seed = 0,
               classes: Optional[Sequence[int]] = None) -> List[int]:
    """Indices of the `quota` examples WRU keeps for this task"""
    classes = task_data.class_ids if classes is None else classes
    selected, evaluations = greedy_ratio_selection(task_data.labels, quota, classes, subset_size, seed)
    logger.debug(f"WRU picked {len(selected)} of {task_data.n} after {evaluations} candidate evaluations")
    return selected


# ---------------------------------------------------------------------------
# Buffer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TaskRecord:
    """What the buffer remembers about a task besides its samples"""

    task_id: int
    classes: Tuple[int, ...]
    n_source: int
    stored_counts: Optional[Mapping[int, Tuple[int, int]]] = None


@dataclass
class MemoryBatch:
    indices: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    task_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


class MemoryBuffer:
    """Rows of stored examples tagged with their source task"""

    def __init__(self,
                 capacity: int,
                 policy: Union[UpdatePolicy, str] = UpdatePolicy.WRU,
                 wru_subset: Optional[int] = DEFAULT_WRU_SUBSET):
        if capacity < 1:
            raise MemoryCapacityError("memory capacity must be >= 1")
        self.capacity = int(capacity)
        self.policy = UpdatePolicy(policy)
        if self.policy is UpdatePolicy.NONE:
            raise StructuralError("policy 'none' trains without a memory buffer")
        self.wru_subset = wru_subset
        self.features: Optional[np.ndarray] = None
        self.labels: Optional[np.ndarray] = None
        self.task_tags = np.empty(0, dtype=np.int64)
        self.records: Dict[int, TaskRecord] = {}
        self.seen = 0

    @property
    def size(self) -> int:
        return len(self.task_tags)

    @property
    def empty(self) -> bool:
        return self.size == 0

    @property
    def task_ids(self) -> List[int]:
        return list(self.records)

    def task_sizes(self) -> Dict[int, int]:
        return {t: int(np.sum(self.task_tags == t)) for t in self.records}

    def task_view(self, task_id: int) -> MultiLabelDataset:
        rows = np.flatnonzero(self.task_tags == task_id)
        record = self.records[task_id]
        return MultiLabelDataset(self.features[rows], self.labels[rows], class_ids=record.classes)

    def stored_counts(self, task_id: int) -> Optional[Mapping[int, Tuple[int, int]]]:
        return self.records[task_id].stored_counts

    def memory_counts(self, task_id: int) -> Dict[int, Tuple[int, int]]:
        """(positives, negatives) per class among the rows stored for one task"""
        record = self.records[task_id]
        rows = self.task_tags == task_id
        n_rows = int(rows.sum())
        counts = {}
        for k in record.classes:
            pos = int(self.labels[rows, k].sum()) if n_rows else 0
            counts[k] = (pos, n_rows - pos)
        return counts

    def margin_counts(self, task_id: int) -> Dict[int, int]:
        """Positive counts behind the margins of replayed data for one task"""
        record = self.records[task_id]
        if record.stored_counts is not None:
            return {k: pos for k, (pos, _) in record.stored_counts.items()}
        rows = self.task_tags == task_id
        return {k: int(self.labels[rows, k].sum()) for k in record.classes}

    def update(self, task_id: int, task_data: MultiLabelDataset, seed: Seed) -> "MemoryBuffer":
        if self.policy is UpdatePolicy.WRU:
            return update_wru(self, task_id, task_data, seed)
        if self.policy is UpdatePolicy.RESERVOIR:
            return update_reservoir(self, task_data, seed, task_id=task_id)
        return update_random(self, task_id, task_data, seed)

    def check_invariants(self) -> None:
        if self.size > self.capacity:
            raise MemoryCapacityError(f"buffer holds {self.size} > capacity {self.capacity}")
        if self.policy is not UpdatePolicy.RESERVOIR and self.records:
            quota = self.capacity // len(self.records)
            over = {t: s for t, s in self.task_sizes().items() if s > quota}
            if over:
                raise MemoryCapacityError(f"tasks {over} exceed the quota {quota}")

    def _register(self, task_id: int, task_data: MultiLabelDataset, stored: bool) -> None:
        if task_id in self.records:
            raise StructuralError(f"task {task_id} is already in memory")
        counts = None
        if stored:
            counts = MappingProxyType({k: (pos, neg) for k, (pos, neg, _) in class_stats(task_data).items()})
        self.records[task_id] = TaskRecord(task_id, tuple(task_data.class_ids), task_data.n, counts)

    def _append(self, task_id: int, features: np.ndarray, labels: np.ndarray) -> None:
        if self.features is None:
            self.features = np.empty((0, features.shape[1]))
            self.labels = np.empty((0, labels.shape[1]), dtype=np.int8)
        if features.shape[1] != self.features.shape[1] or labels.shape[1] != self.labels.shape[1]:
            raise StructuralError("examples do not match the buffer's dimensions")
        self.features = np.concatenate([self.features, features])
        self.labels = np.concatenate([self.labels, labels.astype(np.int8)])
        self.task_tags = np.concatenate([self.task_tags, np.full(len(features), task_id, dtype=np.int64)])

    def _keep_rows(self, rows: np.ndarray) -> None:
        rows = np.sort(rows)
        self.features = self.features[rows]
        self.labels = self.labels[rows]
        self.task_tags = self.task_tags[rows]

    def _shrink(self, quota: int, rng: np.random.Generator) -> None:
        # uniform removal; stored counts are never touched
        keep = []
        for task_id in sorted(self.records):
            rows = np.flatnonzero(self.task_tags == task_id)
            if len(rows) > quota:
                rows = rng.choice(rows, size=quota, replace=False)
            keep.append(rows)
        if keep:
            self._keep_rows(np.concatenate(keep).astype(np.int64))


def _quota_for_new_task(buffer: MemoryBuffer, task_id: int) -> int:
    if task_id in buffer.records:
        raise StructuralError(f"task {task_id} is already in memory")
    t = len(buffer.records) + 1
    quota = buffer.capacity // t
    if quota == 0:
        raise MemoryCapacityError(f"memory size {buffer.capacity} cannot hold {t} tasks")
    return quota


def update_wru(buffer: MemoryBuffer, task_id: int, task_data: MultiLabelDataset, seed: Seed) -> MemoryBuffer:
    """Shrink stored tasks to floor(M/t), then add the new task's WRU selection and counts"""
    quota = _quota_for_new_task(buffer, task_id)
    seeds = np.random.SeedSequence(seed).spawn(2)
    buffer._shrink(quota, np.random.default_rng(seeds[0]))
    selected = wru_select(task_data, min(quota, task_data.n), buffer.wru_subset, seeds[1])
    rows = np.asarray(selected, dtype=np.int64)
    buffer._register(task_id, task_data, stored=True)
    buffer._append(task_id, task_data.features[rows], task_data.labels[rows])
    logger.info(f"✅ WRU memory: task {task_id} stored {len(rows)} samples, quota {quota}, total {buffer.size}/{buffer.capacity}")
    return buffer


def update_random(buffer: MemoryBuffer, task_id: int, task_data: MultiLabelDataset, seed: Seed) -> MemoryBuffer:
    """Same quota rule as WRU with a uniform selection and no stored counts"""
    quota = _quota_for_new_task(buffer, task_id)
    rng = np.random.default_rng(seed)
    buffer._shrink(quota, rng)
    rows = np.sort(rng.choice(task_data.n, size=min(quota, task_data.n), replace=False))
    buffer._register(task_id, task_data, stored=False)
    buffer._append(task_id, task_data.features[rows], task_data.labels[rows])
    logger.info(f"✅ Random memory: task {task_id} stored {len(rows)} samples, total {buffer.size}/{buffer.capacity}")
    return buffer


def update_reservoir(buffer: MemoryBuffer,
                     stream: MultiLabelDataset,
                     seed: Seed,
                     task_id: Optional[int] = None) -> MemoryBuffer:
    """Reservoir sampling: the i-th of n streamed items ends stored with probability M/n"""
    if task_id is None:
        task_id = max(buffer.records, default=0) + 1
    buffer._register(task_id, stream, stored=False)
    rng = np.random.default_rng(seed)
    n = stream.n
    positions = buffer.seen + np.arange(n)
    draws = rng.integers(0, positions + 1) if n else np.empty(0, dtype=np.int64)

    fill = min(buffer.capacity - buffer.size, n)
    if fill > 0:
        buffer._append(task_id, stream.features[:fill], stream.labels[:fill])
    for i in range(fill, n):
        slot = draws[i]
        if slot < buffer.capacity:
            buffer.features[slot] = stream.features[i]
            buffer.labels[slot] = stream.labels[i]
            buffer.task_tags[slot] = task_id
    buffer.seen += n
    logger.info(f"✅ Reservoir memory: streamed {n} samples of task {task_id}, seen {buffer.seen}, total {buffer.size}/{buffer.capacity}")
    return buffer


def sample_memory_batch(buffer: MemoryBuffer,
                        batch_size: int,
                        seed: Union[Seed, np.random.Generator]) -> MemoryBatch:
    """Uniform draw over all stored rows; with replacement only when B exceeds the buffer"""
    if buffer.empty:
        raise EmptyMemoryError("cannot sample from an empty memory buffer")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    replace = batch_size > buffer.size
    indices = rng.choice(buffer.size, size=batch_size, replace=replace)
    return MemoryBatch(indices, buffer.features[indices], buffer.labels[indices], buffer.task_tags[indices])
