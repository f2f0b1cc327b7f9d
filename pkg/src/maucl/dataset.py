"""
Multi-label datasets for maucl
==============================

Holds the dataset model (dense features plus multi-hot labels), the synthetic
imbalanced generator, the class-incremental task splitter and the JSON-lines
file format shared by every CLI command.
"""

import json
import logging
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, DatasetFormatError, SplitError, StructuralError

logger = logging.getLogger(__name__)

FORMAT_NAME = "maucl-jsonl"
FORMAT_VERSION = 1

# class prototypes live on the sphere of this radius
PROTOTYPE_SCALE = 3.0
# fixed sample used to calibrate base rates under label correlation
CALIBRATION_ROWS = 20000
CALIBRATION_ROUNDS = 40
CALIBRATION_STREAM = 7


@dataclass(frozen=True)
class Example:
    """One instance: a feature vector and its multi-hot label vector"""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.features)):
            raise StructuralError("features must be finite")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise StructuralError("labels must be 0 or 1")


class MultiLabelDataset:
    """Examples stored column-wise: features (n, d) and labels (n, K).

    `class_ids` lists the classes this dataset knows about (all K for a full
    dataset, the task's classes for a task dataset). Label columns outside
    `class_ids` are always zero for task datasets. `source_index` remembers the
    row each example came from so repeated instances across tasks can be traced.
    """

    def __init__(self,
                 features: np.ndarray,
                 labels: np.ndarray,
                 class_ids: Optional[Sequence[int]] = None,
                 source_index: Optional[np.ndarray] = None):
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels)
        if features.ndim != 2 or labels.ndim != 2:
            raise StructuralError("features and labels must be 2-D arrays")
        if features.shape[0] != labels.shape[0]:
            raise StructuralError(
                f"{features.shape[0]} feature rows but {labels.shape[0]} label rows")
        if not np.all(np.isfinite(features)):
            raise StructuralError("features must be finite")
        if labels.size and not np.all((labels == 0) | (labels == 1)):
            raise StructuralError("labels must be 0 or 1")

        num_classes = labels.shape[1]
        if class_ids is None:
            class_ids = range(num_classes)
        class_ids = tuple(sorted(int(k) for k in class_ids))
        if len(set(class_ids)) != len(class_ids):
            raise StructuralError("class ids must be unique")
        if class_ids and (class_ids[0] < 0 or class_ids[-1] >= num_classes):
            raise StructuralError(f"class ids must lie in [0, {num_classes})")

        if source_index is None:
            source_index = np.arange(features.shape[0])
        source_index = np.asarray(source_index, dtype=np.int64)
        if source_index.shape != (features.shape[0],):
            raise StructuralError("source_index must have one entry per example")

        self.features = features
        self.labels = labels.astype(np.int8)
        self.class_ids = class_ids
        self.source_index = source_index

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return self.labels.shape[1]

    def __len__(self) -> int:
        return self.n

    def __iter__(self) -> Iterator[Example]:
        for i in range(self.n):
            yield Example(self.features[i], self.labels[i])

    @property
    def examples(self) -> List[Example]:
        return list(self)

    def pos_index(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.labels[:, k] == 1)

    def neg_index(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.labels[:, k] == 0)

    def positive_counts(self) -> np.ndarray:
        """Positive count for every global class (length K)"""
        return self.labels.sum(axis=0, dtype=np.int64)

    def subset(self, indices: Sequence[int], classes: Optional[Sequence[int]] = None) -> "MultiLabelDataset":
        """Rows `indices`; when `classes` is given, labels outside it are masked to 0"""
        indices = np.asarray(indices, dtype=np.int64)
        labels = self.labels[indices].copy()
        if classes is not None:
            keep = np.zeros(self.num_classes, dtype=bool)
            keep[list(classes)] = True
            labels[:, ~keep] = 0
        return MultiLabelDataset(
            self.features[indices].copy(),
            labels,
            class_ids=self.class_ids if classes is None else classes,
            source_index=self.source_index[indices],
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MultiLabelDataset):
            return NotImplemented
        return (self.features.shape == other.features.shape
                and self.labels.shape == other.labels.shape
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels)
                and self.class_ids == other.class_ids
                and np.array_equal(self.source_index, other.source_index))

    def __repr__(self) -> str:
        return f"MultiLabelDataset(n={self.n}, d={self.d}, K={self.num_classes}, classes={list(self.class_ids)})"


@dataclass(frozen=True)
class Task:
    task_id: int
    classes: Tuple[int, ...]
    data: MultiLabelDataset


@dataclass(frozen=True)
class TaskSequence:
    """Ordered tasks with disjoint class sets over `total_classes` global classes"""

    tasks: Tuple[Task, ...]
    total_classes: int

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self) -> Iterator[Task]:
        return iter(self.tasks)

    def __getitem__(self, i: int) -> Task:
        return self.tasks[i]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TaskSequence):
            return NotImplemented
        return (self.total_classes == other.total_classes
                and len(self.tasks) == len(other.tasks)
                and all(a.task_id == b.task_id and a.classes == b.classes and a.data == b.data
                        for a, b in zip(self.tasks, other.tasks)))

    def validate(self) -> None:
        """Check the class-incremental task invariants by direct scan"""
        seen: set = set()
        for task in self.tasks:
            classes = set(task.classes)
            if classes & seen:
                raise SplitError(f"task {task.task_id} reuses classes {sorted(classes & seen)}")
            seen |= classes
            labels = task.data.labels
            outside = np.ones(self.total_classes, dtype=bool)
            outside[list(task.classes)] = False
            if labels[:, outside].any():
                raise SplitError(f"task {task.task_id} has positives outside its class set")
            inside = labels[:, list(task.classes)]
            if not (inside.sum(axis=1) >= 2).any():
                raise SplitError(f"task {task.task_id} has no example with two relevant labels")
            pos = inside.sum(axis=0)
            if (pos == 0).any() or (pos == task.data.n).any():
                raise SplitError(f"task {task.task_id} has a class without positives or negatives")
        if len(seen) != self.total_classes:
            raise SplitError(f"tasks cover {len(seen)} of {self.total_classes} classes")


@dataclass
class GeneratorConfig:
    """Parameters of the synthetic imbalanced multi-label generator.

    The dataset holds `n_per_task * T` examples so that, after splitting into
    T tasks, each task sees roughly `n_per_task` rows on average.
    """

    d: int
    K: int
    T: int
    n_per_task: int
    imbalance_profile: Tuple[float, ...]
    label_correlation: float = 0.0
    seed: int = 0

    @property
    def n_total(self) -> int:
        return self.n_per_task * self.T

    def validate(self) -> None:
        if self.d < 1:
            raise ConfigError("generator: d must be >= 1")
        if self.T < 1 or self.K < self.T:
            raise ConfigError(f"generator: need K >= T >= 1, got K={self.K}, T={self.T}")
        if self.n_per_task < 4:
            raise ConfigError("generator: n_per_task must be >= 4")
        if len(self.imbalance_profile) != self.K:
            raise ConfigError(
                f"generator: imbalance_profile has {len(self.imbalance_profile)} rates for K={self.K}")
        rates = np.asarray(self.imbalance_profile, dtype=np.float64)
        if np.any(rates <= 0.0) or np.any(rates >= 1.0):
            raise ConfigError("generator: positive rates must lie strictly in (0, 1)")
        if not 0.0 <= self.label_correlation <= 1.0:
            raise ConfigError("generator: label_correlation must lie in [0, 1]")
        expected = rates * self.n_total
        if np.any(expected < 2.0):
            bad = [int(k) for k in np.flatnonzero(expected < 2.0)]
            raise ConfigError(f"generator: classes {bad} expect fewer than 2 positives")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "GeneratorConfig":
        data = dict(data)
        profile = data.get("imbalance_profile")
        if isinstance(profile, Mapping):
            profile = log_spaced_rates(float(profile["min"]), float(profile["max"]), int(data["K"]))
        try:
            return cls(
                d=int(data["d"]),
                K=int(data["K"]),
                T=int(data["T"]),
                n_per_task=int(data["n_per_task"]),
                imbalance_profile=tuple(float(r) for r in profile),
                label_correlation=float(data.get("label_correlation", 0.0)),
                seed=int(data.get("seed", 0)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"generator: {e}") from e

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["imbalance_profile"] = list(self.imbalance_profile)
        return data


def log_spaced_rates(low: float, high: float, num_classes: int) -> Tuple[float, ...]:
    """Positive rates spaced geometrically from `low` to `high`"""
    return tuple(float(r) for r in np.geomspace(low, high, num_classes))


def generate_synthetic(cfg: GeneratorConfig) -> MultiLabelDataset:
    """Sample an imbalanced multi-label dataset that a linear scorer can learn.

    Labels are Bernoulli per class. With probability `label_correlation` an
    example that already has a relevant label gets a second sampled class as
    well; the base rates are calibrated beforehand so that each class's final
    positive rate matches the profile. Features are the sum of the relevant
    class prototypes plus standard normal noise.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n, num_classes = cfg.n_total, cfg.K
    rates = np.asarray(cfg.imbalance_profile, dtype=np.float64)

    prototypes = rng.standard_normal((num_classes, cfg.d))
    prototypes /= np.linalg.norm(prototypes, axis=1, keepdims=True)
    prototypes *= PROTOTYPE_SCALE

    corr = cfg.label_correlation
    base = calibrated_base_rates(rates, corr, np.random.default_rng([cfg.seed, CALIBRATION_STREAM]))
    labels = _correlated_labels(rng.random((n, num_classes)), rng.random(n), rng.random(n),
                                base, corr, rates / rates.sum())

    _repair_counts(labels, rng)
    features = labels.astype(np.float64) @ prototypes + rng.standard_normal((n, cfg.d))

    logger.info(f"✅ Generated {n} examples ({num_classes} classes, d={cfg.d}, seed={cfg.seed})")
    return MultiLabelDataset(features, labels)


def _correlated_labels(draws: np.ndarray,
                       coins: np.ndarray,
                       picks: np.ndarray,
                       base: np.ndarray,
                       corr: float,
                       partner_p: np.ndarray) -> np.ndarray:
    # a copied label goes to a class the row lacks, drawn in proportion to partner_p
    labels = draws < base
    if corr > 0.0:
        rows = np.flatnonzero((coins < corr) & labels.any(axis=1))
        cumulative = np.cumsum(partner_p * ~labels[rows], axis=1)
        open_rows = cumulative[:, -1] > 0.0
        rows, cumulative = rows[open_rows], cumulative[open_rows]
        target = picks[rows] * cumulative[:, -1]
        labels[rows, (cumulative <= target[:, None]).sum(axis=1)] = True
    return labels.astype(np.int8)


def calibrated_base_rates(rates: np.ndarray, corr: float, rng: np.random.Generator) -> np.ndarray:
    """Base rates whose final positive rates, after the correlation copies, match `rates`.

    Runs the labelling on a fixed calibration sample and rescales each base
    rate by target / achieved until the achieved rates settle.
    """
    rates = np.asarray(rates, dtype=np.float64)
    if corr == 0.0:
        return rates.copy()
    draws = rng.random((CALIBRATION_ROWS, len(rates)))
    coins = rng.random(CALIBRATION_ROWS)
    picks = rng.random(CALIBRATION_ROWS)
    partner_p = rates / rates.sum()
    base = rates.copy()
    for _ in range(CALIBRATION_ROUNDS):
        achieved = _correlated_labels(draws, coins, picks, base, corr, partner_p).mean(axis=0)
        base = np.clip(base * rates / np.maximum(achieved, 1.0 / CALIBRATION_ROWS), 1e-6, rates)
    return base


def _repair_counts(labels: np.ndarray, rng: np.random.Generator) -> None:
    # every class keeps >= 2 positives and >= 1 negative
    n = labels.shape[0]
    for k in range(labels.shape[1]):
        column = labels[:, k]
        missing = 2 - int(column.sum())
        if missing > 0:
            column[rng.choice(np.flatnonzero(column == 0), size=missing, replace=False)] = 1
        if column.sum() == n:
            column[rng.integers(n)] = 0


def split_tasks(ds: MultiLabelDataset,
                T: int,
                seed: int,
                negative_ratio: float = 1.0,
                max_attempts: int = 100) -> TaskSequence:
    """Partition the classes into T disjoint tasks and build each task's dataset.

    A task keeps every example with a positive among its classes plus
    negative-only examples until each class has at least
    `ceil(negative_ratio * positives)` negatives (and never fewer than one).
    Labels outside the task's classes are masked, so one example may appear in
    several tasks with different label vectors.
    """
    classes = np.asarray(ds.class_ids, dtype=np.int64)
    if T < 1 or T > len(classes):
        raise SplitError(f"cannot split {len(classes)} classes into {T} tasks")
    if negative_ratio < 0:
        raise SplitError("negative_ratio must be >= 0")
    pos_counts = ds.labels[:, classes].sum(axis=0)
    if np.any(pos_counts == 0):
        raise SplitError(f"classes {classes[pos_counts == 0].tolist()} have no positives")

    rng = np.random.default_rng(seed)
    for attempt in range(1, max_attempts + 1):
        groups = [np.sort(g) for g in np.array_split(rng.permutation(classes), T)]
        tasks = []
        for t, group in enumerate(groups, start=1):
            data = _build_task(ds, group, rng, negative_ratio)
            if data is None:
                break
            tasks.append(Task(task_id=t, classes=tuple(int(k) for k in group), data=data))
        else:
            seq = TaskSequence(tuple(tasks), ds.num_classes)
            logger.info(f"✅ Split {len(classes)} classes into {T} tasks (attempt {attempt})")
            return seq
        logger.debug(f"Reshuffling classes, attempt {attempt} violated the task invariants")

    raise SplitError(f"no valid split into {T} tasks after {max_attempts} attempts")


def _build_task(ds: MultiLabelDataset,
                group: np.ndarray,
                rng: np.random.Generator,
                negative_ratio: float) -> Optional[MultiLabelDataset]:
    inside = ds.labels[:, group]
    if not (inside.sum(axis=1) >= 2).any():
        return None
    has_pos = inside.any(axis=1)
    selected = np.flatnonzero(has_pos)
    pos = inside[selected].sum(axis=0)
    neg = len(selected) - pos

    wanted = np.ceil(negative_ratio * pos).astype(np.int64) - neg
    need = max(int(wanted.max()), 1 - int(neg.min()), 0)
    pool = np.flatnonzero(~has_pos)
    pad = min(need, len(pool))
    if int(neg.min()) + pad < 1:
        return None
    padding = rng.choice(pool, size=pad, replace=False) if pad else np.empty(0, dtype=np.int64)
    indices = np.sort(np.concatenate([selected, padding]))
    return ds.subset(indices, classes=group)


def holdout_split(ds: MultiLabelDataset, test_fraction: float, seed: int) -> Tuple[MultiLabelDataset, MultiLabelDataset]:
    """Seeded random train/test split that keeps the class ids"""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError("test_fraction must lie in (0, 1)")
    n_test = int(round(ds.n * test_fraction))
    if n_test < 1 or n_test >= ds.n:
        raise StructuralError(f"cannot hold out {test_fraction:.0%} of {ds.n} examples")
    perm = np.random.default_rng(seed).permutation(ds.n)
    return ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))


def class_stats(ds: MultiLabelDataset) -> Dict[int, Tuple[int, int, float]]:
    """Per class: (|D_k+|, |D_k-|, tau_k) with tau_k = min(|D_k+|, |D_k-|) / n"""
    if ds.n < 1:
        raise StructuralError("class_stats needs at least one example")
    stats = {}
    for k in ds.class_ids:
        pos = int(ds.labels[:, k].sum())
        neg = ds.n - pos
        stats[k] = (pos, neg, min(pos, neg) / ds.n)
    return stats


# ---------------------------------------------------------------------------
# JSON-lines format
# ---------------------------------------------------------------------------

def save(obj: Union[MultiLabelDataset, TaskSequence], path: Union[str, Path]) -> Path:
    """Write a dataset or task sequence: one header object, then one example per line"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(obj, TaskSequence):
        parts = [task.data for task in obj.tasks]
        bounds, start = [], 0
        for task in obj.tasks:
            bounds.append({"task_id": task.task_id, "classes": list(task.classes),
                           "start": start, "stop": start + task.data.n})
            start += task.data.n
        d = parts[0].d if parts else 0
        header = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "kind": "tasks",
                  "d": d, "K": obj.total_classes, "n": start,
                  "class_ids": list(range(obj.total_classes)), "tasks": bounds}
    elif isinstance(obj, MultiLabelDataset):
        parts = [obj]
        header = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "kind": "dataset",
                  "d": obj.d, "K": obj.num_classes, "n": obj.n,
                  "class_ids": list(obj.class_ids), "tasks": []}
    else:
        raise TypeError(f"cannot save {type(obj).__name__}")

    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header) + "\n")
        for part in parts:
            for x, y, src in zip(part.features, part.labels, part.source_index):
                record = {"x": x.tolist(), "y": y.tolist(), "src": int(src)}
                f.write(json.dumps(record, allow_nan=False) + "\n")
    logger.info(f"✅ Saved {header['kind']} with {header['n']} examples to {path}")
    return path


def load(path: Union[str, Path]) -> Union[MultiLabelDataset, TaskSequence]:
    """Read a file written by `save`, validating every record"""
    path = Path(path)
    if not path.exists():
        raise DatasetFormatError(f"file not found: {path}")

    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise DatasetFormatError("missing header", line=1)

    header = _parse_line(lines[0], 1)
    for key in ("kind", "d", "K", "n", "class_ids"):
        if key not in header:
            raise DatasetFormatError(f"header lacks '{key}'", line=1)
    if header.get("format", FORMAT_NAME) != FORMAT_NAME:
        raise DatasetFormatError(f"unknown format {header.get('format')!r}", line=1)
    d, num_classes, n = int(header["d"]), int(header["K"]), int(header["n"])

    records = [line for line in lines[1:] if line.strip()]
    if len(records) != n:
        raise StructuralError(f"header declares {n} examples, file holds {len(records)}")

    features = np.empty((n, d), dtype=np.float64)
    labels = np.empty((n, num_classes), dtype=np.int8)
    sources = np.arange(n, dtype=np.int64)
    lineno = 1
    row = 0
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        record = _parse_line(line, lineno)
        if not isinstance(record, dict) or "x" not in record or "y" not in record:
            raise DatasetFormatError("record needs 'x' and 'y'", line=lineno)
        x, y = record["x"], record["y"]
        if not isinstance(x, list) or not isinstance(y, list):
            raise DatasetFormatError("'x' and 'y' must be arrays", line=lineno)
        if len(x) != d:
            raise StructuralError(f"record {row} (line {lineno}): 'x' has {len(x)} entries, expected d={d}")
        if len(y) != num_classes:
            raise StructuralError(f"record {row} (line {lineno}): 'y' has {len(y)} entries, expected K={num_classes}")
        if any(v not in (0, 1) for v in y):
            raise StructuralError(f"record {row} (line {lineno}): labels must be 0 or 1")
        try:
            features[row] = x
            labels[row] = y
        except (TypeError, ValueError) as e:
            raise DatasetFormatError(f"non-numeric entry ({e})", line=lineno) from e
        sources[row] = int(record.get("src", row))
        row += 1

    if header["kind"] == "dataset":
        return MultiLabelDataset(features, labels, class_ids=header["class_ids"], source_index=sources)
    if header["kind"] != "tasks":
        raise DatasetFormatError(f"unknown kind {header['kind']!r}", line=1)

    tasks = []
    for bound in header.get("tasks", []):
        start, stop = int(bound["start"]), int(bound["stop"])
        if not 0 <= start <= stop <= n:
            raise StructuralError(f"task {bound['task_id']} bounds [{start}, {stop}) outside [0, {n})")
        part = MultiLabelDataset(features[start:stop], labels[start:stop],
                                 class_ids=bound["classes"], source_index=sources[start:stop])
        tasks.append(Task(task_id=int(bound["task_id"]),
                          classes=tuple(int(k) for k in bound["classes"]), data=part))
    return TaskSequence(tuple(tasks), num_classes)


def _parse_line(line: str, lineno: int) -> Any:
    try:
        return json.loads(line)
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"malformed JSON ({e.msg})", line=lineno) from e
