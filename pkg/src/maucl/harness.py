"""
Experiment harness
==================

Runs the replay procedure over a task sequence for every configured seed and
writes one directory per seed:

    <out>/seed_<s>/config.json    resolved config that reproduces the run
    <out>/seed_<s>/metrics.csv    AUC matrix, overall curve, forgetting
    <out>/seed_<s>/training.csv   per-epoch training risk and objective
    <out>/seed_<s>/bounds.json    bound diagnostics
    <out>/seed_<s>/log.txt        run log

plus `<out>/summary.csv`. Ablations, sweeps and the batch-mode comparison are
built on the same per-seed runner.
"""

import asyncio
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import STAGES, ExperimentConfig, derive_seed
from .dataset import (
    MultiLabelDataset,
    Task,
    TaskSequence,
    generate_synthetic,
    holdout_split,
    load,
    split_tasks,
)
from .errors import ConfigError, MauclError, StageError
from .loss import ClassWeights, LossKind, schedule_for, task_risk
from .memory import MemoryBuffer, UpdatePolicy
from .metrics import (
    RunRecord,
    batch_bound,
    bound_inputs_for,
    continual_bound_terms,
    forgetting,
    macro_auc,
    overall_macro_auc,
)
from .model import Scorer, TrainingLog, make_feature_map, train_task

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
TRAINING_FILE = "training.csv"
CONFIG_FILE = "config.json"
BOUNDS_FILE = "bounds.json"
LOG_FILE = "log.txt"
SUMMARY_FILE = "summary.csv"
METRICS_COLUMNS = ("checkpoint", "task", "macro_auc", "overall", "forgetting_mean")


@contextmanager
def stage(name: str, task: Optional[int] = None) -> Iterator[None]:
    """Re-raise any failure inside the block as a StageError naming the stage"""
    try:
        yield
    except StageError:
        raise
    except (MauclError, ValueError, ArithmeticError, OSError) as e:
        raise StageError(name, e, task) from e


@contextmanager
def run_log(run_dir: Path) -> Iterator[None]:
    """Copy maucl log records into <run dir>/log.txt while the block runs"""
    level = getattr(logging, os.getenv("MAUCL_LOG_LEVEL", "INFO").upper(), logging.INFO)
    package_logger = logging.getLogger("maucl")
    previous = package_logger.level
    handler = logging.FileHandler(run_dir / LOG_FILE, mode="w", encoding="utf-8")
    handler.setLevel(level)
    handler.setFormatter(logging.Formatter("%(asctime)s - %(name)s - %(levelname)s - %(message)s"))
    package_logger.addHandler(handler)
    if package_logger.getEffectiveLevel() > level:
        package_logger.setLevel(level)
    try:
        yield
    finally:
        package_logger.removeHandler(handler)
        package_logger.setLevel(previous)
        handler.close()


# ---------------------------------------------------------------------------
# Data for one seed
# ---------------------------------------------------------------------------

def load_source(cfg: ExperimentConfig, run_seed: int) -> Union[MultiLabelDataset, TaskSequence]:
    """Generated dataset (seeded by generator seed and run seed) or the configured file"""
    if cfg.generator is not None:
        gen = replace(cfg.generator, seed=derive_seed(cfg.generator.seed, run_seed, STAGES["generate"]))
        return generate_synthetic(gen)
    return load(cfg.dataset)


def build_tasks(cfg: ExperimentConfig, run_seed: int) -> TaskSequence:
    with stage("generate"):
        source = load_source(cfg, run_seed)
    with stage("split"):
        if isinstance(source, TaskSequence):
            if len(source) != cfg.tasks:
                raise ConfigError(f"dataset holds {len(source)} tasks but config asks for {cfg.tasks}")
            source.validate()
            return source
        return split_tasks(source, cfg.tasks, derive_seed(cfg.split_seed, run_seed, STAGES["split"]),
                           negative_ratio=cfg.negative_ratio)


def holdout_tasks(cfg: ExperimentConfig, tasks: TaskSequence,
                  run_seed: int) -> List[Tuple[Task, MultiLabelDataset, MultiLabelDataset]]:
    """Seeded train/test split of every task"""
    out = []
    for task in tasks:
        with stage("split", task.task_id):
            train, test = holdout_split(task.data, cfg.test_fraction,
                                        derive_seed(run_seed, STAGES["holdout"], task.task_id))
        out.append((task, train, test))
    return out


def new_scorer(cfg: ExperimentConfig, input_dim: int, num_classes: int, run_seed: int) -> Scorer:
    spec = dict(cfg.feature_map)
    if spec.get("kind", "identity") != "identity":
        spec["seed"] = derive_seed(int(spec.get("seed", 0)), run_seed)
    return Scorer(num_classes, make_feature_map(spec, input_dim), norm_cap=cfg.norm_cap)


# ---------------------------------------------------------------------------
# One seed
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    seed: int
    record: RunRecord
    overall: List[float]
    forgetting_mean: Optional[float]
    run_dir: Path
    training: List[TrainingLog] = field(default_factory=list)

    @property
    def final_overall(self) -> float:
        return self.overall[-1]


def run_seed(cfg: ExperimentConfig, seed: int) -> RunResult:
    """Replay training over every task for one seed and write its run directory"""
    run_dir = Path(cfg.out) / f"seed_{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    with run_log(run_dir):
        logger.info(f"🚀 Run seed {seed}: loss={cfg.loss.kind.value}, policy={cfg.policy.value}, "
                    f"M={cfg.memory_size}, T={cfg.tasks}")
        with stage("write"):
            snapshot = {**cfg.resolved(), "seeds": [seed], "workers": 1}
            (run_dir / CONFIG_FILE).write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n",
                                               encoding="utf-8")

        tasks = build_tasks(cfg, seed)
        splits = holdout_tasks(cfg, tasks, seed)
        first = splits[0][1]
        scorer = new_scorer(cfg, first.d, tasks.total_classes, seed)
        sgd = replace(cfg.sgd, seed=derive_seed(cfg.sgd.seed, seed, STAGES["train"]))
        memory = None
        if cfg.policy is not UpdatePolicy.NONE:
            memory = MemoryBuffer(cfg.memory_size, cfg.policy, cfg.wru_subset)
        record = RunRecord.empty(len(tasks))
        logs: List[TrainingLog] = []
        bounds: Dict[str, Any] = {"delta": cfg.bound_delta}

        for t, (task, train, _) in enumerate(splits):
            with stage("train", task.task_id):
                _, log = train_task(scorer, train, memory, cfg.loss, sgd,
                                    task_id=task.task_id, classes=task.classes)
            logs.append(log)
            if t == 0:
                bounds["batch"] = _batch_bound(cfg, scorer, train, task.classes)
            if memory is not None:
                with stage("memory", task.task_id):
                    memory.update(task.task_id, train, derive_seed(seed, STAGES["memory"], task.task_id))
                    memory.check_invariants()
            with stage("evaluate", task.task_id):
                for j, (seen, _, test) in enumerate(splits[:t + 1]):
                    report = macro_auc(scorer.forward(test.features), test.labels, seen.classes, cfg.ties)
                    record.record(t, j, report.macro)
                    if report.skipped:
                        record.skipped[(t, j)] = report.skipped
            logger.info(f"✅ Task {task.task_id} done: overall Macro-AUC {overall_macro_auc(record, t + 1):.4f}")

        bounds["continual"] = _continual_terms(cfg, scorer, [(task, train) for task, train, _ in splits])
        overall = record.overall
        forgetting_mean = None
        if len(tasks) > 1:
            forgetting_mean = forgetting(record, convention=cfg.forgetting)[1]

        with stage("write"):
            write_metrics(run_dir / METRICS_FILE, record, cfg.forgetting)
            write_training(run_dir / TRAINING_FILE, logs)
            (run_dir / BOUNDS_FILE).write_text(json.dumps(bounds, indent=2, sort_keys=True) + "\n",
                                               encoding="utf-8")
        logger.info(f"✅ Seed {seed} finished: final overall Macro-AUC {overall[-1]:.4f}")
    return RunResult(seed, record, overall, forgetting_mean, run_dir, logs)


def _finite(value: float) -> Optional[float]:
    return float(value) if math.isfinite(value) else None


def _task_schedule(cfg: ExperimentConfig, data: MultiLabelDataset, classes: Sequence[int]):
    counts = {k: int(data.labels[:, k].sum()) for k in classes}
    # the bounds are stated for margin losses, so baselines report them at the configured lambda
    margin_cfg = cfg.loss if cfg.loss.uses_margins else replace(cfg.loss, kind=LossKind.RLDAM)
    return schedule_for(margin_cfg, counts, data.num_classes)


def _batch_bound(cfg: ExperimentConfig, scorer: Scorer, data: MultiLabelDataset,
                 classes: Sequence[int]) -> Optional[Dict[str, Optional[float]]]:
    try:
        sched = _task_schedule(cfg, data, classes)
        inputs = bound_inputs_for(scorer, data, classes, sched, cfg.loss.base, cfg.bound_delta)
        risk = task_risk(scorer.forward(data.features), data.labels, classes,
                         ClassWeights.from_labels(data.labels), sched,
                         replace(cfg.loss, kind=LossKind.RLDAM)).value
        terms = batch_bound(inputs, risk)
    except MauclError as e:
        logger.warning(f"⚠️ Batch bound skipped: {e}")
        return None
    return {"empirical_risk": _finite(risk), "complexity": _finite(terms.complexity),
            "confidence": _finite(terms.confidence), "total": _finite(terms.total)}


def _continual_terms(cfg: ExperimentConfig, scorer: Scorer,
                     seen: Sequence[Tuple[Task, MultiLabelDataset]]) -> List[Dict[str, Any]]:
    rows = []
    for task, data in seen:
        try:
            inputs = bound_inputs_for(scorer, data, task.classes, _task_schedule(cfg, data, task.classes),
                                      cfg.loss.base, cfg.bound_delta)
            [(epsilon, xi)] = continual_bound_terms([inputs])
        except MauclError as e:
            logger.warning(f"⚠️ Bound terms for task {task.task_id} skipped: {e}")
            epsilon = xi = math.nan
        rows.append({"task": task.task_id, "epsilon": _finite(epsilon), "xi": _finite(xi)})
    return rows


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------

def _fmt(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.6f}"


def write_metrics(path: Path, record: RunRecord, convention: str = "max") -> Path:
    """One row per (checkpoint, task) cell, then one `all` row per checkpoint.

    Checkpoints and tasks are numbered from 1. The `all` row carries the
    overall Macro-AUC and, from the second checkpoint on, the mean forgetting
    measured at that checkpoint.
    """
    lines = [",".join(METRICS_COLUMNS)]
    a = record.auc_matrix
    for l in range(record.num_tasks):
        for j in range(l + 1):
            lines.append(f"{l + 1},{j + 1},{_fmt(a[l, j])},,")
    overall = record.overall
    for l in range(record.num_tasks):
        mean_f = forgetting(record, T=l + 1, convention=convention)[1] if l >= 1 else None
        lines.append(f"{l + 1},all,,{_fmt(overall[l])},{_fmt(mean_f)}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def write_training(path: Path, logs: Sequence[TrainingLog]) -> Path:
    lines = ["task,epoch,train_risk,objective"]
    for log in logs:
        for epoch, (risk, objective) in enumerate(zip(log.epoch_risks, log.epoch_objectives), start=1):
            lines.append(f"{log.task_id},{epoch},{_fmt(risk)},{_fmt(objective)}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _mean_sd(values: Sequence[float]) -> Tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    sd = float(np.std(arr, ddof=1)) if len(arr) > 1 else 0.0
    return float(np.mean(arr)), sd


# ---------------------------------------------------------------------------
# Seeds in parallel
# ---------------------------------------------------------------------------

async def map_seeds_async(fn: Callable[[ExperimentConfig, int], Any],
                          cfg: ExperimentConfig,
                          seeds: Sequence[int],
                          workers: int) -> List[Any]:
    """Run fn(cfg, seed) for every seed in a process pool; results come back in seed order"""
    loop = asyncio.get_running_loop()
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [loop.run_in_executor(pool, fn, cfg, s) for s in seeds]
        results = await asyncio.gather(*futures)
    return [r for _, r in sorted(zip(seeds, results), key=lambda pair: pair[0])]


def map_seeds(fn: Callable[[ExperimentConfig, int], Any], cfg: ExperimentConfig) -> List[Any]:
    seeds = sorted(cfg.seeds)
    workers = min(cfg.workers, len(seeds))
    if workers <= 1:
        return [fn(cfg, s) for s in seeds]
    logger.info(f"🚀 Running {len(seeds)} seeds on {workers} worker processes")
    return asyncio.run(map_seeds_async(fn, cfg, seeds, workers))


@dataclass
class ExperimentResult:
    runs: List[RunResult]
    mean: float
    sd: float
    summary_path: Path

    @property
    def seeds(self) -> List[int]:
        return [r.seed for r in self.runs]


def run(cfg: ExperimentConfig) -> ExperimentResult:
    """All seeds of one configuration plus `<out>/summary.csv`"""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    runs = map_seeds(run_seed, cfg)
    mean, sd = _mean_sd([r.final_overall for r in runs])

    lines = ["seed,final_overall,forgetting_mean"]
    for r in runs:
        lines.append(f"{r.seed},{_fmt(r.final_overall)},{_fmt(r.forgetting_mean)}")
    lines.append(f"mean,{_fmt(mean)},")
    lines.append(f"sd,{_fmt(sd)},")
    summary = out / SUMMARY_FILE
    summary.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"✅ {len(runs)} seeds: overall Macro-AUC {mean:.4f} ± {sd:.4f}")
    return ExperimentResult(runs, mean, sd, summary)


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AblationCombo:
    reweighting: bool
    margins: bool
    wru: bool

    @property
    def valid(self) -> bool:
        # WRU keeps the stored counts the reweighting factors need
        return self.reweighting or not self.wru

    @property
    def loss(self) -> LossKind:
        if self.reweighting:
            return LossKind.RLDAM if self.margins else LossKind.RU
        return LossKind.LDAM if self.margins else LossKind.BCE

    @property
    def policy(self) -> UpdatePolicy:
        return UpdatePolicy.WRU if self.wru else UpdatePolicy.RANDOM

    @property
    def name(self) -> str:
        return f"{self.loss.value}-{self.policy.value}"


def ablation_grid() -> List[AblationCombo]:
    """The 2x2x2 toggle grid minus invalid combos, baseline first, full method last"""
    combos = [AblationCombo(r, m, w) for w in (False, True) for r in (False, True) for m in (False, True)]
    return [c for c in combos if c.valid]


@dataclass
class AblationRow:
    combo: AblationCombo
    mean: float
    sd: float
    n_seeds: int


def ablate(cfg: ExperimentConfig, grid: Optional[Sequence[AblationCombo]] = None) -> List[AblationRow]:
    """One run per (combo, seed); writes `<out>/ablation.csv` with mean and sd per combo"""
    if len(cfg.seeds) < 2:
        raise ConfigError("ablation needs at least two seeds")
    grid = list(ablation_grid() if grid is None else grid)
    invalid = [c for c in grid if not c.valid]
    if invalid:
        raise ConfigError(f"invalid ablation combos: {[c.name for c in invalid]}")
    out = Path(cfg.out)
    rows = []
    for combo in grid:
        logger.info(f"🚀 Ablation combo {combo.name}")
        combo_cfg = cfg.with_overrides(loss=combo.loss.value, policy=combo.policy.value,
                                       out=str(out / "ablation" / combo.name))
        result = run(combo_cfg)
        rows.append(AblationRow(combo, result.mean, result.sd, len(result.runs)))

    lines = ["reweighting,margins,wru,loss,policy,mean,sd,n_seeds"]
    for r in rows:
        c = r.combo
        lines.append(f"{int(c.reweighting)},{int(c.margins)},{int(c.wru)},{c.loss.value},{c.policy.value},"
                     f"{_fmt(r.mean)},{_fmt(r.sd)},{r.n_seeds}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return rows


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

SWEEP_PARAMETERS = ("memory_size", "lambda")


@dataclass
class SweepRow:
    parameter: str
    value: float
    method: str
    mean: float
    sd: float


def sweep(cfg: ExperimentConfig,
          parameter: str,
          values: Sequence[float],
          include_baseline: bool = False) -> List[SweepRow]:
    """One aggregated row per value (and per method with the ER-BCE baseline)"""
    if parameter not in SWEEP_PARAMETERS:
        raise ConfigError(f"sweep parameter must be one of {SWEEP_PARAMETERS}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    out = Path(cfg.out)
    methods = [("configured", {})]
    if include_baseline:
        methods.append(("er-bce", {"loss": LossKind.BCE.value, "policy": UpdatePolicy.RANDOM.value}))

    rows = []
    for value in values:
        value = int(value) if parameter == "memory_size" else float(value)
        for method, overrides in methods:
            logger.info(f"🚀 Sweep {parameter}={value} ({method})")
            point = cfg.with_overrides(**{parameter: value}, **overrides,
                                       out=str(out / f"sweep_{parameter}" / f"{method}_{value}"))
            result = run(point)
            rows.append(SweepRow(parameter, value, method, result.mean, result.sd))

    lines = ["parameter,value,method,mean,sd"]
    lines += [f"{r.parameter},{r.value},{r.method},{_fmt(r.mean)},{_fmt(r.sd)}" for r in rows]
    out.mkdir(parents=True, exist_ok=True)
    (out / f"sweep_{parameter}.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return rows


# ---------------------------------------------------------------------------
# Batch-mode comparison
# ---------------------------------------------------------------------------

BATCH_KINDS = (LossKind.RLDAM, LossKind.RU, LossKind.BCE)


def batch_seed(cfg: ExperimentConfig, seed: int) -> Dict[str, float]:
    """Single-task training on the whole dataset, one scorer per loss kind"""
    with stage("generate"):
        source = load_source(cfg, seed)
        if isinstance(source, TaskSequence):
            raise ConfigError("batch comparison needs a dataset file, not a task sequence")
    with stage("split"):
        train, test = holdout_split(source, cfg.test_fraction, derive_seed(seed, STAGES["holdout"], 0))
    sgd = replace(cfg.sgd, seed=derive_seed(cfg.sgd.seed, seed, STAGES["train"]))
    classes = list(source.class_ids)
    scores = {}
    for kind in BATCH_KINDS:
        scorer = new_scorer(cfg, train.d, source.num_classes, seed)
        with stage("train"):
            train_task(scorer, train, None, replace(cfg.loss, kind=kind), sgd, task_id=1, classes=classes)
        with stage("evaluate"):
            scores[kind.value] = macro_auc(scorer.forward(test.features), test.labels, classes, cfg.ties).macro
        logger.info(f"✅ Batch seed {seed}, {kind.value}: Macro-AUC {scores[kind.value]:.4f}")
    return scores


@dataclass
class BatchRow:
    loss: str
    mean: float
    sd: float
    per_seed: Dict[int, float]


def batch_compare(cfg: ExperimentConfig) -> List[BatchRow]:
    """Mean and sd of single-task Macro-AUC per loss kind; writes `<out>/batch.csv`"""
    seeds = sorted(cfg.seeds)
    per_seed = map_seeds(batch_seed, cfg)
    rows = []
    for kind in BATCH_KINDS:
        values = {s: r[kind.value] for s, r in zip(seeds, per_seed)}
        mean, sd = _mean_sd(list(values.values()))
        rows.append(BatchRow(kind.value, mean, sd, values))

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["loss,mean,sd,n_seeds"]
    lines += [f"{r.loss},{_fmt(r.mean)},{_fmt(r.sd)},{len(r.per_seed)}" for r in rows]
    (out / "batch.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return rows
