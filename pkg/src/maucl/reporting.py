"""
Run reports
===========

Turns a run directory back into a readable summary: the lower-triangular
Macro-AUC table, the overall curve and forgetting (x100). With `plots=True`
it also draws the training curves and the overall curve as PNG files.
"""

import csv
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from .errors import ReportError
from .harness import CONFIG_FILE, METRICS_COLUMNS, METRICS_FILE, SUMMARY_FILE, TRAINING_FILE
from .metrics import RunRecord, forgetting

logger = logging.getLogger(__name__)


def read_metrics(path: Path) -> RunRecord:
    """Rebuild the AUC matrix from the per-cell rows of metrics.csv"""
    if not path.exists():
        raise ReportError(f"missing {path.name} in {path.parent}")
    try:
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            if tuple(reader.fieldnames or ()) != METRICS_COLUMNS:
                raise ReportError(f"{path}: unexpected header {reader.fieldnames}")
            cells = []
            for lineno, row in enumerate(reader, start=2):
                if row["task"] == "all":
                    continue
                try:
                    cells.append((int(row["checkpoint"]), int(row["task"]), float(row["macro_auc"])))
                except (TypeError, ValueError) as e:
                    raise ReportError(f"{path}: corrupt row at line {lineno}: {e}") from e
    except UnicodeDecodeError as e:
        raise ReportError(f"{path}: not a text file") from e
    if not cells:
        raise ReportError(f"{path}: no AUC rows")

    T = max(l for l, _, _ in cells)
    record = RunRecord.empty(T)
    for l, j, value in cells:
        if not 1 <= j <= l:
            raise ReportError(f"{path}: task {j} at checkpoint {l} is outside the lower triangle")
        record.record(l - 1, j - 1, value)
    present = {(l, j) for l, j, _ in cells}
    missing = [(l, j) for l in range(1, T + 1) for j in range(1, l + 1) if (l, j) not in present]
    if missing:
        raise ReportError(f"{path}: missing cells {missing}")
    return record


def _convention(run_dir: Path) -> str:
    path = run_dir / CONFIG_FILE
    if not path.exists():
        return "max"
    try:
        return json.loads(path.read_text(encoding="utf-8")).get("forgetting", "max")
    except json.JSONDecodeError as e:
        raise ReportError(f"{path}: corrupt JSON: {e}") from e


def format_run(run_dir: Path) -> str:
    record = read_metrics(run_dir / METRICS_FILE)
    T = record.num_tasks
    lines = [f"Run: {run_dir}", "", "Macro-AUC after each task (rows: checkpoint, columns: task)"]
    lines.append("      " + "".join(f"{'T' + str(j + 1):>9}" for j in range(T)))
    for l in range(T):
        cells = "".join(f"{record.auc_matrix[l, j]:9.4f}" for j in range(l + 1))
        lines.append(f"{l + 1:>5} {cells}")
    lines.append("")
    lines.append("Overall Macro-AUC: " + " ".join(f"{v:.4f}" for v in record.overall))
    if T >= 2:
        per_task, mean = forgetting(record, convention=_convention(run_dir))
        parts = " ".join(f"T{j}={100 * v:.2f}" for j, v in per_task.items())
        lines.append(f"Forgetting (x100): {parts}  mean={100 * mean:.2f}")
    else:
        lines.append("Forgetting: undefined for a single task")
    return "\n".join(lines)


def _read_training(path: Path) -> Dict[int, List[float]]:
    if not path.exists():
        raise ReportError(f"missing {path.name} in {path.parent}")
    curves: Dict[int, List[float]] = {}
    with open(path, newline="", encoding="utf-8") as f:
        for lineno, row in enumerate(csv.DictReader(f), start=2):
            try:
                risk = float(row["train_risk"]) if row["train_risk"] else float("nan")
                curves.setdefault(int(row["task"]), []).append(risk)
            except (KeyError, TypeError, ValueError) as e:
                raise ReportError(f"{path}: corrupt row at line {lineno}: {e}") from e
    return curves


def write_plots(run_dir: Path) -> List[Path]:
    """training_curves.png and overall.png next to the CSVs"""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    record = read_metrics(run_dir / METRICS_FILE)
    curves = _read_training(run_dir / TRAINING_FILE)
    written = []

    plt.figure()
    offset = 0
    for task_id in sorted(curves):
        ys = curves[task_id]
        plt.plot(np.arange(offset + 1, offset + len(ys) + 1), ys, label=f"task {task_id}")
        offset += len(ys)
    plt.xlabel("Epoch")
    plt.ylabel("Training risk")
    plt.grid(True, alpha=0.3)
    plt.legend()
    plt.tight_layout()
    path = run_dir / "training_curves.png"
    plt.savefig(path)
    plt.close()
    written.append(path)

    plt.figure()
    plt.plot(np.arange(1, record.num_tasks + 1), record.overall, marker="o")
    plt.xlabel("Tasks learned")
    plt.ylabel("Overall Macro-AUC")
    plt.grid(True, alpha=0.3)
    plt.tight_layout()
    path = run_dir / "overall.png"
    plt.savefig(path)
    plt.close()
    written.append(path)

    logger.info(f"✅ Wrote plots to {run_dir}")
    return written


def report(run_dir: Union[str, Path], plots: bool = False) -> str:
    """Text summary of one seed directory, or of every seed under an experiment directory"""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ReportError(f"run directory not found: {run_dir}")

    seed_dirs = sorted((p for p in run_dir.glob("seed_*") if p.is_dir() and p.name[5:].isdigit()),
                       key=lambda p: int(p.name[5:]))
    if (run_dir / METRICS_FILE).exists() or not seed_dirs:
        targets = [run_dir]
    else:
        targets = seed_dirs

    sections = []
    for target in targets:
        sections.append(format_run(target))
        if plots:
            write_plots(target)
    summary = _summary_text(run_dir)
    if summary:
        sections.append(summary)
    return "\n\n".join(sections) + "\n"


def _summary_text(run_dir: Path) -> Optional[str]:
    path = run_dir / SUMMARY_FILE
    if not path.exists():
        return None
    with open(path, newline="", encoding="utf-8") as f:
        rows = {row["seed"]: row for row in csv.DictReader(f)}
    if "mean" not in rows or "sd" not in rows:
        raise ReportError(f"{path}: missing mean/sd rows")
    return (f"Final overall Macro-AUC over {len(rows) - 2} seeds: "
            f"{float(rows['mean']['final_overall']):.4f} ± {float(rows['sd']['final_overall']):.4f}")
