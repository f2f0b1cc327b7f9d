#!/usr/bin/env python3
"""
Quick script to check a maucl JSON-lines file and print per-class statistics
"""

import os
import sys
from pathlib import Path

from dotenv import load_dotenv

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from maucl.dataset import MultiLabelDataset, TaskSequence, class_stats, load  # noqa: E402
from maucl.errors import MauclError  # noqa: E402

load_dotenv()

DATASET_PATH = os.getenv('MAUCL_DATASET', 'data/synth.jsonl')


def print_stats(ds: MultiLabelDataset, title: str):
    print(f"=== {title} (n={ds.n}, d={ds.d}) ===")
    for k, (pos, neg, tau) in class_stats(ds).items():
        print(f"class {k:>3}: pos={pos:>6} neg={neg:>6} tau={tau:.4f}")
    both = int((ds.labels[:, list(ds.class_ids)].sum(axis=1) >= 2).sum())
    print(f"examples with >= 2 labels: {both}")


def check_dataset(path: str):
    """Check dataset contents"""
    try:
        obj = load(path)
        if isinstance(obj, TaskSequence):
            obj.validate()
            print(f"Task sequence: {len(obj)} tasks over {obj.total_classes} classes\n")
            for task in obj:
                print_stats(task.data, f"TASK {task.task_id} classes {list(task.classes)}")
                print()
        else:
            print_stats(obj, "DATASET")
        print("\n✅ Dataset check complete!")
        return 0
    except MauclError as e:
        print(f"❌ Dataset error: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(check_dataset(sys.argv[1] if len(sys.argv) > 1 else DATASET_PATH))
