#!/usr/bin/env python3
"""
maucl command line
==================

    maucl generate --config config/generator.json --out data/synth.jsonl [--tasks T]
    maucl run      --config config/standard_benchmark.yaml [--out DIR] [--workers N]
    maucl ablate   --config ... [--out DIR]
    maucl sweep    --config ... --parameter memory_size --values 20 50 100 [--baseline]
    maucl batch    --config ... [--out DIR]
    maucl report   RUN_DIR [--plots]

Exit codes: 0 on success, 1 when a stage fails, 2 on usage errors.
"""

import argparse
import logging
import os
import sys
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

from . import dataset, harness, reporting
from .config import ExperimentConfig, derive_seed, read_mapping
from .dataset import GeneratorConfig
from .errors import ConfigError, MauclError, StageError

logger = logging.getLogger("maucl.cli")


def configure_logging() -> None:
    level = getattr(logging, os.getenv("MAUCL_LOG_LEVEL", "INFO").upper(), logging.INFO)
    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[logging.StreamHandler()]
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maucl", description="Continual multi-label learning for Macro-AUC")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="Write a synthetic dataset (or task sequence) as JSON lines")
    gen.add_argument("--config", required=True, help="Generator config (.json/.yaml)")
    gen.add_argument("--out", required=True, help="Output .jsonl file")
    gen.add_argument("--tasks", type=int, help="Also split into this many tasks and save the task sequence")
    gen.add_argument("--split-seed", type=int, default=0)
    gen.add_argument("--negative-ratio", type=float, default=1.0)

    for name, text in (("run", "Replay training over all tasks for every seed"),
                       ("ablate", "Reweighting / margin / WRU ablation grid"),
                       ("batch", "Single-task comparison of RLDAM, RU and BCE")):
        p = sub.add_parser(name, help=text)
        _experiment_args(p)

    sw = sub.add_parser("sweep", help="Sweep memory size or lambda")
    _experiment_args(sw)
    sw.add_argument("--parameter", required=True, choices=harness.SWEEP_PARAMETERS)
    sw.add_argument("--values", required=True, nargs="+", type=float)
    sw.add_argument("--baseline", action="store_true", help="Add paired ER-BCE rows")

    rep = sub.add_parser("report", help="Summarize a run directory")
    rep.add_argument("run_dir")
    rep.add_argument("--plots", action="store_true", help="Also write PNG plots")
    return parser


def _experiment_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="Experiment config (.json/.yaml)")
    p.add_argument("--out", help="Output directory (overrides the config)")
    p.add_argument("--workers", type=int, help="Worker processes for seeds (overrides MAUCL_WORKERS)")
    p.add_argument("--seeds", type=int, nargs="+", help="Override the seed list")


def load_experiment(args: argparse.Namespace) -> ExperimentConfig:
    overrides: Dict[str, Any] = {}
    if args.out:
        overrides["out"] = args.out
    if args.seeds:
        overrides["seeds"] = args.seeds
    if args.workers is not None:
        overrides["workers"] = args.workers
    elif os.getenv("MAUCL_WORKERS"):
        try:
            overrides["workers"] = int(os.getenv("MAUCL_WORKERS"))
        except ValueError as e:
            raise ConfigError(f"MAUCL_WORKERS must be an integer: {e}") from e
    return ExperimentConfig.from_dict({**read_mapping(args.config), **overrides})


def cmd_generate(args: argparse.Namespace) -> None:
    data = read_mapping(args.config)
    gen = GeneratorConfig.from_dict(data.get("generator", data))
    gen.validate()
    ds = dataset.generate_synthetic(gen)
    if args.tasks:
        seq = dataset.split_tasks(ds, args.tasks, derive_seed(args.split_seed, gen.seed),
                                  negative_ratio=args.negative_ratio)
        dataset.save(seq, args.out)
    else:
        dataset.save(ds, args.out)


def cmd_run(args: argparse.Namespace) -> None:
    result = harness.run(load_experiment(args))
    print(f"overall Macro-AUC {result.mean:.4f} ± {result.sd:.4f} over {len(result.runs)} seeds")


def cmd_ablate(args: argparse.Namespace) -> None:
    for row in harness.ablate(load_experiment(args)):
        print(f"{row.combo.name:<14} {row.mean:.4f} ± {row.sd:.4f}")


def cmd_sweep(args: argparse.Namespace) -> None:
    rows = harness.sweep(load_experiment(args), args.parameter, args.values, include_baseline=args.baseline)
    for row in rows:
        print(f"{row.parameter}={row.value:<8} {row.method:<10} {row.mean:.4f} ± {row.sd:.4f}")


def cmd_batch(args: argparse.Namespace) -> None:
    for row in harness.batch_compare(load_experiment(args)):
        print(f"{row.loss:<6} {row.mean:.4f} ± {row.sd:.4f}")


def cmd_report(args: argparse.Namespace) -> None:
    sys.stdout.write(reporting.report(args.run_dir, plots=args.plots))


COMMANDS = {
    "generate": cmd_generate,
    "run": cmd_run,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "batch": cmd_batch,
    "report": cmd_report,
}


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except StageError as e:
        where = e.stage if e.task is None else f"{e.stage} (task {e.task})"
        logger.error(f"❌ {where} failed: {e.cause}")
        return 1
    except MauclError as e:
        logger.error(f"❌ {args.command} failed: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
