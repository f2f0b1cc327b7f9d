"""Tests for the experiment harness: runs, determinism, ablation, sweeps and batch mode"""

import json

import pytest

from maucl import harness
from maucl.config import load_config
from maucl.dataset import generate_synthetic, save, split_tasks
from maucl.errors import ConfigError, NonFiniteGradientError, StageError
from maucl.harness import (
    AblationCombo,
    ablate,
    ablation_grid,
    batch_compare,
    map_seeds_async,
    run,
    run_seed,
    sweep,
)
from maucl.loss import LossKind
from maucl.memory import UpdatePolicy

from conftest import tiny_experiment


def read(path):
    return path.read_bytes()


class TestRunSeed:
    def test_writes_run_directory(self, tiny_cfg):
        result = run_seed(tiny_cfg, 0)
        for name in ("config.json", "metrics.csv", "training.csv", "bounds.json", "log.txt"):
            assert (result.run_dir / name).exists()

        lines = (result.run_dir / "metrics.csv").read_text().splitlines()
        assert lines[0] == "checkpoint,task,macro_auc,overall,forgetting_mean"
        # three cells of the 2x2 lower triangle plus one summary row per checkpoint
        assert len(lines) == 1 + 3 + 2
        assert lines[4].startswith("1,all,,") and lines[4].endswith(",")
        assert lines[5].startswith("2,all,,")

        assert result.record.num_tasks == 2
        assert 0.0 <= result.final_overall <= 1.0
        assert result.forgetting_mean is not None and result.forgetting_mean >= 0.0

    def test_training_log_covers_every_epoch(self, tiny_cfg):
        result = run_seed(tiny_cfg, 1)
        lines = (result.run_dir / "training.csv").read_text().splitlines()
        assert lines[0] == "task,epoch,train_risk,objective"
        assert len(lines) == 1 + 2 * tiny_cfg.sgd.epochs
        assert not result.training[0].replay
        assert result.training[1].replay

    def test_sequential_finetuning_never_replays(self, tmp_path):
        result = run_seed(tiny_experiment(tmp_path, policy="none"), 0)
        assert not any(log.replay for log in result.training)
        assert len((result.run_dir / "metrics.csv").read_text().splitlines()) == 1 + 3 + 2
        assert result.forgetting_mean is not None and result.forgetting_mean >= 0.0

    def test_bounds_file(self, tiny_cfg):
        result = run_seed(tiny_cfg, 0)
        bounds = json.loads((result.run_dir / "bounds.json").read_text())
        assert bounds["delta"] == 0.05
        assert [row["task"] for row in bounds["continual"]] == [1, 2]

    def test_identical_runs_write_identical_csvs(self, tmp_path):
        a = run_seed(tiny_experiment(tmp_path / "a"), 0)
        b = run_seed(tiny_experiment(tmp_path / "b"), 0)
        assert read(a.run_dir / "metrics.csv") == read(b.run_dir / "metrics.csv")
        assert read(a.run_dir / "training.csv") == read(b.run_dir / "training.csv")

    def test_snapshot_reproduces_run(self, tmp_path):
        first = run_seed(tiny_experiment(tmp_path / "first", policy="reservoir"), 1)
        snapshot = load_config(first.run_dir / "config.json")
        assert snapshot.seeds == (1,)
        again = run_seed(snapshot.with_overrides(out=str(tmp_path / "again")), 1)
        assert read(first.run_dir / "metrics.csv") == read(again.run_dir / "metrics.csv")

    def test_single_task_is_batch_learning(self, tmp_path):
        cfg = tiny_experiment(tmp_path, tasks=1)
        result = run_seed(cfg, 0)
        assert result.forgetting_mean is None
        lines = (result.run_dir / "metrics.csv").read_text().splitlines()
        assert len(lines) == 3
        assert lines[2].startswith("1,all,,") and lines[2].endswith(",")
        assert not result.training[0].replay

    def test_failure_names_stage_and_task(self, tiny_cfg, monkeypatch):
        def broken(*args, **kwargs):
            raise NonFiniteGradientError("non-finite gradient at 1 entries")

        monkeypatch.setattr(harness, "train_task", broken)
        with pytest.raises(StageError) as info:
            run_seed(tiny_cfg, 0)
        assert info.value.stage == "train"
        assert info.value.task == 1
        assert isinstance(info.value.cause, NonFiniteGradientError)

    def test_runs_from_task_sequence_file(self, tmp_path, tiny_cfg):
        ds = generate_synthetic(tiny_cfg.generator)
        path = save(split_tasks(ds, 2, seed=0), tmp_path / "tasks.jsonl")
        cfg = tiny_experiment(tmp_path / "runs", generator=None, dataset=str(path), tasks=2)
        result = run_seed(cfg, 0)
        assert result.record.num_tasks == 2

    def test_task_count_must_match_file(self, tmp_path, tiny_cfg):
        ds = generate_synthetic(tiny_cfg.generator)
        path = save(split_tasks(ds, 2, seed=0), tmp_path / "tasks.jsonl")
        cfg = tiny_experiment(tmp_path / "runs", generator=None, dataset=str(path), tasks=4)
        with pytest.raises(StageError) as info:
            run_seed(cfg, 0)
        assert info.value.stage == "split"


class TestRun:
    def test_summary_over_seeds(self, tiny_cfg):
        result = run(tiny_cfg)
        assert result.seeds == [0, 1]
        lines = result.summary_path.read_text().splitlines()
        assert lines[0] == "seed,final_overall,forgetting_mean"
        assert [line.split(",")[0] for line in lines[1:]] == ["0", "1", "mean", "sd"]

    def test_parallel_matches_serial(self, tmp_path):
        serial = run(tiny_experiment(tmp_path / "serial"))
        parallel = run(tiny_experiment(tmp_path / "parallel", workers=2))
        for a, b in zip(serial.runs, parallel.runs):
            assert read(a.run_dir / "metrics.csv") == read(b.run_dir / "metrics.csv")
        assert serial.mean == parallel.mean

    @pytest.mark.asyncio
    async def test_async_map_returns_seed_order(self, tmp_path):
        cfg = tiny_experiment(tmp_path, seeds=[1, 0])
        results = await map_seeds_async(run_seed, cfg, [1, 0], workers=2)
        assert [r.seed for r in results] == [0, 1]


class TestAblation:
    def test_grid_has_six_valid_combos(self):
        grid = ablation_grid()
        assert len(grid) == 6
        assert grid[0] == AblationCombo(False, False, False)
        assert grid[0].loss is LossKind.BCE and grid[0].policy is UpdatePolicy.RANDOM
        assert grid[-1].name == "rldam-wru"
        assert not AblationCombo(reweighting=False, margins=True, wru=True).valid

    def test_one_row_per_combo(self, tmp_path):
        cfg = tiny_experiment(tmp_path, epochs=1)
        rows = ablate(cfg)
        assert len(rows) == 6
        assert all(r.n_seeds == 2 for r in rows)
        lines = (tmp_path / "ablation.csv").read_text().splitlines()
        assert lines[0] == "reweighting,margins,wru,loss,policy,mean,sd,n_seeds"
        assert len(lines) == 7

    def test_needs_two_seeds(self, tmp_path):
        with pytest.raises(ConfigError):
            ablate(tiny_experiment(tmp_path, seeds=[0]))

    def test_rejects_invalid_combo(self, tmp_path):
        with pytest.raises(ConfigError):
            ablate(tiny_experiment(tmp_path), grid=[AblationCombo(False, True, True)])


class TestSweep:
    def test_single_value_equals_run(self, tmp_path):
        cfg = tiny_experiment(tmp_path / "sweep")
        [row] = sweep(cfg, "lambda", [1.0])
        assert row.mean == run(tiny_experiment(tmp_path / "plain")).mean
        lines = (tmp_path / "sweep" / "sweep_lambda.csv").read_text().splitlines()
        assert lines == ["parameter,value,method,mean,sd", f"lambda,1.0,configured,{row.mean:.6f},{row.sd:.6f}"]

    def test_baseline_rows(self, tmp_path):
        rows = sweep(tiny_experiment(tmp_path, epochs=1), "memory_size", [10, 20], include_baseline=True)
        assert [(r.value, r.method) for r in rows] == [
            (10, "configured"), (10, "er-bce"), (20, "configured"), (20, "er-bce")]

    def test_unknown_parameter(self, tmp_path):
        with pytest.raises(ConfigError):
            sweep(tiny_experiment(tmp_path), "eta", [0.1])

    def test_empty_values(self, tmp_path):
        with pytest.raises(ConfigError):
            sweep(tiny_experiment(tmp_path), "lambda", [])


class TestBatchCompare:
    def test_one_row_per_loss(self, tmp_path):
        rows = batch_compare(tiny_experiment(tmp_path, epochs=2))
        assert [r.loss for r in rows] == ["rldam", "ru", "bce"]
        assert all(sorted(r.per_seed) == [0, 1] for r in rows)
        assert (tmp_path / "batch.csv").read_text().splitlines()[0] == "loss,mean,sd,n_seeds"

    def test_rejects_task_sequence_file(self, tmp_path, tiny_cfg):
        ds = generate_synthetic(tiny_cfg.generator)
        path = save(split_tasks(ds, 2, seed=0), tmp_path / "tasks.jsonl")
        cfg = tiny_experiment(tmp_path / "runs", generator=None, dataset=str(path), tasks=2)
        with pytest.raises(StageError) as info:
            batch_compare(cfg)
        assert isinstance(info.value.cause, ConfigError)
