"""Tests for pipeline/run.py: every subcommand on a tiny run, exit codes and reproducibility."""

import os
import subprocess
import sys

import numpy as np
import pandas as pd
import pytest
import yaml

import pipeline.train
from pipeline.load import load_checkpoint, load_dataset, read_metrics
from pipeline.run import EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_INTERNAL, EXIT_OK, EXIT_STORAGE, main
from spin.schedule import make_schedule

TINY = {
    "name": "tiny",
    "task": {"n_records": 256},
    "schedule": {"T": 4, "eta": 0.5},
    "model": {"hidden": [8, 8], "time_dim": 4},
    "loss": {"beta_scales": [1.0, 2.5]},
    "trainer": {
        "iterations": 2,
        "spin_steps": [6, 6],
        "spin_lr": [1e-3, 1e-3],
        "base_steps": 10,
        "sft_steps": 10,
        "warmup": 2,
        "batch_size": 16,
        "checkpoint_every": 5,
    },
    "eval": {"n_samples": 100, "n_prompts": 100, "during_training": False},
}


def _dead_pid():
    child = subprocess.Popen([sys.executable, "-c", "pass"])
    child.wait()
    return child.pid


def _write_config(path, **sections):
    cfg = {key: dict(value) if isinstance(value, dict) else value for key, value in TINY.items()}
    for section, values in sections.items():
        cfg[section] = {**cfg.get(section, {}), **values}
    path.write_text(yaml.safe_dump(cfg), encoding="utf-8")
    return path


class TestCli:
    @pytest.fixture(autouse=True)
    def setup_run(self, tmp_path):
        """A tiny config and a run directory per test."""
        self.tmp = tmp_path
        self.config = _write_config(tmp_path / "tiny.yaml")
        self.run_dir = tmp_path / "run"
        yield

    def _run(self, command, *extra, config=None, run_dir=None):
        argv = [command, "--config", str(config or self.config), "--run-dir", str(run_dir or self.run_dir)]
        return main([*argv, *extra])

    def test_usage_errors(self):
        assert main(["explode"]) == EXIT_CONFIG
        assert main(["gen-data", "--frobnicate"]) == EXIT_CONFIG
        assert main([]) == EXIT_CONFIG

    def test_gen_data(self):
        assert self._run("gen-data") == EXIT_OK
        dataset = load_dataset(self.run_dir / "dataset.bin")
        assert len(dataset) == 256
        assert dataset.seed == 0
        resolved = yaml.safe_load((self.run_dir / "resolved_config.yaml").read_text())
        assert len(resolved["schedule"]["alpha"]) == 5
        assert resolved["task"]["target"]["data_dim"] == 2

    def test_resolved_config_pins_schedule_arrays(self):
        assert self._run("gen-data") == EXIT_OK
        resolved_path = self.run_dir / "resolved_config.yaml"
        pinned = yaml.safe_load(resolved_path.read_text())["schedule"]
        expected = make_schedule(4, "cosine", 0.5).to_dict()
        for key in ("alpha", "sigma", "gamma", "h"):
            np.testing.assert_array_equal(pinned[key], expected[key])

        # The resolved config is itself a valid config and pins the same schedule.
        again = self.tmp / "again"
        assert self._run("gen-data", config=resolved_path, run_dir=again) == EXIT_OK
        assert yaml.safe_load((again / "resolved_config.yaml").read_text())["schedule"] == pinned

    def test_pinned_sigma_must_match_alpha(self):
        assert self._run("gen-data") == EXIT_OK
        resolved = yaml.safe_load((self.run_dir / "resolved_config.yaml").read_text())
        resolved["schedule"]["sigma"][-1] *= 1.5
        edited = self.tmp / "edited.yaml"
        edited.write_text(yaml.safe_dump(resolved), encoding="utf-8")
        assert self._run("gen-data", config=edited, run_dir=self.tmp / "edited") == EXIT_CONFIG

    def test_bad_config_value(self):
        config = _write_config(self.tmp / "bad.yaml", schedule={"T": 1})
        assert self._run("gen-data", config=config) == EXIT_CONFIG

    def test_zero_sft_steps_keep_the_base_model(self):
        config = _write_config(self.tmp / "zero.yaml", trainer={"sft_steps": 0})
        assert self._run("train-sft", config=config) == EXIT_OK
        base, _ = load_checkpoint(self.run_dir / "checkpoints" / "base.ckpt")
        final, _ = load_checkpoint(self.run_dir / "checkpoints" / "sft-final.ckpt")
        assert final.checksum() == base.checksum()

    def test_train_sft_writes_step_checkpoints(self):
        assert self._run("train-sft") == EXIT_OK
        names = {p.name for p in (self.run_dir / "checkpoints").iterdir()}
        assert {"base.ckpt", "sft-step000005.ckpt", "sft-step000010.ckpt", "sft-final.ckpt", "best.ckpt"} <= names
        steps = read_metrics(self.run_dir / "metrics.jsonl", kind="sft_step")
        assert len(steps) == 10

    def test_train_sft_evaluates_during_training(self):
        config = _write_config(self.tmp / "eval.yaml", eval={"during_training": True})
        assert self._run("train-sft", config=config) == EXIT_OK
        evals = read_metrics(self.run_dir / "metrics.jsonl", kind="eval")
        assert list(evals["checkpoint_id"]) == ["base", "sft-step000005", "sft-step000010"]
        assert (self.run_dir / "checkpoints" / "best.ckpt").exists()
        assert (self.run_dir / "reports" / "base.yaml").exists()

    def test_corrupt_dataset(self):
        assert self._run("gen-data") == EXIT_OK
        path = self.run_dir / "dataset.bin"
        raw = bytearray(path.read_bytes())
        raw[40] ^= 0x01
        path.write_bytes(bytes(raw))
        assert self._run("train-sft") == EXIT_STORAGE

    def test_divergence_exit_code(self):
        config = _write_config(self.tmp / "hot.yaml", trainer={"sft_lr": 1e300, "warmup": 0})
        assert self._run("train-sft", config=config) == EXIT_DIVERGENCE

    def test_existing_lock(self):
        self.run_dir.mkdir()
        (self.run_dir / "run.lock").write_text(f"{os.getpid()}\n")
        assert self._run("gen-data") == EXIT_STORAGE
        assert (self.run_dir / "run.lock").read_text() == f"{os.getpid()}\n"

    def test_spin_checkpoints_are_reproducible(self):
        other = self.tmp / "again"
        assert self._run("train-spin") == EXIT_OK
        assert self._run("train-spin", run_dir=other) == EXIT_OK
        for name in ("base.ckpt", "spin-iter0.ckpt", "spin-iter1.ckpt", "spin-iter2.ckpt"):
            first = (self.run_dir / "checkpoints" / name).read_bytes()
            second = (other / "checkpoints" / name).read_bytes()
            assert first == second, name

    def test_resume_after_kill_matches_uninterrupted_run(self):
        other = self.tmp / "resumed"
        assert self._run("train-spin") == EXIT_OK
        assert self._run("train-spin", run_dir=other) == EXIT_OK
        # A process killed during iteration 2: no final checkpoint, its lock left behind.
        (other / "checkpoints" / "spin-iter2.ckpt").unlink()
        (other / "run.lock").write_text(f"{_dead_pid()}\n")
        assert self._run("train-spin", "--resume", run_dir=other) == EXIT_OK
        assert not (other / "run.lock").exists()
        expected = (self.run_dir / "checkpoints" / "spin-iter2.ckpt").read_bytes()
        assert (other / "checkpoints" / "spin-iter2.ckpt").read_bytes() == expected

    def test_opponent_change_is_an_internal_error(self, monkeypatch):
        decomposed = pipeline.train.spin_gradient_decomposed

        def tampering(theta, theta_k, *args, **kwargs):
            theta_k.weights[-1][...] += 1.0
            return decomposed(theta, theta_k, *args, **kwargs)

        monkeypatch.setattr(pipeline.train, "spin_gradient_decomposed", tampering)
        assert self._run("train-spin") == EXIT_INTERNAL
        assert not (self.run_dir / "run.lock").exists()

    def test_resume_with_nothing_left(self):
        assert self._run("train-spin") == EXIT_OK
        assert self._run("train-spin", "--resume") == EXIT_OK

    def test_exact_variant_runs(self):
        config = _write_config(self.tmp / "exact.yaml", loss={"variant": "exact", "synthetic_pairs": "backward"})
        assert self._run("train-spin", config=config) == EXIT_OK
        assert (self.run_dir / "checkpoints" / "spin-iter2.ckpt").exists()

    def test_sample_and_eval(self):
        config = _write_config(self.tmp / "short.yaml", trainer={"sft_steps": 0})
        assert self._run("train-sft", config=config) == EXIT_OK
        checkpoint = str(self.run_dir / "checkpoints" / "base.ckpt")

        code = self._run("sample", "--checkpoint", checkpoint, "--condition", "1", "--n", "10", "--trajectory")
        assert code == EXIT_OK
        samples = pd.read_csv(self.run_dir / "samples" / "base-c1.csv")
        assert len(samples) == 10
        assert set(samples["condition"]) == {1}
        trajectory = pd.read_csv(self.run_dir / "samples" / "base-c1-trajectory.csv")
        assert len(trajectory) == 10 * 5

        assert self._run("eval", "--checkpoint", checkpoint) == EXIT_OK
        report = yaml.safe_load((self.run_dir / "reports" / "base.yaml").read_text())
        assert report["phase"] == "eval"
        assert [row["condition"] for row in report["per_condition"]] == ["0", "1", "2", "3"]

    def test_sample_rejects_bad_condition(self):
        config = _write_config(self.tmp / "short.yaml", trainer={"sft_steps": 0})
        assert self._run("train-sft", config=config) == EXIT_OK
        checkpoint = str(self.run_dir / "checkpoints" / "base.ckpt")
        assert self._run("sample", "--checkpoint", checkpoint, "--condition", "4") == EXIT_CONFIG
        assert self._run("sample", "--checkpoint", checkpoint, "--condition", "0", "--n", "0") == EXIT_CONFIG

    def test_checkpoint_from_other_architecture(self):
        config = _write_config(self.tmp / "short.yaml", trainer={"sft_steps": 0})
        assert self._run("train-sft", config=config) == EXIT_OK
        checkpoint = str(self.run_dir / "checkpoints" / "base.ckpt")
        wide = _write_config(self.tmp / "wide.yaml", model={"hidden": [16, 16]})
        assert self._run("eval", "--checkpoint", checkpoint, config=wide) == EXIT_CONFIG

    def test_report_on_missing_directory(self):
        assert main(["report", str(self.tmp / "nowhere")]) == EXIT_CONFIG

    def test_report_outputs(self):
        config = _write_config(self.tmp / "eval.yaml", eval={"during_training": True})
        assert self._run("train-spin", config=config) == EXIT_OK
        assert main(["report", str(self.run_dir)]) == EXIT_OK
        plots = list((self.run_dir / "plots").iterdir())
        assert plots
        assert all(p.suffix in (".svg", ".html") for p in plots)
        summary = (self.run_dir / "summary.txt").read_text()
        assert "SPIN iterations (0 = base)" in summary
        assert "Win rates" in summary
        wins = read_metrics(self.run_dir / "metrics.jsonl", kind="win_rate")
        assert list(wins["iteration"]) == [1, 2]
