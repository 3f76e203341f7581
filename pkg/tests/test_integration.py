"""Integration test: full SFT and SPIN runs on the default four-condition task.

These run the real CLI commands at the default budgets over five seeds, then
compare the recorded evaluations. Expect tens of minutes on a laptop CPU.

Marked with @pytest.mark.integration so it can be run separately
from fast unit tests: pytest -m integration
"""

import numpy as np
import pytest
import yaml

from config import RunConfig
from evaluation.metrics import evaluate
from pipeline.load import load_checkpoint, load_dataset, read_metrics
from pipeline.run import EXIT_OK, main
from pipeline.train import OptimizerConfig, TrainerOptions, train_sft
from spin.schedule import make_schedule

SEEDS = range(5)


def _write_config(path, seed, sft_run_dir=None, during_training=True):
    cfg = {
        "name": path.stem,
        "task": {"seed": seed},
        "trainer": {"seed": seed},
        "eval": {"during_training": during_training},
    }
    if sft_run_dir is not None:
        cfg["eval"]["sft_run_dir"] = str(sft_run_dir)
    path.write_text(yaml.safe_dump(cfg), encoding="utf-8")
    return str(path)


def _final_sft_eval(run_dir):
    evals = read_metrics(run_dir / "metrics.jsonl", kind="eval")
    sft = evals[evals["phase"] == "sft"]
    return sft.loc[sft["step"].idxmax()]


def _spin_eval(run_dir, iteration):
    evals = read_metrics(run_dir / "metrics.jsonl", kind="eval")
    return evals[(evals["phase"] == "spin") & (evals["iteration"] == iteration)].iloc[-1]


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    """One SFT run and one SPIN run per seed, SPIN also scored against its SFT twin."""
    root = tmp_path_factory.mktemp("acceptance")
    dirs = {}
    for seed in SEEDS:
        sft_dir, spin_dir = root / f"sft-{seed}", root / f"spin-{seed}"
        sft_config = _write_config(root / f"sft-{seed}.yaml", seed)
        assert main(["train-sft", "--config", sft_config, "--run-dir", str(sft_dir)]) == EXIT_OK
        spin_config = _write_config(root / f"spin-{seed}.yaml", seed, sft_run_dir=sft_dir)
        assert main(["train-spin", "--config", spin_config, "--run-dir", str(spin_dir)]) == EXIT_OK
        dirs[seed] = (sft_dir, spin_dir)
    return dirs


@pytest.mark.integration
class TestSpinAgainstSft:
    def test_second_iteration_matches_or_beats_sft(self, runs):
        better = 0
        for sft_dir, spin_dir in runs.values():
            sft = _final_sft_eval(sft_dir)
            spin = _spin_eval(spin_dir, 2)
            print(f"  {spin_dir.name}: SPIN {spin['energy_distance']:.4f} vs SFT {sft['energy_distance']:.4f}")
            better += spin["energy_distance"] <= sft["energy_distance"]
        assert better >= 3

    def test_win_rate_against_base(self, runs):
        rates = []
        for _, spin_dir in runs.values():
            wins = read_metrics(spin_dir / "metrics.jsonl", kind="win_rate")
            rates.append(wins[(wins["opponent"] == "base") & (wins["iteration"] == 2)]["win_rate"].iloc[-1])
        assert np.mean(rates) >= 0.6

    def test_more_sft_does_not_improve_spin(self, runs):
        cfg = RunConfig()
        schedule = make_schedule(cfg.schedule.T, cfg.schedule.shape, cfg.schedule.eta)
        opt = OptimizerConfig(lr=cfg.trainer.sft_lr, warmup=cfg.trainer.warmup, shape="constant")
        before, after, se = [], [], []
        for seed, (_, spin_dir) in runs.items():
            params, _ = load_checkpoint(spin_dir / "checkpoints" / "spin-iter2.ckpt")
            dataset = load_dataset(spin_dir / "dataset.bin")
            extra = train_sft(
                params,
                dataset,
                schedule,
                opt,
                1000,
                np.random.default_rng([seed, 20_000]),
                TrainerOptions(checkpoint_every=0),
            )
            spin_report = evaluate(params, dataset.spec, schedule, cfg.eval.n_samples, cfg.eval.seed)
            sft_report = evaluate(extra.params, dataset.spec, schedule, cfg.eval.n_samples, cfg.eval.seed)
            before.append(spin_report.aggregate.energy_distance)
            after.append(sft_report.aggregate.energy_distance)
            se.append(spin_report.aggregate.energy_distance_se)
        assert np.mean(after) >= np.mean(before) - 2 * np.mean(se)


@pytest.mark.integration
class TestDeterminism:
    def test_identical_configs_give_identical_checkpoints(self, tmp_path):
        config = _write_config(tmp_path / "determinism.yaml", seed=0, during_training=False)
        first, second = tmp_path / "first", tmp_path / "second"
        assert main(["train-spin", "--config", config, "--run-dir", str(first)]) == EXIT_OK
        assert main(["train-spin", "--config", config, "--run-dir", str(second)]) == EXIT_OK
        names = sorted(p.name for p in (first / "checkpoints").iterdir())
        assert names == sorted(p.name for p in (second / "checkpoints").iterdir())
        for name in names:
            assert (first / "checkpoints" / name).read_bytes() == (second / "checkpoints" / name).read_bytes(), name
