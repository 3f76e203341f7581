"""Tests for pipeline/train.py: optimizer, guards, the SFT loop and the SPIN outer loop."""

from dataclasses import replace

import numpy as np
import pytest

import pipeline.train
from evaluation.metrics import dsm_excess
from pipeline.load import read_metrics
from pipeline.target import MixtureComponent, TargetSpec, default_target, generate_dataset, sample_target_batch
from pipeline.train import (
    DivergenceGuard,
    IterationPlan,
    OptimizerConfig,
    OptimizerState,
    RunLog,
    SpinIterationState,
    TrainerOptions,
    generate_cache,
    run_spin,
    spin_iteration,
    train_sft,
)
from spin.errors import DivergenceError, InvariantError
from spin.losses import EllFunction, SpinLossConfig
from spin.schedule import beta_schedule, make_schedule
from spin.score_net import Architecture, init_params

ARCH = Architecture(hidden=(8, 8), time_dim=4)
OPTIONS = TrainerOptions(batch_size=16, checkpoint_every=0)


def _make_dataset(n=128, seed=0):
    return generate_dataset(default_target(), n, np.random.default_rng(seed), seed)


def _make_params(seed=0, zero_output=False):
    return init_params(ARCH, np.random.default_rng(seed), zero_output=zero_output)


def _make_loss(schedule, variant="approx-eps", pairs="forwardized", scale=1.0):
    return SpinLossConfig(
        EllFunction(),
        beta_schedule(schedule, "gamma-matched", scale),
        synthetic_pairs=pairs,
        variant=variant,
    )


def _make_log(tmp_path, T=4):
    (tmp_path / "checkpoints").mkdir(exist_ok=True)
    return RunLog(tmp_path / "metrics.jsonl", tmp_path / "checkpoints", T)


class TestOptimizer:
    def test_linear_decay_with_warmup(self):
        cfg = OptimizerConfig(lr=1.0, warmup=10, shape="linear-decay", total_steps=110)
        assert cfg.lr_at(0) == pytest.approx(0.1)
        assert cfg.lr_at(9) == pytest.approx(1.0)
        assert cfg.lr_at(10) == pytest.approx(1.0)
        assert cfg.lr_at(60) == pytest.approx(0.5)
        assert cfg.lr_at(110) == 0.0

    def test_constant_shape(self):
        cfg = OptimizerConfig(lr=0.5, warmup=0, shape="constant")
        assert cfg.lr_at(0) == 0.5
        assert cfg.lr_at(10_000) == 0.5

    def test_invalid_config(self):
        with pytest.raises(ValueError, match="learning-rate shape"):
            OptimizerConfig(shape="cosine")
        with pytest.raises(ValueError, match="lr must be positive"):
            OptimizerConfig(lr=0.0)

    def test_first_step_moves_by_lr(self):
        cfg = OptimizerConfig(lr=0.1, warmup=0, shape="constant", weight_decay=0.0)
        params = _make_params(zero_output=True)
        grad = np.random.default_rng(0).normal(size=ARCH.num_params)
        state = OptimizerState.fresh(cfg, ARCH.num_params)
        moved = state.update(params, grad)
        np.testing.assert_allclose(moved.flatten() - params.flatten(), -0.1 * np.sign(grad), atol=1e-6)
        assert state.step == 1

    def test_non_finite_update_is_divergence(self):
        cfg = OptimizerConfig(lr=0.1, warmup=0, shape="constant")
        state = OptimizerState.fresh(cfg, ARCH.num_params)
        with pytest.raises(DivergenceError):
            state.update(_make_params(), np.full(ARCH.num_params, np.inf))


class TestDivergenceGuard:
    def test_non_finite_loss(self):
        with pytest.raises(DivergenceError, match="non-finite"):
            DivergenceGuard().check(0, float("nan"), np.zeros(3))

    def test_sustained_blow_up(self):
        guard = DivergenceGuard(factor=10.0, patience=3)
        guard.check(0, 1.0, np.zeros(3))
        guard.check(1, 20.0, np.zeros(3))
        guard.check(2, 20.0, np.zeros(3))
        with pytest.raises(DivergenceError, match="stayed above"):
            guard.check(3, 20.0, np.zeros(3))

    def test_recovery_resets_strikes(self):
        guard = DivergenceGuard(factor=10.0, patience=2)
        guard.check(0, 1.0, np.zeros(3))
        for step in range(1, 20):
            guard.check(step, 20.0 if step % 2 else 1.0, np.zeros(3))


class TestSft:
    def _train(self, steps, seed=0, options=OPTIONS, log=None, **kwargs):
        s = make_schedule(4, "cosine", 0.5)
        opt = OptimizerConfig(lr=1e-2, warmup=2, shape="constant")
        return train_sft(
            _make_params(zero_output=True),
            _make_dataset(),
            s,
            opt,
            steps,
            np.random.default_rng(seed),
            options,
            log,
            **kwargs,
        )

    def test_zero_steps_returns_init(self):
        result = self._train(0)
        assert result.params == _make_params(zero_output=True)
        assert result.losses == []

    def test_deterministic(self):
        first = self._train(5, seed=3)
        second = self._train(5, seed=3)
        assert first.params.checksum() == second.params.checksum()
        assert first.losses == second.losses

    def test_workers_do_not_change_result(self):
        serial = self._train(4, options=replace(OPTIONS, shards=4, workers=1))
        threaded = self._train(4, options=replace(OPTIONS, shards=4, workers=3))
        assert serial.params.checksum() == threaded.params.checksum()

    def test_sharding_matches_single_shard(self):
        single = self._train(4, options=replace(OPTIONS, shards=1))
        sharded = self._train(4, options=replace(OPTIONS, shards=4))
        np.testing.assert_allclose(sharded.params.flatten(), single.params.flatten(), rtol=1e-9, atol=1e-12)

    def test_checkpoint_cadence(self, tmp_path):
        seen = []
        log = _make_log(tmp_path)
        self._train(5, options=replace(OPTIONS, checkpoint_every=2), log=log, on_checkpoint=lambda s, p: seen.append(s))
        assert seen == [2, 4, 5]
        names = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
        assert names == ["sft-step000002.ckpt", "sft-step000004.ckpt"]
        steps = read_metrics(tmp_path / "metrics.jsonl", kind="sft_step")
        assert list(steps["step"]) == [1, 2, 3, 4, 5]

    def test_final_checkpoint_not_reported_twice(self):
        seen = []
        self._train(4, options=replace(OPTIONS, checkpoint_every=2), on_checkpoint=lambda s, p: seen.append(s))
        assert seen == [2, 4]

    def test_loss_decreases(self):
        losses = self._train(200).losses
        assert np.mean(losses[-20:]) < np.mean(losses[:20])

    def test_huge_learning_rate_diverges(self):
        s = make_schedule(4, "cosine", 0.5)
        opt = OptimizerConfig(lr=1e300, warmup=0, shape="constant")
        with pytest.raises(DivergenceError):
            train_sft(_make_params(), _make_dataset(), s, opt, 20, np.random.default_rng(0), OPTIONS)


class TestCache:
    def test_same_seed_same_cache(self):
        s = make_schedule(4, "cosine", 0.5)
        dataset, theta_k = _make_dataset(), _make_params()
        first = generate_cache(theta_k, dataset, s, np.random.default_rng(1))
        second = generate_cache(theta_k, dataset, s, np.random.default_rng(1))
        assert first.cache_id == second.cache_id
        assert first.x0.tobytes() == second.x0.tobytes()
        np.testing.assert_array_equal(first.labels, dataset.labels)

    def test_fraction_selects_records(self):
        s = make_schedule(4, "cosine", 0.5)
        dataset = _make_dataset()
        cache = generate_cache(_make_params(), dataset, s, np.random.default_rng(0), fraction=0.5)
        assert len(cache.records) == 64
        assert np.all(np.diff(cache.records) > 0)
        np.testing.assert_array_equal(cache.labels, dataset.labels[cache.records])
        assert cache.trajectories is None


class TestSpinIteration:
    def _iterate(self, steps, variant="approx-eps", pairs="forwardized", options=OPTIONS, eta=0.5, log=None):
        s = make_schedule(4, "cosine", eta)
        opt = OptimizerConfig(lr=1e-3, warmup=0, shape="linear-decay")
        state = SpinIterationState.start(_make_params())
        return spin_iteration(
            state, _make_dataset(), s, _make_loss(s, variant, pairs), opt, steps, np.random.default_rng(0), options, log
        )

    def test_zero_steps_keeps_opponent(self, tmp_path):
        log = _make_log(tmp_path)
        state = self._iterate(0, log=log)
        assert state.k == 1
        assert state.theta_k == _make_params()
        steps = read_metrics(tmp_path / "metrics.jsonl", kind="spin_step")
        assert steps["loss"].iloc[0] == pytest.approx(np.log(2.0))

    def test_opponent_must_stay_frozen(self, monkeypatch):
        decomposed = pipeline.train.spin_gradient_decomposed

        def tampering(theta, theta_k, *args, **kwargs):
            theta_k.weights[0][0, 0] += 1.0
            return decomposed(theta, theta_k, *args, **kwargs)

        monkeypatch.setattr(pipeline.train, "spin_gradient_decomposed", tampering)
        with pytest.raises(InvariantError, match="opponent parameters changed during iteration 1"):
            self._iterate(2)

    def test_opponent_promoted_and_input_untouched(self):
        init = _make_params()
        before = init.checksum()
        s = make_schedule(4, "cosine", 0.5)
        opt = OptimizerConfig(lr=1e-3, warmup=0)
        state = spin_iteration(
            SpinIterationState.start(init), _make_dataset(), s, _make_loss(s), opt, 3, np.random.default_rng(0), OPTIONS
        )
        assert init.checksum() == before
        assert state.theta == state.theta_k
        assert state.theta_k != init

    @pytest.mark.parametrize(
        "variant,pairs",
        [
            ("exact", "backward"),
            ("approx-mu", "forwardized"),
            ("approx-mu", "backward"),
            ("approx-eps", "forwardized"),
            ("approx-eps", "backward"),
        ],
    )
    def test_every_variant_trains(self, variant, pairs):
        state = self._iterate(3, variant, pairs)
        assert np.all(np.isfinite(state.theta_k.flatten()))
        assert state.theta_k != _make_params()

    @pytest.mark.parametrize(
        "overrides",
        [
            {"real_pairs": "trajectory"},
            {"shuffle_pairs": True},
            {"shared_t": False},
            {"synthetic_fraction": 0.25},
            {"shards": 2, "workers": 2},
        ],
    )
    def test_batch_options(self, overrides):
        variant = "approx-mu" if "real_pairs" in overrides else "approx-eps"
        state = self._iterate(3, variant, "forwardized", replace(OPTIONS, **overrides))
        assert state.theta_k != _make_params()

    def test_same_seed_same_result(self):
        assert self._iterate(4).theta_k.checksum() == self._iterate(4).theta_k.checksum()

    def test_diagnostics_need_noise(self):
        with pytest.raises(ValueError, match="eta > 0"):
            self._iterate(1, options=replace(OPTIONS, test_function_diagnostics=True), eta=0.0)

    def test_diagnostics_are_logged(self, tmp_path):
        log = _make_log(tmp_path)
        self._iterate(2, options=replace(OPTIONS, test_function_diagnostics=True), log=log)
        beliefs = read_metrics(tmp_path / "metrics.jsonl", kind="iteration")
        assert np.isfinite(beliefs["real_belief"].iloc[0])
        assert np.isfinite(beliefs["synthetic_belief"].iloc[0])

    def test_regenerating_the_cache(self, tmp_path):
        log = _make_log(tmp_path)
        # 128 records at batch size 16 is an 8-step epoch.
        self._iterate(10, options=replace(OPTIONS, regenerate_every_epoch=True), log=log)
        steps = read_metrics(tmp_path / "metrics.jsonl", kind="spin_step")
        assert steps["cache_id"].nunique() == 2


class TestRunSpin:
    def _run(self, plans, log=None, init=None, start=0, seed=0):
        s = make_schedule(4, "cosine", 0.5)
        return run_spin(
            init if init is not None else _make_params(),
            _make_dataset(),
            s,
            lambda scale: _make_loss(s, scale=scale),
            plans,
            OptimizerConfig(lr=1e-3, warmup=0),
            seed,
            OPTIONS,
            log,
            start,
        )

    def test_single_iteration_writes_both_checkpoints(self, tmp_path):
        log = _make_log(tmp_path)
        history = self._run([IterationPlan(3, 1e-3, 2.5)], log=log)
        assert len(history) == 2
        assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == ["spin-iter0.ckpt", "spin-iter1.ckpt"]
        iterations = read_metrics(tmp_path / "metrics.jsonl", kind="iteration")
        assert iterations["beta_scale"].iloc[0] == 2.5

    def test_deterministic(self):
        plans = [IterationPlan(3, 1e-3, 1.0), IterationPlan(2, 1e-4, 2.5)]
        assert self._run(plans)[-1].checksum() == self._run(plans)[-1].checksum()

    def test_resume_matches_uninterrupted_run(self):
        plans = [IterationPlan(3, 1e-3, 1.0), IterationPlan(3, 1e-3, 2.5)]
        full = self._run(plans)
        resumed = self._run(plans, init=full[1], start=1)
        assert len(resumed) == 2
        assert resumed[-1].checksum() == full[-1].checksum()

    def test_iterations_change_parameters(self):
        history = self._run([IterationPlan(3, 1e-3, 1.0), IterationPlan(3, 1e-3, 1.0)])
        assert history[0] != history[1] != history[2]

    def test_bad_plans(self):
        with pytest.raises(ValueError, match="at least one"):
            self._run([])
        with pytest.raises(ValueError, match="resume point"):
            self._run([IterationPlan(1, 1e-3, 1.0)], start=2)


@pytest.mark.integration
class TestSftFloor:
    def test_single_gaussian_reaches_the_floor(self):
        spec = TargetSpec(1, ((MixtureComponent(1.0, [0.5], [0.3]),),))
        arch = Architecture(data_dim=1, num_conditions=1, hidden=(32, 32), time_dim=8)
        s = make_schedule(10, "cosine", 0.0)
        dataset = generate_dataset(spec, 4096, np.random.default_rng(0), 0)
        opt = OptimizerConfig(lr=3e-3, warmup=100, shape="linear-decay")
        result = train_sft(
            init_params(arch, np.random.default_rng(1)),
            dataset,
            s,
            opt,
            2000,
            np.random.default_rng(2),
            TrainerOptions(batch_size=128, checkpoint_every=0),
        )
        rng = np.random.default_rng(3)
        labels = np.zeros(4000, dtype=int)
        excess = dsm_excess(result.params, spec, s, sample_target_batch(spec, labels, rng), labels, rng)
        assert excess < 0.1 * spec.data_dim
