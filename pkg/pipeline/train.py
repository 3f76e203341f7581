"""Training loops: the supervised DSM baseline and the SPIN outer loop.

Both loops share the optimizer (adaptive moments with decoupled weight decay),
the divergence guard and the run log. Every iteration of the SPIN loop draws
from its own stream default_rng([seed, k]) and starts a fresh optimizer, so a
run resumed from the checkpoint of iteration k reproduces the uninterrupted
run exactly.
"""

import hashlib
import logging
from collections.abc import Callable
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from pipeline.load import append_metrics, save_checkpoint
from pipeline.target import Dataset
from spin.diffusion import (
    NoisedBatch,
    Trajectory,
    draw_steps,
    forward_trajectory,
    forwardized_synthetic_pairs,
    marginal_real_pairs,
    noised_batch,
    reverse_sample,
    trajectory_pairs_at,
)
from spin.errors import DivergenceError, InvariantError
from spin.losses import SpinLossConfig, dsm_objective, spin_gradient_decomposed, test_function
from spin.schedule import NoiseSchedule
from spin.score_net import ScoreModelParams, sharded_value_and_grad

logger = logging.getLogger(__name__)

LR_SHAPES = ("linear-decay", "constant")
REAL_PAIR_SOURCES = ("marginal", "trajectory")


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    warmup: int = 200
    shape: str = "linear-decay"
    total_steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2

    def __post_init__(self):
        if self.shape not in LR_SHAPES:
            raise ValueError(f"unknown learning-rate shape '{self.shape}', expected one of {LR_SHAPES}")
        if self.lr <= 0 or self.warmup < 0 or self.total_steps < 0:
            raise ValueError("lr must be positive, warmup and total_steps non-negative")

    def lr_at(self, step: int) -> float:
        """Learning rate for the update numbered `step` (0-based)."""
        scale = min(1.0, (step + 1) / self.warmup) if self.warmup else 1.0
        if self.shape == "linear-decay" and step >= self.warmup:
            span = max(1, self.total_steps - self.warmup)
            scale = max(0.0, 1.0 - (step - self.warmup) / span)
        return self.lr * scale


@dataclass
class OptimizerState:
    config: OptimizerConfig
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def fresh(cls, config: OptimizerConfig, num_params: int) -> "OptimizerState":
        return cls(config, np.zeros(num_params), np.zeros(num_params))

    def update(self, params: ScoreModelParams, grad: np.ndarray) -> ScoreModelParams:
        """One bias-corrected adaptive-moment step with decoupled weight decay."""
        cfg = self.config
        lr = cfg.lr_at(self.step)
        self.step += 1
        self.m = cfg.beta1 * self.m + (1.0 - cfg.beta1) * grad
        self.v = cfg.beta2 * self.v + (1.0 - cfg.beta2) * grad**2
        m_hat = self.m / (1.0 - cfg.beta1**self.step)
        v_hat = self.v / (1.0 - cfg.beta2**self.step)
        flat = params.flatten()
        flat = flat - lr * (m_hat / (np.sqrt(v_hat) + cfg.eps) + cfg.weight_decay * flat)
        if not np.all(np.isfinite(flat)):
            raise DivergenceError(f"parameters became non-finite at optimizer step {self.step}")
        return ScoreModelParams.unflatten(params.arch, flat)


@dataclass(frozen=True)
class TrainerOptions:
    batch_size: int = 64
    shards: int = 1
    workers: int = 1
    checkpoint_every: int = 500
    divergence_factor: float = 10.0
    divergence_patience: int = 100
    real_pairs: str = "marginal"
    synthetic_fraction: float = 1.0
    regenerate_every_epoch: bool = False
    shuffle_pairs: bool = False
    shared_t: bool = True
    test_function_diagnostics: bool = False

    def __post_init__(self):
        if self.batch_size < 1 or self.shards < 1 or self.workers < 1:
            raise ValueError("batch_size, shards and workers must be positive")
        if self.real_pairs not in REAL_PAIR_SOURCES:
            raise ValueError(f"unknown real pair source '{self.real_pairs}', expected one of {REAL_PAIR_SOURCES}")
        if not 0.0 < self.synthetic_fraction <= 1.0:
            raise ValueError(f"synthetic_fraction must lie in (0, 1], got {self.synthetic_fraction}")


@dataclass
class RunLog:
    """Where training writes metrics and checkpoints; both are optional."""

    metrics_path: Path | None = None
    checkpoint_dir: Path | None = None
    T: int = 0
    written: list[Path] = field(default_factory=list)

    def record(self, kind: str, **fields) -> None:
        if self.metrics_path is not None:
            append_metrics(self.metrics_path, kind, **fields)

    def checkpoint(self, name: str, params: ScoreModelParams, **meta) -> Path | None:
        if self.checkpoint_dir is None:
            return None
        path = self.checkpoint_dir / f"{name}.ckpt"
        save_checkpoint(params, path, self.T, meta)
        self.written.append(path)
        return path


class DivergenceGuard:
    """Abort on a non-finite loss, or a loss above factor x its first value for `patience` steps running."""

    def __init__(self, factor: float = 10.0, patience: int = 100):
        self.factor = factor
        self.patience = patience
        self.initial: float | None = None
        self.strikes = 0

    def check(self, step: int, loss: float, grad: np.ndarray) -> None:
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise DivergenceError(f"non-finite loss or gradient at step {step} (loss={loss})")
        if self.initial is None:
            self.initial = loss
        if loss > self.factor * abs(self.initial):
            self.strikes += 1
            if self.strikes >= self.patience:
                raise DivergenceError(
                    f"loss {loss:.4g} stayed above {self.factor}x its initial value "
                    f"{self.initial:.4g} for {self.patience} steps (step {step})"
                )
        else:
            self.strikes = 0


@dataclass
class TrainResult:
    params: ScoreModelParams
    losses: list[float]


def _shard_bounds(n: int, shards: int) -> list[tuple[int, int]]:
    edges = np.linspace(0, n, min(shards, n) + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


def train_sft(
    init: ScoreModelParams,
    dataset: Dataset,
    schedule: NoiseSchedule,
    opt: OptimizerConfig,
    steps: int,
    rng: np.random.Generator,
    options: TrainerOptions = TrainerOptions(),
    log: RunLog | None = None,
    on_checkpoint: Callable[[int, ScoreModelParams], None] | None = None,
) -> TrainResult:
    """Minimize minibatch DSM loss for `steps` updates."""
    if len(dataset) == 0:
        raise ValueError("SFT needs a non-empty dataset")
    log = log or RunLog()
    params = init.copy()
    state = OptimizerState.fresh(replace(opt, total_steps=steps), params.num_params)
    guard = DivergenceGuard(options.divergence_factor, options.divergence_patience)
    losses: list[float] = []

    for step in range(steps):
        idx = rng.integers(0, len(dataset), size=options.batch_size)
        batch = noised_batch(dataset.x0[idx], dataset.labels[idx], schedule, rng)
        closures = [_dsm_shard(batch, a, b, schedule) for a, b in _shard_bounds(len(batch), options.shards)]
        loss, grad = sharded_value_and_grad(params, closures, options.workers)
        guard.check(step, loss, grad)
        lr = state.config.lr_at(state.step)
        params = state.update(params, grad)
        losses.append(loss)
        log.record("sft_step", step=step + 1, loss=loss, lr=lr, grad_norm=float(np.linalg.norm(grad)))
        if options.checkpoint_every and (step + 1) % options.checkpoint_every == 0:
            log.checkpoint(f"sft-step{step + 1:06d}", params, kind="sft", step=step + 1)
            if on_checkpoint is not None:
                on_checkpoint(step + 1, params)

    already_reported = options.checkpoint_every and steps % options.checkpoint_every == 0
    if steps and on_checkpoint is not None and not already_reported:
        on_checkpoint(steps, params)
    return TrainResult(params, losses)


def _dsm_shard(batch: NoisedBatch, start: int, stop: int, schedule: NoiseSchedule):
    shard = NoisedBatch(batch.x0[start:stop], batch.labels[start:stop], batch.eps[start:stop], batch.t[start:stop])
    weight = (stop - start) / len(batch)
    return lambda p: dsm_objective(p, shard, schedule) * weight


# --- SPIN ---------------------------------------------------------------------------


@dataclass
class SyntheticCache:
    """Opponent samples for one iteration, aligned with dataset records."""

    records: np.ndarray
    labels: np.ndarray
    x0: np.ndarray
    trajectories: Trajectory | None
    cache_id: str


@dataclass
class SpinIterationState:
    k: int
    theta: ScoreModelParams
    theta_k: ScoreModelParams
    cache: SyntheticCache | None = None

    @classmethod
    def start(cls, params: ScoreModelParams, k: int = 0) -> "SpinIterationState":
        return cls(k, params.copy(), params.copy())


def generate_cache(
    theta_k: ScoreModelParams,
    dataset: Dataset,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    fraction: float = 1.0,
    keep_trajectories: bool = False,
) -> SyntheticCache:
    """One opponent sample per selected dataset record, on that record's condition."""
    n = len(dataset)
    count = max(1, int(round(fraction * n)))
    records = np.arange(n) if count == n else np.sort(rng.choice(n, size=count, replace=False))
    labels = dataset.labels[records]
    traj = reverse_sample(theta_k, labels, schedule, rng, n=count)
    cache_id = hashlib.sha256(traj.states.tobytes()).hexdigest()[:16]
    return SyntheticCache(records, labels, traj.x0.copy(), traj if keep_trajectories else None, cache_id)


def _aligned_synthetic_index(labels: np.ndarray, idx: np.ndarray, rng, shuffle: bool) -> np.ndarray:
    """Synthetic partner of each real item; shuffling permutes partners within a condition."""
    if not shuffle:
        return idx
    partner = idx.copy()
    for c in np.unique(labels[idx]):
        slots = np.flatnonzero(labels[idx] == c)
        partner[slots] = idx[rng.permutation(slots)]
    return partner


def _spin_batch(
    dataset: Dataset,
    cache: SyntheticCache,
    schedule: NoiseSchedule,
    cfg: SpinLossConfig,
    options: TrainerOptions,
    rng: np.random.Generator,
):
    """Aligned (real, synthetic) inputs for the configured loss variant."""
    idx = rng.integers(0, len(cache.records), size=options.batch_size)
    partner = _aligned_synthetic_index(cache.labels, idx, rng, options.shuffle_pairs)
    x0 = dataset.x0[cache.records[idx]]
    labels = cache.labels[idx]
    t = draw_steps(len(idx), schedule.T, rng)
    t_syn = t if options.shared_t else draw_steps(len(idx), schedule.T, rng)

    if cfg.variant == "exact":
        return forward_trajectory(x0, labels, schedule, rng), cache.trajectories.take(partner)

    if cfg.synthetic_pairs == "backward":
        synth = trajectory_pairs_at(cache.trajectories.take(partner), t_syn)
    elif cfg.variant == "approx-eps":
        synth = noised_batch(cache.x0[partner], labels, schedule, rng, t_syn)
    else:
        synth = forwardized_synthetic_pairs(cache.x0[partner], labels, t_syn, schedule, rng)

    if cfg.variant == "approx-eps":
        return noised_batch(x0, labels, schedule, rng, t), synth
    if options.real_pairs == "trajectory":
        return trajectory_pairs_at(forward_trajectory(x0, labels, schedule, rng), t), synth
    return marginal_real_pairs(x0, labels, t, schedule, rng), synth


def spin_iteration(
    state: SpinIterationState,
    dataset: Dataset,
    schedule: NoiseSchedule,
    cfg: SpinLossConfig,
    opt: OptimizerConfig,
    steps: int,
    rng: np.random.Generator,
    options: TrainerOptions = TrainerOptions(),
    log: RunLog | None = None,
) -> SpinIterationState:
    """Generate the opponent cache, train theta against it, then promote theta to opponent."""
    log = log or RunLog()
    if options.test_function_diagnostics and np.any(schedule.sigma[2:] == 0):
        raise ValueError("test-function diagnostics need a stochastic schedule (eta > 0)")
    keep = cfg.variant == "exact" or cfg.synthetic_pairs == "backward" or options.test_function_diagnostics
    theta_k = state.theta_k
    theta = state.theta_k.copy()
    frozen = theta_k.checksum()
    cache = generate_cache(theta_k, dataset, schedule, rng, options.synthetic_fraction, keep)
    logger.info("iteration %d: %d opponent samples, cache %s", state.k + 1, len(cache.records), cache.cache_id)

    iteration_opt = OptimizerState.fresh(replace(opt, total_steps=steps), theta.num_params)
    guard = DivergenceGuard(options.divergence_factor, options.divergence_patience)
    steps_per_epoch = max(1, len(cache.records) // options.batch_size)

    if steps == 0:
        log.record("spin_step", iteration=state.k + 1, step=0, loss=cfg.ell.at_zero(), lr=0.0, cache_id=cache.cache_id)

    for step in range(steps):
        if options.regenerate_every_epoch and step and step % steps_per_epoch == 0:
            cache = generate_cache(theta_k, dataset, schedule, rng, options.synthetic_fraction, keep)
        real, synth = _spin_batch(dataset, cache, schedule, cfg, options, rng)
        grad, diag = spin_gradient_decomposed(theta, theta_k, real, synth, cfg, schedule, options.workers)
        loss = float(np.mean(cfg.ell(np.clip(diag.arguments, -cfg.clamp, cfg.clamp))))
        guard.check(step, loss, grad)
        lr = iteration_opt.config.lr_at(iteration_opt.step)
        theta = iteration_opt.update(theta, grad)
        if theta_k.checksum() != frozen:
            raise InvariantError(f"opponent parameters changed during iteration {state.k + 1}")
        log.record(
            "spin_step",
            iteration=state.k + 1,
            step=step + 1,
            loss=loss,
            lr=lr,
            grad_norm=float(np.linalg.norm(grad)),
            clamp_count=diag.clamp_count,
            weight_mean=float(diag.weights.mean()),
            weight_min=float(diag.weights.min()),
            weight_max=float(diag.weights.max()),
            matching_norm=diag.matching_norm,
            pushing_norm=diag.pushing_norm,
            cache_id=cache.cache_id,
        )
        if options.checkpoint_every and (step + 1) % options.checkpoint_every == 0:
            log.checkpoint(f"spin-iter{state.k + 1}-step{step + 1:06d}", theta, kind="spin", step=step + 1)

    if options.test_function_diagnostics:
        _log_beliefs(theta, theta_k, dataset, cache, cfg, schedule, rng, log, state.k + 1)

    return SpinIterationState(state.k + 1, theta.copy(), theta.copy(), cache)


def _log_beliefs(theta, theta_k, dataset, cache, cfg, schedule, rng, log: RunLog, iteration: int) -> None:
    """Mean test-function value on fresh real trajectories vs the opponent's own."""
    count = min(256, len(cache.records))
    pick = cache.records[:count]
    real = forward_trajectory(dataset.x0[pick], dataset.labels[pick], schedule, rng)
    real_belief = float(test_function(theta, theta_k, real, cfg.lam, schedule).mean())
    synthetic = cache.trajectories.take(np.arange(count))
    synth_belief = float(test_function(theta, theta_k, synthetic, cfg.lam, schedule).mean())
    log.record("iteration", iteration=iteration, real_belief=real_belief, synthetic_belief=synth_belief)


@dataclass(frozen=True)
class IterationPlan:
    steps: int
    lr: float
    beta_scale: float


def run_spin(
    init: ScoreModelParams,
    dataset: Dataset,
    schedule: NoiseSchedule,
    make_loss: Callable[[float], SpinLossConfig],
    plans: list[IterationPlan],
    opt: OptimizerConfig,
    seed: int,
    options: TrainerOptions = TrainerOptions(),
    log: RunLog | None = None,
    start: int = 0,
    on_iteration: Callable[[int, ScoreModelParams], None] | None = None,
) -> list[ScoreModelParams]:
    """Chain spin_iteration over the plans, checkpointing the opponent of every iteration.

    `init` is the opponent at iteration `start`; start > 0 resumes a run.
    Returns the opponent of iterations start..K.
    """
    if not plans:
        raise ValueError("run_spin needs at least one iteration")
    if not 0 <= start <= len(plans):
        raise ValueError(f"resume point {start} outside 0..{len(plans)}")
    log = log or RunLog()
    state = SpinIterationState.start(init, start)
    if start == 0:
        log.checkpoint("spin-iter0", init, kind="spin", iteration=0)
    history = [init.copy()]
    for k in range(start, len(plans)):
        plan = plans[k]
        cfg = make_loss(plan.beta_scale)
        log.record("iteration", iteration=k + 1, steps=plan.steps, lr=plan.lr, beta_scale=plan.beta_scale)
        state = spin_iteration(
            state,
            dataset,
            schedule,
            cfg,
            replace(opt, lr=plan.lr),
            plan.steps,
            np.random.default_rng([seed, k]),
            options,
            log,
        )
        log.checkpoint(f"spin-iter{k + 1}", state.theta_k, kind="spin", iteration=k + 1)
        history.append(state.theta_k.copy())
        if on_iteration is not None:
            on_iteration(k + 1, state.theta_k)
    return history

