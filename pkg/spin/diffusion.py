"""Forward (data-side) and reverse (model-side) diffusion processes.

Everything is batched along a leading sample axis: a `Trajectory` holds
states of shape (T+1, n, d) and a `StepPairs` holds n aligned
(x_{t-1}, x_t, c, t) tuples. A single path or pair is the n = 1 case.

Per-sample schedule coefficients are indexed by the step array and broadcast
over the data axis, so one call can mix steps.
"""

import logging
from dataclasses import dataclass

import numpy as np

from spin.errors import DivergenceError
from spin.schedule import NoiseSchedule
from spin.score_net import Condition, ScoreFunction, ScoreModelParams, as_score_fn

logger = logging.getLogger(__name__)

REAL = "real"
SYNTHETIC = "synthetic"
SYNTHETIC_BACKWARD = "synthetic-backward"
SYNTHETIC_FORWARDIZED = "synthetic-forwardized"

TRAJECTORY_PROVENANCE = (REAL, SYNTHETIC)
PAIR_PROVENANCE = (REAL, SYNTHETIC_BACKWARD, SYNTHETIC_FORWARDIZED)


def _frozen(values: np.ndarray) -> np.ndarray:
    values = np.array(values)
    values.setflags(write=False)
    return values


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray
    labels: np.ndarray
    provenance: str
    seed: int | None = None

    def __post_init__(self):
        if self.states.ndim != 3:
            raise ValueError(f"states must have shape (T+1, n, d), got {self.states.shape}")
        if self.states.shape[0] < 3:
            raise ValueError("a trajectory needs at least T = 2 steps")
        if self.labels.shape != (self.states.shape[1],):
            raise ValueError(f"labels shape {self.labels.shape} does not match batch size {self.states.shape[1]}")
        if self.provenance not in TRAJECTORY_PROVENANCE:
            raise ValueError(f"unknown trajectory provenance '{self.provenance}'")
        object.__setattr__(self, "states", _frozen(self.states.astype(np.float64)))
        object.__setattr__(self, "labels", _frozen(self.labels.astype(np.int64)))

    @property
    def T(self) -> int:
        return self.states.shape[0] - 1

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def x0(self) -> np.ndarray:
        return self.states[0]

    def take(self, index) -> "Trajectory":
        index = np.atleast_1d(index)
        return Trajectory(self.states[:, index], self.labels[index], self.provenance, self.seed)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.provenance == other.provenance
            and np.array_equal(self.states, other.states)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(frozen=True, eq=False)
class StepPairs:
    x_prev: np.ndarray
    x_curr: np.ndarray
    labels: np.ndarray
    t: np.ndarray
    provenance: str

    def __post_init__(self):
        if self.x_prev.shape != self.x_curr.shape or self.x_prev.ndim != 2:
            raise ValueError(f"x_prev {self.x_prev.shape} and x_curr {self.x_curr.shape} must share shape (n, d)")
        n = self.x_prev.shape[0]
        if self.labels.shape != (n,) or self.t.shape != (n,):
            raise ValueError("labels and t must have one entry per pair")
        if self.t.size and self.t.min() < 1:
            raise ValueError(f"pair steps must be >= 1, got {self.t.min()}")
        if self.provenance not in PAIR_PROVENANCE:
            raise ValueError(f"unknown pair provenance '{self.provenance}'")

    def __len__(self) -> int:
        return self.x_prev.shape[0]

    def take(self, index) -> "StepPairs":
        index = np.atleast_1d(index)
        return StepPairs(self.x_prev[index], self.x_curr[index], self.labels[index], self.t[index], self.provenance)

    @classmethod
    def concat(cls, pairs: list["StepPairs"]) -> "StepPairs":
        if not pairs:
            raise ValueError("cannot concatenate an empty list of pairs")
        provenance = {p.provenance for p in pairs}
        if len(provenance) != 1:
            raise ValueError(f"cannot mix pair provenances {sorted(provenance)}")
        return cls(
            np.concatenate([p.x_prev for p in pairs]),
            np.concatenate([p.x_curr for p in pairs]),
            np.concatenate([p.labels for p in pairs]),
            np.concatenate([p.t for p in pairs]),
            provenance.pop(),
        )


@dataclass(frozen=True, eq=False)
class NoisedBatch:
    """Clean samples with the noise and step that produce x_t = sqrt(a_t) x0 + sqrt(1 - a_t) eps."""

    x0: np.ndarray
    labels: np.ndarray
    eps: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        if self.x0.shape != self.eps.shape or self.x0.ndim != 2:
            raise ValueError(f"x0 {self.x0.shape} and eps {self.eps.shape} must share shape (n, d)")
        n = self.x0.shape[0]
        if self.labels.shape != (n,) or self.t.shape != (n,):
            raise ValueError("labels and t must have one entry per sample")

    def __len__(self) -> int:
        return self.x0.shape[0]

    def x_t(self, schedule: NoiseSchedule) -> np.ndarray:
        return forward_marginal_sample(self.x0, self.t, self.eps, schedule)


def _per_sample(values) -> np.ndarray:
    """Coefficients taken at a step array, shaped to broadcast against (n, d) data."""
    values = np.asarray(values)
    return values[:, None] if values.ndim == 1 else values


def _check_batch(x: np.ndarray, t) -> None:
    if np.ndim(t) == 1 and (x.ndim != 2 or x.shape[0] != np.size(t)):
        raise ValueError(f"step array of length {np.size(t)} does not match data of shape {x.shape}")


def _labels_for(condition, n: int) -> np.ndarray:
    if isinstance(condition, Condition):
        condition = condition.label
    return np.broadcast_to(np.asarray(condition, dtype=np.int64), (n,)).copy()


def draw_steps(n: int, T: int, rng: np.random.Generator) -> np.ndarray:
    """t ~ Uniform{1..T}, one per sample."""
    return rng.integers(1, T + 1, size=n)


def forward_marginal_sample(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(alpha_t) x0 + sqrt(1 - alpha_t) eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"dimension mismatch: x0 {x0.shape} vs eps {eps.shape}")
    t = schedule.check_step(t)
    _check_batch(x0, t)
    a = _per_sample(schedule.alpha[t])
    return np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps


def posterior_mean(x0: np.ndarray, x_t: np.ndarray, t, schedule: NoiseSchedule) -> np.ndarray:
    """Mean of q(x_{t-1} | x_t, x0) for the DDIM family at the schedule's sigma."""
    x0 = np.asarray(x0, dtype=np.float64)
    t = schedule.check_step(t)
    _check_batch(x0, t)
    a_prev = _per_sample(schedule.alpha[t - 1])
    a_t = _per_sample(schedule.alpha[t])
    coef = _per_sample(schedule.posterior_noise_coef(t))
    return np.sqrt(a_prev) * x0 + coef * (x_t - np.sqrt(a_t) * x0) / np.sqrt(1.0 - a_t)


def posterior_sample(
    x0: np.ndarray, x_t: np.ndarray, t, schedule: NoiseSchedule, rng: np.random.Generator
) -> np.ndarray:
    """x_{t-1} ~ q(x_{t-1} | x_t, x0); the noise draw happens even where sigma_t = 0."""
    sigma = _per_sample(schedule.sigma[schedule.check_step(t)])
    noise = rng.standard_normal(np.shape(x_t))
    return posterior_mean(x0, x_t, t, schedule) + sigma * noise


def forward_trajectory(
    x0: np.ndarray, condition, schedule: NoiseSchedule, rng: np.random.Generator, seed: int | None = None
) -> Trajectory:
    """x_T ~ q(x_T | x0), then x_{t-1} ~ q(x_{t-1} | x_t, x0) for t = T..2."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if not np.all(np.isfinite(x0)):
        raise ValueError("x0 contains non-finite values")
    n, T = x0.shape[0], schedule.T
    labels = _labels_for(condition, n)
    states = np.empty((T + 1, *x0.shape))
    states[0] = x0
    steps = np.full(n, T)
    states[T] = forward_marginal_sample(x0, steps, rng.standard_normal(x0.shape), schedule)
    for t in range(T, 1, -1):
        states[t - 1] = posterior_sample(x0, states[t], np.full(n, t), schedule, rng)
    return Trajectory(states, labels, REAL, seed)


def mean_from_eps(x_t, eps, t, schedule: NoiseSchedule):
    """mu = sqrt(a_{t-1}) (x_t - sqrt(1 - a_t) eps) / sqrt(a_t) + sqrt(1 - a_{t-1} - sigma_t^2) eps.

    `eps` may be an array or a Tensor, so losses can differentiate through it.
    """
    t = np.atleast_1d(t)
    a_prev = _per_sample(schedule.alpha[t - 1])
    a_t = _per_sample(schedule.alpha[t])
    coef = _per_sample(schedule.posterior_noise_coef(t))
    return (x_t - eps * np.sqrt(1.0 - a_t)) * (np.sqrt(a_prev) / np.sqrt(a_t)) + eps * coef


def mu_theta(
    x_t: np.ndarray, condition, t, model: ScoreModelParams | ScoreFunction, schedule: NoiseSchedule
) -> np.ndarray:
    """Reverse-step mean under a score model; accepts a single vector or an (n, d) batch."""
    single = np.ndim(x_t) == 1
    x = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    n = x.shape[0]
    steps = np.broadcast_to(schedule.check_step(t), (n,))
    labels = _labels_for(condition, n)
    eps = as_score_fn(model, schedule.T)(x, labels, steps)
    out = mean_from_eps(x, eps, steps, schedule)
    return out[0] if single else out


def reverse_sample(
    model: ScoreModelParams | ScoreFunction,
    condition,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    n: int = 1,
    x_T: np.ndarray | None = None,
    data_dim: int | None = None,
    seed: int | None = None,
) -> Trajectory:
    """x_T ~ N(0, I), then x_{t-1} ~ N(mu_theta(x_t, c, t), sigma_t^2 I) for t = T..1.

    Pass x_T to fix the starting noise; with eta = 0 the path is then a pure
    function of the model, the condition and x_T.
    """
    if x_T is None:
        if data_dim is None:
            if not isinstance(model, ScoreModelParams):
                raise ValueError("data_dim is required when sampling from a bare score function")
            data_dim = model.arch.data_dim
        x_T = rng.standard_normal((n, data_dim))
    x = np.atleast_2d(np.asarray(x_T, dtype=np.float64))
    n, T = x.shape[0], schedule.T
    labels = _labels_for(condition, n)
    score = as_score_fn(model, T)

    states = np.empty((T + 1, *x.shape))
    states[T] = x
    for t in range(T, 0, -1):
        steps = np.full(n, t)
        mean = mean_from_eps(x, score(x, labels, steps), steps, schedule)
        x = mean + schedule.sigma[t] * rng.standard_normal(x.shape)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"reverse sampler produced non-finite states at t={t - 1}")
        states[t - 1] = x
    return Trajectory(states, labels, SYNTHETIC, seed)


def pairs_from_trajectory(traj: Trajectory) -> list[StepPairs]:
    """The T step pairs of a trajectory batch, ordered t = 1..T."""
    provenance = REAL if traj.provenance == REAL else SYNTHETIC_BACKWARD
    return [
        StepPairs(
            traj.states[t - 1].copy(),
            traj.states[t].copy(),
            traj.labels.copy(),
            np.full(traj.n, t),
            provenance,
        )
        for t in range(1, traj.T + 1)
    ]


def trajectory_pairs_at(traj: Trajectory, t: np.ndarray) -> StepPairs:
    """One pair per trajectory, taken at the given per-trajectory step."""
    t = np.asarray(t)
    idx = np.arange(traj.n)
    provenance = REAL if traj.provenance == REAL else SYNTHETIC_BACKWARD
    return StepPairs(traj.states[t - 1, idx], traj.states[t, idx], traj.labels.copy(), t.copy(), provenance)


def _marginal_pairs(x0, condition, t, schedule, rng, provenance) -> StepPairs:
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    n = x0.shape[0]
    steps = np.broadcast_to(schedule.check_step(t), (n,)).copy()
    x_t = forward_marginal_sample(x0, steps, rng.standard_normal(x0.shape), schedule)
    x_prev = posterior_sample(x0, x_t, steps, schedule, rng)
    return StepPairs(x_prev, x_t, _labels_for(condition, n), steps, provenance)


def forwardized_synthetic_pairs(
    x0_synthetic: np.ndarray, condition, t, schedule: NoiseSchedule, rng: np.random.Generator
) -> StepPairs:
    """Pairs from the forward process started at model samples x0'."""
    return _marginal_pairs(x0_synthetic, condition, t, schedule, rng, SYNTHETIC_FORWARDIZED)


def marginal_real_pairs(
    x0: np.ndarray, condition, t, schedule: NoiseSchedule, rng: np.random.Generator
) -> StepPairs:
    """Real pairs via x_t ~ q(x_t | x0) and x_{t-1} ~ q(x_{t-1} | x_t, x0), no full trajectory."""
    return _marginal_pairs(x0, condition, t, schedule, rng, REAL)


def noised_batch(
    x0: np.ndarray, condition, schedule: NoiseSchedule, rng: np.random.Generator, t=None
) -> NoisedBatch:
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    n = x0.shape[0]
    steps = draw_steps(n, schedule.T, rng) if t is None else np.broadcast_to(schedule.check_step(t), (n,)).copy()
    return NoisedBatch(x0, _labels_for(condition, n), rng.standard_normal(x0.shape), steps)
