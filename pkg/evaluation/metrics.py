"""Model quality against the known target.

- energy distance between generated and fresh target samples (+ bootstrap SE)
- target log-likelihood of generated samples (mean, median, SE)
- DSM excess: E gamma_t ||eps_theta - E[eps | x_t, c]||^2 on held-out target data
- win rate: paired per-prompt comparison under the target log-density

Every condition draws from its own stream default_rng([seed, c]), so results
do not depend on the worker count.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from pipeline.quality import EvalReportSchema, validate
from pipeline.target import TargetSpec, oracle_score, sample_target_batch, target_logpdf_batch
from spin.diffusion import draw_steps, forward_marginal_sample, reverse_sample
from spin.schedule import NoiseSchedule
from spin.score_net import ScoreFunction, ScoreModelParams, as_score_fn

logger = logging.getLogger(__name__)

MIN_SAMPLES = 100
BOOTSTRAP_RESAMPLES = 100


def _pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)


def _energy_from_distances(dxy: np.ndarray, dxx: np.ndarray, dyy: np.ndarray, unbiased: bool) -> float:
    n, m = dxx.shape[0], dyy.shape[0]
    if unbiased:
        within_x = dxx.sum() / (n * (n - 1))
        within_y = dyy.sum() / (m * (m - 1))
    else:
        within_x, within_y = dxx.mean(), dyy.mean()
    return float(2.0 * dxy.mean() - within_x - within_y)


def energy_distance(x: np.ndarray, y: np.ndarray, unbiased: bool = True) -> float:
    """Two-sample energy distance 2 E|X-Y| - E|X-X'| - E|Y-Y'|.

    unbiased=True drops the i = j terms (U-statistic, can dip below zero);
    unbiased=False keeps them (V-statistic, always >= 0).
    """
    x, y = np.atleast_2d(x), np.atleast_2d(y)
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    if unbiased and (len(x) < 2 or len(y) < 2):
        raise ValueError("unbiased energy distance needs at least two samples per side")
    return _energy_from_distances(_pairwise(x, y), _pairwise(x, x), _pairwise(y, y), unbiased)


def energy_distance_se(
    x: np.ndarray, y: np.ndarray, rng: np.random.Generator, resamples: int = BOOTSTRAP_RESAMPLES
) -> float:
    """Bootstrap standard error of the V-statistic energy distance."""
    dxy, dxx, dyy = _pairwise(x, y), _pairwise(x, x), _pairwise(y, y)
    ix = rng.integers(0, len(x), size=(resamples, len(x)))
    iy = rng.integers(0, len(y), size=(resamples, len(y)))
    stats = [
        _energy_from_distances(dxy[np.ix_(a, b)], dxx[np.ix_(a, a)], dyy[np.ix_(b, b)], unbiased=False)
        for a, b in zip(ix, iy)
    ]
    return float(np.std(stats, ddof=1))


def dsm_excess(
    model: ScoreModelParams | ScoreFunction,
    spec: TargetSpec,
    schedule: NoiseSchedule,
    x0: np.ndarray,
    labels: np.ndarray,
    rng: np.random.Generator,
) -> float:
    """DSM loss minus its irreducible floor, estimated without bias via the exact denoiser."""
    t = draw_steps(len(x0), schedule.T, rng)
    x_t = forward_marginal_sample(x0, t, rng.standard_normal(x0.shape), schedule)
    eps_model = as_score_fn(model, schedule.T)(x_t, labels, t)
    eps_star = oracle_score(spec, x_t, labels, t, schedule)
    return float(np.mean(schedule.gamma[t] * np.sum((eps_model - eps_star) ** 2, axis=1)))


def generate_best_of(
    model,
    spec: TargetSpec,
    schedule: NoiseSchedule,
    labels: np.ndarray,
    rng: np.random.Generator,
    best_of: int = 1,
) -> np.ndarray:
    """One x0 per label; with best_of > 1 keep the candidate with the highest target log-density."""
    if best_of < 1:
        raise ValueError(f"best_of must be >= 1, got {best_of}")
    n = len(labels)
    traj = reverse_sample(model, np.repeat(labels, best_of), schedule, rng, n=n * best_of, data_dim=spec.data_dim)
    candidates = traj.x0.reshape(n, best_of, spec.data_dim)
    if best_of == 1:
        return candidates[:, 0]
    scores = target_logpdf_batch(spec, np.repeat(labels, best_of), traj.x0).reshape(n, best_of)
    return candidates[np.arange(n), np.argmax(scores, axis=1)]


@dataclass
class ConditionMetrics:
    condition: str
    n_samples: int
    energy_distance: float
    energy_distance_se: float
    loglik_mean: float
    loglik_median: float
    loglik_se: float
    target_loglik_mean: float
    dsm_excess: float


@dataclass
class EvalReport:
    per_condition: list[ConditionMetrics]
    aggregate: ConditionMetrics
    seed: int
    checkpoint_id: str = ""
    best_of: int = 1
    samples: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(m) for m in [*self.per_condition, self.aggregate]])

    def to_dict(self) -> dict:
        return {
            "checkpoint_id": self.checkpoint_id,
            "seed": self.seed,
            "best_of": self.best_of,
            "aggregate": asdict(self.aggregate),
            "per_condition": [asdict(m) for m in self.per_condition],
        }


def _evaluate_condition(model, spec, schedule, c: int, n_samples: int, seed: int, best_of: int):
    rng = np.random.default_rng([seed, c])
    labels = np.full(n_samples, c)
    generated = generate_best_of(model, spec, schedule, labels, rng, best_of)
    reference = sample_target_batch(spec, labels, rng)
    heldout = sample_target_batch(spec, labels, rng)
    loglik = target_logpdf_batch(spec, labels, generated)
    metrics = ConditionMetrics(
        condition=str(c),
        n_samples=n_samples,
        energy_distance=energy_distance(generated, reference),
        energy_distance_se=energy_distance_se(generated, reference, rng),
        loglik_mean=float(loglik.mean()),
        loglik_median=float(np.median(loglik)),
        loglik_se=float(loglik.std(ddof=1) / np.sqrt(n_samples)),
        target_loglik_mean=float(target_logpdf_batch(spec, labels, reference).mean()),
        dsm_excess=dsm_excess(model, spec, schedule, heldout, labels, rng),
    )
    return metrics, generated, loglik


def evaluate(
    model: ScoreModelParams | ScoreFunction,
    spec: TargetSpec,
    schedule: NoiseSchedule,
    n_samples: int,
    seed: int,
    best_of: int = 1,
    checkpoint_id: str = "",
    workers: int = 1,
) -> EvalReport:
    """Sample n_samples per condition and score them against the target."""
    if n_samples < MIN_SAMPLES:
        raise ValueError(f"evaluation needs n_samples >= {MIN_SAMPLES}, got {n_samples}")

    def run(c):
        return _evaluate_condition(model, spec, schedule, c, n_samples, seed, best_of)

    conditions = range(spec.num_conditions)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, conditions))
    else:
        results = [run(c) for c in conditions]

    per_condition = [r[0] for r in results]
    loglik = np.concatenate([r[2] for r in results])
    ses = np.array([m.energy_distance_se for m in per_condition])
    aggregate = ConditionMetrics(
        condition="all",
        n_samples=n_samples * spec.num_conditions,
        energy_distance=float(np.mean([m.energy_distance for m in per_condition])),
        energy_distance_se=float(np.sqrt(np.sum(ses**2)) / len(ses)),
        loglik_mean=float(loglik.mean()),
        loglik_median=float(np.median(loglik)),
        loglik_se=float(loglik.std(ddof=1) / np.sqrt(loglik.size)),
        target_loglik_mean=float(np.mean([m.target_loglik_mean for m in per_condition])),
        dsm_excess=float(np.mean([m.dsm_excess for m in per_condition])),
    )
    report = EvalReport(
        per_condition,
        aggregate,
        seed,
        checkpoint_id,
        best_of,
        samples={c: r[1] for c, r in enumerate(results)},
    )
    validate(report.to_frame(), EvalReportSchema)
    return report


def win_counts(
    model_a,
    model_b,
    spec: TargetSpec,
    schedule: NoiseSchedule,
    n_prompts: int,
    seed: int,
    best_of: int = 1,
) -> tuple[int, int, int]:
    """(wins, ties, losses) of model_a over paired prompts.

    Both models see the same condition, the same x_T and the same reverse-step
    noise for each prompt, so identical models tie everywhere.
    """
    if n_prompts < MIN_SAMPLES:
        raise ValueError(f"win rate needs n_prompts >= {MIN_SAMPLES}, got {n_prompts}")
    labels = np.random.default_rng([seed, 0]).integers(0, spec.num_conditions, size=n_prompts)
    score_a = target_logpdf_batch(
        spec, labels, generate_best_of(model_a, spec, schedule, labels, np.random.default_rng([seed, 1]), best_of)
    )
    score_b = target_logpdf_batch(
        spec, labels, generate_best_of(model_b, spec, schedule, labels, np.random.default_rng([seed, 1]), best_of)
    )
    wins = int(np.count_nonzero(score_a > score_b))
    ties = int(np.count_nonzero(score_a == score_b))
    return wins, ties, n_prompts - wins - ties


def win_rate(model_a, model_b, spec: TargetSpec, schedule: NoiseSchedule, n_prompts: int, seed: int, best_of: int = 1):
    """Fraction of prompts where model_a's sample has higher target log-density; ties count half."""
    wins, ties, _ = win_counts(model_a, model_b, spec, schedule, n_prompts, seed, best_of)
    return (wins + 0.5 * ties) / n_prompts
