"""Synthetic conditional targets p_data(x0 | c) and dataset generation.

Each condition is a diagonal-covariance Gaussian mixture in R^d. Because the
target is known in closed form, it also provides the exact log-density used
for evaluation and the exact denoiser E[eps | x_t, c] (`oracle_score`).
"""

from dataclasses import dataclass

import numpy as np
import pandas as pd

from pipeline.quality import dataset_schema, validate
from spin.schedule import NoiseSchedule
from spin.score_net import ScoreFunction

WEIGHT_TOLERANCE = 1e-9


@dataclass(frozen=True, eq=False)
class MixtureComponent:
    weight: float
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "var", np.asarray(self.var, dtype=np.float64))
        if self.weight <= 0:
            raise ValueError(f"component weight must be positive, got {self.weight}")
        if np.any(self.var <= 0):
            raise ValueError("component variances must be positive")

    def to_dict(self) -> dict:
        return {"weight": float(self.weight), "mean": self.mean.tolist(), "var": self.var.tolist()}


@dataclass(frozen=True, eq=False)
class TargetSpec:
    data_dim: int
    mixtures: tuple[tuple[MixtureComponent, ...], ...]

    def __post_init__(self):
        if not self.mixtures:
            raise ValueError("target needs at least one condition")
        for c, components in enumerate(self.mixtures):
            if not components:
                raise ValueError(f"condition {c} has no mixture components")
            total = sum(comp.weight for comp in components)
            if abs(total - 1.0) > WEIGHT_TOLERANCE:
                raise ValueError(f"condition {c} weights sum to {total}, expected 1")
            for comp in components:
                if comp.mean.shape != (self.data_dim,) or comp.var.shape != (self.data_dim,):
                    raise ValueError(f"condition {c} component does not match data_dim {self.data_dim}")

    @property
    def num_conditions(self) -> int:
        return len(self.mixtures)

    def check_condition(self, labels) -> np.ndarray:
        labels = np.asarray(labels)
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_conditions):
            raise ValueError(f"condition outside 0..{self.num_conditions - 1}: {labels.min()}..{labels.max()}")
        return labels

    def _stacked(self, label: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        components = self.mixtures[label]
        weights = np.array([comp.weight for comp in components])
        means = np.stack([comp.mean for comp in components])
        variances = np.stack([comp.var for comp in components])
        return weights, means, variances

    def to_dict(self) -> dict:
        return {
            "data_dim": self.data_dim,
            "mixtures": [[comp.to_dict() for comp in components] for components in self.mixtures],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "TargetSpec":
        mixtures = tuple(
            tuple(MixtureComponent(comp["weight"], comp["mean"], comp["var"]) for comp in components)
            for components in payload["mixtures"]
        )
        return cls(int(payload["data_dim"]), mixtures)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TargetSpec):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def default_target(radius: float = 2.0, offset: float = 1.0, var: float = 0.15) -> TargetSpec:
    """Four conditions on the compass points, each a 60/40 pair of blobs.

    Neighbouring conditions put blobs about 1.4 apart, so the conditions overlap
    partially and an undertrained model visibly mixes them up.
    """
    mixtures = []
    for c in range(4):
        angle = c * np.pi / 2.0
        direction = np.array([np.cos(angle), np.sin(angle)])
        normal = np.array([-direction[1], direction[0]])
        centre = radius * direction
        mixtures.append(
            (
                MixtureComponent(0.6, np.round(centre + offset * normal, 12), [var, var]),
                MixtureComponent(0.4, np.round(centre - offset * normal, 12), [var, var]),
            )
        )
    return TargetSpec(2, tuple(mixtures))


def sample_target_batch(spec: TargetSpec, labels, rng: np.random.Generator) -> np.ndarray:
    """One independent x0 per label: pick a component by weight, then a Gaussian draw."""
    labels = spec.check_condition(np.atleast_1d(labels))
    n = labels.shape[0]
    pick = rng.random(n)
    noise = rng.standard_normal((n, spec.data_dim))
    out = np.empty((n, spec.data_dim))
    for c in np.unique(labels):
        mask = labels == c
        weights, means, variances = spec._stacked(int(c))
        comp = np.minimum(np.searchsorted(np.cumsum(weights), pick[mask], side="right"), len(weights) - 1)
        out[mask] = means[comp] + np.sqrt(variances[comp]) * noise[mask]
    return out


def sample_target(spec: TargetSpec, condition: int, rng: np.random.Generator) -> np.ndarray:
    return sample_target_batch(spec, [condition], rng)[0]


def target_logpdf_batch(spec: TargetSpec, labels, x: np.ndarray) -> np.ndarray:
    labels = spec.check_condition(np.atleast_1d(labels))
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    labels = np.broadcast_to(labels, (x.shape[0],))
    out = np.empty(x.shape[0])
    for c in np.unique(labels):
        mask = labels == c
        weights, means, variances = spec._stacked(int(c))
        diff = x[mask][None, :, :] - means[:, None, :]
        log_comp = -0.5 * np.sum(np.log(2.0 * np.pi * variances)[:, None, :] + diff**2 / variances[:, None, :], axis=2)
        out[mask] = np.logaddexp.reduce(log_comp + np.log(weights)[:, None], axis=0)
    return out


def target_logpdf(spec: TargetSpec, condition: int, x: np.ndarray) -> float:
    """Exact mixture log-density of one point."""
    return float(target_logpdf_batch(spec, [condition], np.asarray(x)[None, :])[0])


def oracle_score(spec: TargetSpec, x_t: np.ndarray, labels, t, schedule: NoiseSchedule) -> np.ndarray:
    """E[eps | x_t, c] under the forward marginal of the target mixture.

    Per component, x_t ~ N(sqrt(a) m, a v + 1 - a) and the conditional noise
    mean is sqrt(1 - a) (x_t - sqrt(a) m) / (a v + 1 - a); the mixture answer
    weights these by the component responsibilities.
    """
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    n = x_t.shape[0]
    labels = np.broadcast_to(spec.check_condition(labels), (n,))
    a = schedule.alpha[np.broadcast_to(schedule.check_step(t), (n,))][:, None]
    out = np.empty_like(x_t)
    for c in np.unique(labels):
        mask = labels == c
        weights, means, variances = spec._stacked(int(c))
        xs, ac = x_t[mask], a[mask]
        spread = ac[None] * variances[:, None, :] + (1.0 - ac[None])
        centred = xs[None] - np.sqrt(ac[None]) * means[:, None, :]
        log_resp = np.log(weights)[:, None] - 0.5 * np.sum(np.log(spread) + centred**2 / spread, axis=2)
        resp = np.exp(log_resp - np.logaddexp.reduce(log_resp, axis=0))
        out[mask] = np.sum(resp[:, :, None] * np.sqrt(1.0 - ac[None]) * centred / spread, axis=0)
    return out


def oracle_score_fn(spec: TargetSpec, schedule: NoiseSchedule) -> ScoreFunction:
    return lambda x, labels, t: oracle_score(spec, x, labels, t, schedule)


@dataclass(frozen=True, eq=False)
class Dataset:
    x0: np.ndarray
    labels: np.ndarray
    seed: int
    spec: TargetSpec

    def __post_init__(self):
        if self.x0.ndim != 2 or self.x0.shape[1] != self.spec.data_dim:
            raise ValueError(f"dataset x0 shape {self.x0.shape} does not match data_dim {self.spec.data_dim}")
        if self.labels.shape != (self.x0.shape[0],):
            raise ValueError("one label per record is required")
        self.spec.check_condition(self.labels)

    def __len__(self) -> int:
        return self.x0.shape[0]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.x0, columns=[f"x_{i}" for i in range(self.spec.data_dim)])
        frame.insert(0, "condition", self.labels)
        return frame

    def condition_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.spec.num_conditions)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.seed == other.seed
            and self.spec == other.spec
            and np.array_equal(self.labels, other.labels)
            and self.x0.tobytes() == other.x0.tobytes()
        )


def generate_dataset(
    spec: TargetSpec, N: int, rng: np.random.Generator, seed: int, condition_probs=None
) -> Dataset:
    """N i.i.d. (c, x0) records; conditions uniform unless condition_probs is given."""
    if N < 1:
        raise ValueError(f"dataset size must be positive, got {N}")
    labels = rng.choice(spec.num_conditions, size=N, p=condition_probs).astype(np.int64)
    dataset = Dataset(sample_target_batch(spec, labels, rng), labels, seed, spec)
    validate(dataset.to_frame(), dataset_schema(spec))
    return dataset
