"""The conditional score network eps_theta(x_t, c, t).

A small MLP on [x | one-hot(c) | sinusoidal features of t/T] with SiLU
activations and an output clamp of +-B. Parameters live in plain numpy arrays
(`ScoreModelParams`); gradients come from `grad_loss`, which swaps the arrays
for tracking leaves of the reverse-mode engine and runs a loss closure.

Loss closures receive a params-like object and must only touch it through
`score_tensor` and Tensor arithmetic. The same closure therefore works with
fixed parameters (finite differences, plain evaluation) and tracked ones.
"""

import hashlib
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from spin.autodiff import Tensor, constant, leaves, tree_sum
from spin.errors import NonDifferentiableError

# (x, labels, t) -> predicted noise, all batched along axis 0.
ScoreFunction = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Architecture:
    data_dim: int = 2
    num_conditions: int = 4
    hidden: tuple[int, ...] = (64, 64)
    time_dim: int = 8
    clamp: float = 10.0

    def __post_init__(self):
        if self.time_dim % 2:
            raise ValueError(f"time_dim must be even, got {self.time_dim}")
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))

    @property
    def input_dim(self) -> int:
        return self.data_dim + self.num_conditions + self.time_dim

    def layer_shapes(self) -> list[tuple[int, ...]]:
        widths = [self.input_dim, *self.hidden, self.data_dim]
        shapes: list[tuple[int, ...]] = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            shapes.extend([(fan_in, fan_out), (fan_out,)])
        return shapes

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.layer_shapes())

    def to_dict(self) -> dict:
        return {
            "data_dim": self.data_dim,
            "num_conditions": self.num_conditions,
            "hidden": list(self.hidden),
            "time_dim": self.time_dim,
            "clamp": self.clamp,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "Architecture":
        return cls(**{**payload, "hidden": tuple(payload["hidden"])})


@dataclass(frozen=True)
class Condition:
    """A toy prompt: an integer label with its one-hot embedding."""

    label: int
    num_conditions: int

    def __post_init__(self):
        if not 0 <= self.label < self.num_conditions:
            raise ValueError(f"condition {self.label} outside 0..{self.num_conditions - 1}")

    @property
    def embedding(self) -> np.ndarray:
        return one_hot(np.array([self.label]), self.num_conditions)[0]


@dataclass(frozen=True, eq=False)
class ScoreModelParams:
    arch: Architecture
    weights: tuple[np.ndarray, ...] = field(repr=False)

    def __post_init__(self):
        shapes = self.arch.layer_shapes()
        if len(self.weights) != len(shapes):
            raise ValueError(f"expected {len(shapes)} weight arrays, got {len(self.weights)}")
        for w, s in zip(self.weights, shapes):
            if w.shape != s:
                raise ValueError(f"weight shape {w.shape} does not match architecture {s}")
            if not np.all(np.isfinite(w)):
                raise ValueError("parameters must be finite")

    @property
    def num_params(self) -> int:
        return self.arch.num_params

    def flatten(self) -> np.ndarray:
        return np.concatenate([w.ravel() for w in self.weights])

    @classmethod
    def unflatten(cls, arch: Architecture, flat: np.ndarray) -> "ScoreModelParams":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (arch.num_params,):
            raise ValueError(f"flat vector has shape {flat.shape}, architecture needs ({arch.num_params},)")
        weights, offset = [], 0
        for shape in arch.layer_shapes():
            size = int(np.prod(shape))
            weights.append(flat[offset : offset + size].reshape(shape).copy())
            offset += size
        return cls(arch, tuple(weights))

    def copy(self) -> "ScoreModelParams":
        return ScoreModelParams(self.arch, tuple(w.copy() for w in self.weights))

    def checksum(self) -> str:
        return hashlib.sha256(self.flatten().astype("<f8").tobytes()).hexdigest()

    def __eq__(self, other) -> bool:
        if not isinstance(other, ScoreModelParams):
            return NotImplemented
        return self.arch == other.arch and np.array_equal(self.flatten(), other.flatten())


@dataclass(frozen=True, eq=False)
class TrackedParams:
    """Parameters as gradient-tracking leaves, handed to loss closures by grad_loss."""

    arch: Architecture
    weights: tuple[Tensor, ...]


def init_params(arch: Architecture, rng: np.random.Generator, zero_output: bool = True) -> ScoreModelParams:
    """Fan-in scaled uniform weights, zero biases.

    With zero_output the last layer starts at zero, so the fresh model predicts
    eps = 0 everywhere.
    """
    weights = []
    shapes = arch.layer_shapes()
    for i, shape in enumerate(shapes):
        last_layer = i >= len(shapes) - 2
        if len(shape) == 1 or (last_layer and zero_output):
            weights.append(np.zeros(shape))
        else:
            bound = 1.0 / np.sqrt(shape[0])
            weights.append(rng.uniform(-bound, bound, size=shape))
    return ScoreModelParams(arch, tuple(weights))


def one_hot(labels: np.ndarray, num_conditions: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_conditions):
        raise ValueError(f"condition labels must lie in 0..{num_conditions - 1}")
    return np.eye(num_conditions)[labels]


def time_features(t: np.ndarray, T: int, dim: int) -> np.ndarray:
    """Sinusoidal features of t/T at octave frequencies."""
    tau = np.asarray(t, dtype=np.float64)[:, None] / T
    freqs = np.pi * 2.0 ** np.arange(dim // 2)
    return np.concatenate([np.sin(tau * freqs), np.cos(tau * freqs)], axis=1)


def network_input(arch: Architecture, x: np.ndarray, labels, t, T: int) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != arch.data_dim:
        raise ValueError(f"input dimension {x.shape[1]} does not match data_dim {arch.data_dim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("score network input contains non-finite values")
    n = x.shape[0]
    labels = np.broadcast_to(np.asarray(labels), (n,))
    t = np.broadcast_to(np.asarray(t), (n,))
    return np.concatenate([x, one_hot(labels, arch.num_conditions), time_features(t, T, arch.time_dim)], axis=1)


def _as_tensors(params: ScoreModelParams | TrackedParams) -> tuple[Tensor, ...]:
    if isinstance(params, TrackedParams):
        return params.weights
    return tuple(constant(w) for w in params.weights)


def score_tensor(params: ScoreModelParams | TrackedParams, x: np.ndarray, labels, t, T: int) -> Tensor:
    """Differentiable forward pass; x is (n, d), labels and t broadcast to (n,)."""
    arch = params.arch
    weights = _as_tensors(params)
    hidden = constant(network_input(arch, x, labels, t, T))
    layers = [(weights[i], weights[i + 1]) for i in range(0, len(weights), 2)]
    for w, b in layers[:-1]:
        hidden = (hidden @ w + b).silu()
    w, b = layers[-1]
    return (hidden @ w + b).clip(-arch.clamp, arch.clamp)


def eval_score(params: ScoreModelParams, x: np.ndarray, condition, t, T: int) -> np.ndarray:
    """eps_theta(x, c, t) as a plain array.

    Accepts a single vector with a `Condition` and integer step, or a batch
    with label and step arrays.
    """
    labels = condition.label if isinstance(condition, Condition) else condition
    single = np.ndim(x) == 1
    out = score_tensor(params, x, labels, t, T).data
    return out[0] if single else out


def as_score_fn(model: ScoreModelParams | ScoreFunction, T: int) -> ScoreFunction:
    """Uniform (x, labels, t) -> eps view of either network params or any callable."""
    if isinstance(model, ScoreModelParams):
        return lambda x, labels, t: eval_score(model, x, labels, t, T)
    if callable(model):
        return model
    raise TypeError(f"expected ScoreModelParams or a score callable, got {type(model).__name__}")


LossClosure = Callable[[ScoreModelParams | TrackedParams], Tensor]


def value_and_grad(params: ScoreModelParams, closure: LossClosure) -> tuple[float, np.ndarray]:
    """Loss value and its exact reverse-mode gradient, flattened to length P."""
    tracked = TrackedParams(params.arch, tuple(leaves(params.weights)))
    try:
        loss = closure(tracked)
    except TypeError as e:
        raise NonDifferentiableError(f"loss closure left the differentiable primitives: {e}") from e
    if not isinstance(loss, Tensor):
        raise NonDifferentiableError(f"loss closure returned {type(loss).__name__}, expected a Tensor")
    loss.backward()
    grad = np.concatenate([np.zeros(w.data.size) if w.grad is None else w.grad.ravel() for w in tracked.weights])
    return loss.item(), grad


def grad_loss(params: ScoreModelParams, closure: LossClosure) -> np.ndarray:
    return value_and_grad(params, closure)[1]


def sharded_value_and_grad(
    params: ScoreModelParams, closures: Sequence[LossClosure], workers: int = 1
) -> tuple[float, np.ndarray]:
    """Sum over shards of loss and gradient, reduced pairwise in shard order."""
    if workers > 1 and len(closures) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda c: value_and_grad(params, c), closures))
    else:
        results = [value_and_grad(params, c) for c in closures]
    value = tree_sum([np.array(v) for v, _ in results])
    return float(value), tree_sum([g for _, g in results])


def sharded_grad(params: ScoreModelParams, closures: Sequence[LossClosure], workers: int = 1) -> np.ndarray:
    return sharded_value_and_grad(params, closures, workers)[1]


def loss_value(params: ScoreModelParams, closure: LossClosure) -> float:
    out = closure(params)
    return out.item() if isinstance(out, Tensor) else float(out)


def finite_diff_gradient(params: ScoreModelParams, closure: LossClosure, step: float = 1e-5) -> np.ndarray:
    """Central differences, one pair of loss evaluations per parameter."""
    if step <= 0:
        raise ValueError(f"finite-difference step must be positive, got {step}")
    base = params.flatten()
    grad = np.empty_like(base)
    for i in range(base.size):
        shifted = base.copy()
        shifted[i] = base[i] + step
        upper = loss_value(ScoreModelParams.unflatten(params.arch, shifted), closure)
        shifted[i] = base[i] - step
        lower = loss_value(ScoreModelParams.unflatten(params.arch, shifted), closure)
        grad[i] = (upper - lower) / (2.0 * step)
    return grad
