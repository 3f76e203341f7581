"""Training objectives: denoising score matching and the SPIN family.

Every SPIN variant reduces to the same shape. For aligned real and synthetic
items i the loss is mean_i ell(u_i) with

    u_i = -(wr_i * (A_i(theta) - A_i(theta_k)) - ws_i * (B_i(theta) - B_i(theta_k)))

where A and B are squared residuals on the real and synthetic side and wr, ws
are constant step weights. Only the variants differ in what A, B, wr and ws
are, so the objective, the clamp guard and the Reweighting / Matching / Pushing
gradient split are shared.

Objective builders return a `Tensor` so they can be passed straight to
`grad_loss`; the `*_loss` wrappers return floats.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from spin.autodiff import Tensor, constant
from spin.diffusion import (
    REAL,
    SYNTHETIC,
    SYNTHETIC_BACKWARD,
    NoisedBatch,
    StepPairs,
    Trajectory,
    mean_from_eps,
)
from spin.schedule import NoiseSchedule
from spin.score_net import ScoreFunction, ScoreModelParams, TrackedParams, grad_loss, score_tensor

logger = logging.getLogger(__name__)

ELL_KINDS = ("logistic", "hinge", "correlation")
VARIANTS = ("exact", "approx-mu", "approx-eps")
SYNTHETIC_PAIR_SOURCES = ("backward", "forwardized")

ARGUMENT_CLAMP = 50.0


@dataclass(frozen=True)
class EllFunction:
    """Monotone decreasing convex ell applied to the SPIN margin."""

    kind: str = "logistic"

    def __post_init__(self):
        if self.kind not in ELL_KINDS:
            raise ValueError(f"unknown ell '{self.kind}', expected one of {ELL_KINDS}")

    def __call__(self, u):
        u = np.asarray(u, dtype=np.float64)
        if self.kind == "logistic":
            return np.logaddexp(0.0, -u)
        if self.kind == "hinge":
            return np.maximum(0.0, 1.0 - u)
        return 1.0 - u

    def derivative(self, u):
        u = np.asarray(u, dtype=np.float64)
        if self.kind == "logistic":
            return -0.5 * (1.0 - np.tanh(u / 2.0))
        if self.kind == "hinge":
            # subgradient: 0 at the kink
            return np.where(u < 1.0, -1.0, 0.0)
        return np.full_like(u, -1.0)

    def at_zero(self) -> float:
        return float(self(0.0))

    def tensor(self, u: Tensor) -> Tensor:
        return u.map(self, self.derivative)


@dataclass(frozen=True, eq=False)
class SpinLossConfig:
    ell: EllFunction
    beta: np.ndarray
    lam: float = 1.0
    synthetic_pairs: str = "forwardized"
    variant: str = "approx-eps"
    clamp: float = ARGUMENT_CLAMP

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown SPIN variant '{self.variant}', expected one of {VARIANTS}")
        if self.synthetic_pairs not in SYNTHETIC_PAIR_SOURCES:
            raise ValueError(f"unknown synthetic pair source '{self.synthetic_pairs}'")
        if self.variant == "exact" and self.synthetic_pairs != "backward":
            raise ValueError("the exact loss needs full synthetic trajectories (synthetic_pairs = backward)")
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 3:
            raise ValueError("beta must be a per-step array of length T+1")
        if not np.all(beta[1:] > 0):
            raise ValueError("beta_t must be positive for every step")
        if self.lam <= 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        object.__setattr__(self, "beta", beta)


@dataclass
class SpinTerms:
    """The pieces of u for one batch. A and B track theta; the opponent values are constants."""

    real: Tensor
    real_k: np.ndarray
    synth: Tensor
    synth_k: np.ndarray
    w_real: np.ndarray
    w_synth: np.ndarray

    def argument(self) -> Tensor:
        return -((self.real - self.real_k) * self.w_real - (self.synth - self.synth_k) * self.w_synth)


@dataclass
class GradientDiagnostics:
    weights: np.ndarray
    matching_norm: float
    pushing_norm: float
    clamp_count: int
    arguments: np.ndarray = field(repr=False)


def _eps(model, x: np.ndarray, labels: np.ndarray, t: np.ndarray, T: int) -> Tensor:
    if isinstance(model, ScoreModelParams | TrackedParams):
        return score_tensor(model, x, labels, t, T)
    return constant(model(x, labels, t))


def _frozen_eps(model, x, labels, t, T) -> np.ndarray:
    return _eps(model, x, labels, t, T).data


def _mu_residual(model, x_prev, x_curr, labels, t, schedule: NoiseSchedule) -> Tensor:
    """||x_{t-1} - mu_model(x_t)||^2 per pair."""
    eps = _eps(model, x_curr, labels, t, schedule.T)
    return ((x_prev - mean_from_eps(x_curr, eps, t, schedule)) ** 2).sum(axis=1)


def _eps_residual(model, x_t, labels, t, target: np.ndarray, T: int) -> Tensor:
    """||target - eps_model(x_t)||^2 per sample."""
    return ((target - _eps(model, x_t, labels, t, T)) ** 2).sum(axis=1)


def _check_aligned(real_len: int, synth_len: int) -> None:
    if real_len != synth_len:
        raise ValueError(f"real and synthetic batches must align: {real_len} vs {synth_len}")
    if real_len == 0:
        raise ValueError("empty batch")


def _guarded_objective(terms: SpinTerms, cfg: SpinLossConfig) -> tuple[Tensor, np.ndarray, int]:
    u = terms.argument()
    clamped = int(np.count_nonzero(~((u.data > -cfg.clamp) & (u.data < cfg.clamp))))
    if clamped:
        logger.warning("SPIN margin clamped to +-%s on %d of %d items", cfg.clamp, clamped, u.data.size)
    loss = cfg.ell.tensor(u.clip(-cfg.clamp, cfg.clamp)).mean()
    return loss, u.data.copy(), clamped


# --- denoising score matching -------------------------------------------------


def dsm_objective(theta, batch: NoisedBatch, schedule: NoiseSchedule) -> Tensor:
    """mean_i gamma_t ||eps_theta(x_t, c, t) - eps||^2."""
    arch = getattr(theta, "arch", None)
    if arch is not None and batch.x0.shape[1] != arch.data_dim:
        raise ValueError(f"batch dimension {batch.x0.shape[1]} does not match data_dim {arch.data_dim}")
    schedule.check_step(batch.t)
    residual = _eps_residual(theta, batch.x_t(schedule), batch.labels, batch.t, batch.eps, schedule.T)
    return (residual * schedule.gamma[batch.t]).mean()


def dsm_loss(theta: ScoreModelParams | ScoreFunction, batch: NoisedBatch, schedule: NoiseSchedule) -> float:
    return dsm_objective(theta, batch, schedule).item()


# --- SPIN: full-trajectory loss --------------------------------------------------


def _stacked_steps(traj: Trajectory) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """All (x_{t-1}, x_t) of a trajectory batch, flattened step-major to (T*n, d)."""
    T, n = traj.T, traj.n
    x_prev = traj.states[:-1].reshape(T * n, -1)
    x_curr = traj.states[1:].reshape(T * n, -1)
    labels = np.tile(traj.labels, T)
    t = np.repeat(np.arange(1, T + 1), n)
    return x_prev, x_curr, labels, t


def _trajectory_residuals(model, traj: Trajectory, schedule: NoiseSchedule, weights: np.ndarray) -> Tensor:
    """sum_t weights_t ||x_{t-1} - mu(x_t)||^2 per trajectory, shape (n,)."""
    x_prev, x_curr, labels, t = _stacked_steps(traj)
    per_step = _mu_residual(model, x_prev, x_curr, labels, t, schedule).reshape(traj.T, traj.n)
    return (per_step * weights[1:, None]).sum(axis=0)


def exact_terms(theta, theta_k, real: Trajectory, synth: Trajectory, cfg: SpinLossConfig, schedule) -> SpinTerms:
    for traj in (real, synth):
        if traj.T != schedule.T:
            raise ValueError(f"trajectory has T={traj.T}, schedule has T={schedule.T}")
    if real.provenance != REAL or synth.provenance != SYNTHETIC:
        raise ValueError("exact loss needs a real and a synthetic trajectory batch")
    _check_aligned(real.n, synth.n)
    weights = cfg.beta / schedule.T
    ones = np.ones(real.n)
    return SpinTerms(
        real=_trajectory_residuals(theta, real, schedule, weights),
        real_k=_trajectory_residuals(theta_k, real, schedule, weights).data,
        synth=_trajectory_residuals(theta, synth, schedule, weights),
        synth_k=_trajectory_residuals(theta_k, synth, schedule, weights).data,
        w_real=ones,
        w_synth=ones,
    )


def spin_exact_objective(theta, theta_k, real, synth, cfg, schedule) -> Tensor:
    return _guarded_objective(exact_terms(theta, theta_k, real, synth, cfg, schedule), cfg)[0]


def spin_exact_loss(theta, theta_k, real: Trajectory, synth: Trajectory, cfg: SpinLossConfig, schedule) -> float:
    """ell(-sum_t beta_t / T [..four residuals..]), averaged over trajectory pairs."""
    return spin_exact_objective(theta, theta_k, real, synth, cfg, schedule).item()


# --- SPIN: per-pair loss on mean residuals --------------------------------------


def approx_terms(theta, theta_k, real: StepPairs, synth: StepPairs, cfg: SpinLossConfig, schedule) -> SpinTerms:
    _check_aligned(len(real), len(synth))
    if real.provenance != REAL or synth.provenance == REAL:
        raise ValueError("approximate loss needs real pairs on the left and synthetic pairs on the right")
    schedule.check_step(real.t)
    schedule.check_step(synth.t)

    def residual(model, pairs):
        return _mu_residual(model, pairs.x_prev, pairs.x_curr, pairs.labels, pairs.t, schedule)

    return SpinTerms(
        real=residual(theta, real),
        real_k=residual(theta_k, real).data,
        synth=residual(theta, synth),
        synth_k=residual(theta_k, synth).data,
        w_real=cfg.beta[real.t],
        w_synth=cfg.beta[synth.t],
    )


def spin_approx_objective(theta, theta_k, real, synth, cfg, schedule) -> Tensor:
    return _guarded_objective(approx_terms(theta, theta_k, real, synth, cfg, schedule), cfg)[0]


def spin_approx_loss(theta, theta_k, real: StepPairs, synth: StepPairs, cfg: SpinLossConfig, schedule) -> float:
    """Batch mean of ell(-beta_t [..four residuals..]) over aligned step pairs."""
    return spin_approx_objective(theta, theta_k, real, synth, cfg, schedule).item()


# --- SPIN: noise-space form ---------------------------------------------------------


def eps_terms(theta, theta_k, real: NoisedBatch, synth, cfg: SpinLossConfig, schedule) -> SpinTerms:
    """Noise-residual terms.

    A NoisedBatch on the synthetic side gives the forwardized four-term form;
    backward StepPairs give the three-term form, where the synthetic residual
    is ||eps_theta_k(x'_t) - eps_theta(x'_t)||^2 and its opponent term is zero.
    """
    if synth is None:
        raise ValueError("noise-space loss needs a synthetic batch")
    _check_aligned(len(real), len(synth))
    T = schedule.T
    schedule.check_step(real.t)
    schedule.check_step(synth.t)
    x_t = real.x_t(schedule)
    weight = lambda t: cfg.beta[t] * schedule.h[t] ** 2  # noqa: E731

    if isinstance(synth, NoisedBatch):
        if cfg.synthetic_pairs != "forwardized":
            raise ValueError("a noised synthetic batch needs synthetic_pairs = forwardized")
        x_syn = synth.x_t(schedule)
        return SpinTerms(
            real=_eps_residual(theta, x_t, real.labels, real.t, real.eps, T),
            real_k=_eps_residual(theta_k, x_t, real.labels, real.t, real.eps, T).data,
            synth=_eps_residual(theta, x_syn, synth.labels, synth.t, synth.eps, T),
            synth_k=_eps_residual(theta_k, x_syn, synth.labels, synth.t, synth.eps, T).data,
            w_real=weight(real.t),
            w_synth=weight(synth.t),
        )

    if synth.provenance != SYNTHETIC_BACKWARD or cfg.synthetic_pairs != "backward":
        raise ValueError("the three-term form needs backward synthetic pairs and synthetic_pairs = backward")
    opponent_eps = _frozen_eps(theta_k, synth.x_curr, synth.labels, synth.t, T)
    return SpinTerms(
        real=_eps_residual(theta, x_t, real.labels, real.t, real.eps, T),
        real_k=_eps_residual(theta_k, x_t, real.labels, real.t, real.eps, T).data,
        synth=_eps_residual(theta, synth.x_curr, synth.labels, synth.t, opponent_eps, T),
        synth_k=np.zeros(len(synth)),
        w_real=weight(real.t),
        w_synth=weight(synth.t),
    )


def spin_eps_objective(theta, theta_k, real, synth, cfg, schedule) -> Tensor:
    return _guarded_objective(eps_terms(theta, theta_k, real, synth, cfg, schedule), cfg)[0]


def spin_eps_loss(theta, theta_k, real: NoisedBatch, synth, cfg: SpinLossConfig, schedule) -> float:
    return spin_eps_objective(theta, theta_k, real, synth, cfg, schedule).item()


# --- shared machinery -------------------------------------------------------------

TERM_BUILDERS = {"exact": exact_terms, "approx-mu": approx_terms, "approx-eps": eps_terms}


def spin_objective(theta, theta_k, real, synth, cfg: SpinLossConfig, schedule) -> Tensor:
    """Dispatch on cfg.variant."""
    terms = TERM_BUILDERS[cfg.variant](theta, theta_k, real, synth, cfg, schedule)
    return _guarded_objective(terms, cfg)[0]


def spin_gradient_decomposed(
    theta: ScoreModelParams,
    theta_k,
    real,
    synth,
    cfg: SpinLossConfig,
    schedule: NoiseSchedule,
    workers: int = 1,
) -> tuple[np.ndarray, GradientDiagnostics]:
    """Gradient as Reweighting x (Matching - Pushing).

    weights_i = -beta_t ell'(u_i), zero where the margin guard clamped u_i.
    Matching = grad (1/n) sum_i weights_i A_i(theta), Pushing likewise with B.
    """
    build = TERM_BUILDERS[cfg.variant]
    terms = build(theta, theta_k, real, synth, cfg, schedule)
    u = terms.argument().data
    inside = (u > -cfg.clamp) & (u < cfg.clamp)
    slope = np.where(inside, cfg.ell.derivative(u), 0.0)
    n = u.size
    w_real = -terms.w_real * slope / n
    w_synth = -terms.w_synth * slope / n

    closures = [
        lambda p: (build(p, theta_k, real, synth, cfg, schedule).real * w_real).sum(),
        lambda p: (build(p, theta_k, real, synth, cfg, schedule).synth * w_synth).sum(),
    ]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=2) as pool:
            matching, pushing = pool.map(lambda c: grad_loss(theta, c), closures)
    else:
        matching, pushing = (grad_loss(theta, c) for c in closures)
    diagnostics = GradientDiagnostics(
        weights=-terms.w_real * slope,
        matching_norm=float(np.linalg.norm(matching)),
        pushing_norm=float(np.linalg.norm(pushing)),
        clamp_count=int(np.count_nonzero(~inside)),
        arguments=u,
    )
    return matching - pushing, diagnostics


def spin_arguments(theta, theta_k, real, synth, cfg: SpinLossConfig, schedule) -> np.ndarray:
    """Per-item margins u_i for the configured variant, before clamping."""
    return TERM_BUILDERS[cfg.variant](theta, theta_k, real, synth, cfg, schedule).argument().data


# --- test function -------------------------------------------------------------------


def test_function(
    theta, theta_k, traj: Trajectory, lam: float, schedule: NoiseSchedule
) -> np.ndarray:
    """lambda * log p_theta / p_theta_k over x_{1:T}, one value per trajectory.

    Reverse steps t = 2..T contribute Gaussian log-ratios. The t = 1 step is
    deterministic (sigma_1 = 0) and has no density, so it is left out.
    """
    if lam <= 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    if traj.T != schedule.T:
        raise ValueError(f"trajectory has T={traj.T}, schedule has T={schedule.T}")
    sigma = schedule.sigma[2:]
    if np.any(sigma <= 0):
        bad = int(np.flatnonzero(sigma <= 0)[0]) + 2
        raise ValueError(f"test function needs sigma_t > 0 for t >= 2, got sigma_{bad} = 0")
    weights = np.zeros(schedule.T + 1)
    weights[2:] = 1.0 / (2.0 * sigma**2)
    theirs = _trajectory_residuals(theta_k, traj, schedule, weights).data
    ours = _trajectory_residuals(theta, traj, schedule, weights).data
    return lam * (theirs - ours)


# not a pytest test
test_function.__test__ = False
