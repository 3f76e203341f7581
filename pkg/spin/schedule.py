"""Noise schedules for DDIM-style diffusion.

A schedule fixes the cumulative signal levels alpha[0..T] (alpha[0] = 1),
the reverse-step noise scales sigma[1..T], the DSM weights gamma[1..T] and the
coefficient h[1..T] that links mean residuals to noise residuals:

    x_{t-1} - mu_theta(x_t) = h_t * (eps - eps_theta) + sigma_t * eps_hat

Per-step arrays are stored with length T+1 so they index by step directly;
slot 0 is NaN padding and never read.

h_t uses sqrt(1 - alpha_t) in its second term. The value follows from the
mu_theta parameterization; the variant with sqrt(1 - alpha_{t-1}) does not
satisfy the identity above (see tests/test_schedule.py).
"""

from dataclasses import dataclass

import numpy as np

SHAPES = ("cosine", "linear-cumulative")
BETA_POLICIES = ("constant", "gamma-matched")

# Terminal signal level targeted by both built-in shapes.
ALPHA_END = 0.02
COSINE_OFFSET = 0.008


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    alpha: np.ndarray
    sigma: np.ndarray
    gamma: np.ndarray
    h: np.ndarray
    eta: float
    shape: str

    def check_step(self, t) -> np.ndarray:
        """Validate step indices (scalar or array) against 1..T."""
        steps = np.asarray(t)
        if not np.issubdtype(steps.dtype, np.integer):
            raise ValueError(f"step indices must be integers, got dtype {steps.dtype}")
        if steps.size and (steps.min() < 1 or steps.max() > self.T):
            raise ValueError(f"step out of range 1..{self.T}: {steps.min()}..{steps.max()}")
        return steps

    def posterior_noise_coef(self, t) -> np.ndarray:
        """sqrt(1 - alpha_{t-1} - sigma_t^2), the eps coefficient of the posterior mean."""
        return np.sqrt(np.maximum(0.0, 1.0 - self.alpha[np.asarray(t) - 1] - self.sigma[t] ** 2))

    def h_variant(self) -> np.ndarray:
        """h with sqrt(1 - alpha_{t-1}) in place of sqrt(1 - alpha_t). Comparison only, never used for training."""
        prev, curr = self.alpha[:-1], self.alpha[1:]
        out = np.sqrt(np.maximum(0.0, 1.0 - prev - self.sigma[1:] ** 2)) - np.sqrt(prev / curr) * np.sqrt(1.0 - prev)
        return _padded(out)

    def implied_lambda(self, beta: np.ndarray) -> np.ndarray:
        """lambda_t = 2 beta_t sigma_t^2 / T, from sigma_t^2 = lambda T / (2 beta_t)."""
        out = 2.0 * beta * self.sigma**2 / self.T
        out[0] = np.nan
        return out

    def to_dict(self) -> dict:
        """Explicit arrays, so a run can be reproduced without re-deriving anything."""
        return {
            "T": self.T,
            "shape": self.shape,
            "eta": self.eta,
            "alpha": self.alpha.tolist(),
            "sigma": self.sigma[1:].tolist(),
            "gamma": self.gamma[1:].tolist(),
            "h": self.h[1:].tolist(),
        }

    def __eq__(self, other) -> bool:
        if not isinstance(other, NoiseSchedule):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def _frozen(values: np.ndarray) -> np.ndarray:
    values = np.array(values, dtype=np.float64)
    values.setflags(write=False)
    return values


def _padded(values: np.ndarray) -> np.ndarray:
    return np.concatenate([[np.nan], np.asarray(values, dtype=np.float64)])


def from_alphas(alpha, eta: float, gamma=None, shape: str = "custom") -> NoiseSchedule:
    """Build a schedule from explicit cumulative signal levels alpha[0..T]."""
    alpha = np.asarray(alpha, dtype=np.float64)
    T = len(alpha) - 1
    if T < 2:
        raise ValueError(f"schedule needs T >= 2, got T={T}")
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    if alpha[0] != 1.0:
        raise ValueError(f"alpha[0] must be exactly 1, got {alpha[0]}")
    if np.any(np.diff(alpha) >= 0):
        raise ValueError("alpha must be strictly decreasing")
    if alpha[-1] <= 0.0 or alpha[-1] > 0.05:
        raise ValueError(f"alpha[T] must lie in (0, 0.05], got {alpha[-1]}")

    prev, curr = alpha[:-1], alpha[1:]
    sigma = eta * np.sqrt((1.0 - prev) / (1.0 - curr)) * np.sqrt(1.0 - curr / prev)
    # Final reverse step is deterministic.
    sigma[0] = 0.0

    slack = 1.0 - prev - sigma**2
    if np.any(slack < -1e-15):
        bad = int(np.argmin(slack)) + 1
        raise ValueError(f"schedule infeasible at t={bad}: sigma^2={sigma[bad - 1] ** 2} > 1 - alpha[t-1]")
    slack = np.maximum(slack, 0.0)

    h = np.sqrt(slack) - np.sqrt(prev / curr) * np.sqrt(1.0 - curr)

    gamma = np.ones(T) if gamma is None else np.broadcast_to(np.asarray(gamma, dtype=np.float64), (T,))
    if np.any(gamma <= 0):
        raise ValueError("gamma weights must be positive")

    return NoiseSchedule(
        T=T,
        alpha=_frozen(alpha),
        sigma=_frozen(_padded(sigma)),
        gamma=_frozen(_padded(gamma)),
        h=_frozen(_padded(h)),
        eta=float(eta),
        shape=shape,
    )


def make_schedule(T: int, shape: str = "cosine", eta: float = 0.0, gamma=None) -> NoiseSchedule:
    """Construct one of the built-in schedule shapes.

    cosine: squared-cosine curve on t/T, blended so alpha[T] = 0.02.
    linear-cumulative: alpha falls linearly from 1 to 0.02.
    """
    if T < 2:
        raise ValueError(f"schedule needs T >= 2, got T={T}")
    steps = np.arange(T + 1, dtype=np.float64) / T
    if shape == "cosine":
        curve = np.cos((steps + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * np.pi / 2.0) ** 2
        curve = curve / curve[0]
        alpha = ALPHA_END + (1.0 - ALPHA_END) * curve
    elif shape == "linear-cumulative":
        alpha = 1.0 - (1.0 - ALPHA_END) * steps
    else:
        raise ValueError(f"unknown schedule shape '{shape}', expected one of {SHAPES}")
    alpha[0] = 1.0
    return from_alphas(alpha, eta, gamma=gamma, shape=shape)


def from_dict(payload: dict) -> NoiseSchedule:
    """Inverse of NoiseSchedule.to_dict; trusts the stored arrays verbatim."""
    schedule = from_alphas(payload["alpha"], payload["eta"], gamma=payload["gamma"], shape=payload["shape"])
    stored_sigma = np.asarray(payload["sigma"], dtype=np.float64)
    stored_h = np.asarray(payload["h"], dtype=np.float64)
    return NoiseSchedule(
        T=schedule.T,
        alpha=schedule.alpha,
        sigma=_frozen(_padded(stored_sigma)),
        gamma=schedule.gamma,
        h=_frozen(_padded(stored_h)),
        eta=schedule.eta,
        shape=schedule.shape,
    )


def beta_schedule(schedule: NoiseSchedule, policy: str = "constant", s: float = 1.0) -> np.ndarray:
    """Per-step SPIN weights beta[1..T] (slot 0 is NaN padding).

    constant: beta_t = s.
    gamma-matched: beta_t = s * gamma_t / h_t^2, which makes the eps-form loss
    argument scale with s * gamma_t independently of the schedule.
    """
    if s <= 0:
        raise ValueError(f"beta scale must be positive, got {s}")
    if policy == "constant":
        beta = np.full(schedule.T, float(s))
    elif policy == "gamma-matched":
        h = schedule.h[1:]
        if np.any(h == 0.0):
            bad = int(np.flatnonzero(h == 0.0)[0]) + 1
            raise ValueError(f"gamma-matched beta undefined: h_t = 0 at t={bad}")
        beta = s * schedule.gamma[1:] / h**2
    else:
        raise ValueError(f"unknown beta policy '{policy}', expected one of {BETA_POLICIES}")
    return _padded(beta)
