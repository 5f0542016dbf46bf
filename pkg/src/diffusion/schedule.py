"""
Noise Schedule
Linear-beta schedule, SDEdit noise injection and the deterministic
few-step update z_prev = lambda * z_t + mu * eps.

All arithmetic runs in float64; results are cast back to the input dtype.
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from src.core.tensorcore import RngStream, Tensor, as_tensor, gaussian
from src.utils.errors import DimensionError, ParameterError


def alpha_bar_table(n_train_steps: int = 1000, beta_min: float = 1e-4, beta_max: float = 0.02) -> np.ndarray:
    """Cumulative products of (1 - beta) over a linear beta ramp, float64."""
    if n_train_steps < 1:
        raise ParameterError(f"n_train_steps must be >= 1, got {n_train_steps}")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ParameterError(f"need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]")
    betas = np.linspace(beta_min, beta_max, n_train_steps, dtype=np.float64)
    return np.cumprod(1.0 - betas)


@dataclass(frozen=True)
class Schedule:
    """
    Attributes:
        n_train_steps: Length of the training schedule
        alpha_bar: Cumulative signal coefficients [n_train_steps], float64
        infer_steps: Training indices of the inference steps, strictly decreasing
        lambdas, mus: Update coefficients per inference step
    """

    n_train_steps: int
    alpha_bar: np.ndarray
    infer_steps: np.ndarray
    lambdas: np.ndarray
    mus: np.ndarray

    def __post_init__(self):
        steps = len(self.infer_steps)
        if steps < 1 or len(self.lambdas) != steps or len(self.mus) != steps:
            raise ParameterError("infer_steps, lambdas and mus must be non-empty and equally long")

    @property
    def n_infer_steps(self) -> int:
        return len(self.infer_steps)

    def check_index(self, step_index: int):
        if not 0 <= step_index < self.n_infer_steps:
            raise ParameterError(f"step index {step_index} out of range [0, {self.n_infer_steps})")

    def alpha_bar_at(self, step_index: int) -> float:
        self.check_index(step_index)
        return float(self.alpha_bar[self.infer_steps[step_index]])

    def alpha_bar_prev(self, step_index: int) -> float:
        """Signal coefficient after this step; 1.0 once the last step is done."""
        self.check_index(step_index)
        if step_index == self.n_infer_steps - 1:
            return 1.0
        return float(self.alpha_bar[self.infer_steps[step_index + 1]])


def make_schedule(n_train_steps: int = 1000, steps: int = 4, beta_min: float = 1e-4,
                  beta_max: float = 0.02) -> Schedule:
    """
    Build the inference schedule.

    Inference steps are the training indices arange(T) * (n // T), descending
    (T=4 over 1000 gives 750, 500, 250, 0).

    Args:
        n_train_steps: Training schedule length
        steps: Inference step count T
        beta_min, beta_max: Ends of the linear beta ramp

    Returns:
        Schedule with per-step lambda and mu
    """
    if not 1 <= steps <= n_train_steps:
        raise ParameterError(f"need 1 <= steps <= n_train_steps, got steps={steps}, n={n_train_steps}")
    alpha_bar = alpha_bar_table(n_train_steps, beta_min, beta_max)
    infer_steps = (np.arange(steps, dtype=np.int64) * (n_train_steps // steps))[::-1].copy()

    ab_t = alpha_bar[infer_steps]
    ab_prev = np.append(ab_t[1:], 1.0)
    lambdas = np.sqrt(ab_prev / ab_t)
    mus = np.sqrt(1.0 - ab_prev) - np.sqrt(ab_prev * (1.0 - ab_t) / ab_t)
    return Schedule(n_train_steps, alpha_bar, infer_steps, lambdas, mus)


def noise_level_index(strength: float, sched: Schedule) -> int:
    """Training index the strength maps to: round(s * (n_train_steps - 1))."""
    if not 0.0 <= strength <= 1.0:
        raise ParameterError(f"strength must be in [0, 1], got {strength}")
    return int(round(strength * (sched.n_train_steps - 1)))


def start_step_index(strength: float, sched: Schedule) -> int:
    """
    First inference step whose training index is at or below the strength's level.

    Strength 0 means no denoising at all and returns T.
    """
    t = noise_level_index(strength, sched)
    if strength == 0.0:
        return sched.n_infer_steps
    candidates = np.nonzero(sched.infer_steps <= t)[0]
    return int(candidates[0]) if len(candidates) else sched.n_infer_steps


def add_noise(z0: Tensor, strength: float, sched: Schedule, rng: RngStream) -> Tuple[Tensor, int]:
    """
    Noise a clean latent to the level chosen by the strength.

    Args:
        z0: Clean latent
        strength: Noise strength s in [0, 1]
        sched: Schedule
        rng: Noise stream (advanced)

    Returns:
        (z_t, start_step_index); strength 0 returns z0 unchanged and T
    """
    z0 = as_tensor(z0)
    start = start_step_index(strength, sched)
    if strength == 0.0:
        return z0, start
    ab = float(sched.alpha_bar[noise_level_index(strength, sched)])
    eps = gaussian(rng, z0.shape, dtype=np.float64)
    z_t = np.sqrt(ab) * z0.astype(np.float64) + np.sqrt(1.0 - ab) * eps
    return z_t.astype(z0.dtype), start


def denoise_step(z_t: Tensor, eps: Tensor, step_index: int, sched: Schedule) -> Tensor:
    """
    One deterministic update: z_prev = lambda_k * z_t + mu_k * eps.

    Args:
        z_t: Current latent
        eps: Predicted noise, same shape
        step_index: Inference step k
        sched: Schedule

    Returns:
        z_prev in the dtype of z_t
    """
    z_t = as_tensor(z_t)
    eps = as_tensor(eps)
    if z_t.shape != eps.shape:
        raise DimensionError(f"z_t {z_t.shape} and eps {eps.shape} differ")
    sched.check_index(step_index)
    out = sched.lambdas[step_index] * z_t.astype(np.float64) + sched.mus[step_index] * eps.astype(np.float64)
    return out.astype(z_t.dtype)


def predict_x0(z_t: Tensor, eps: Tensor, step_index: int, sched: Schedule) -> Tensor:
    z_t = as_tensor(z_t)
    ab = sched.alpha_bar_at(step_index)
    x0 = (z_t.astype(np.float64) - np.sqrt(1.0 - ab) * as_tensor(eps).astype(np.float64)) / np.sqrt(ab)
    return x0.astype(z_t.dtype)


def perfect_eps(z_t: Tensor, x0: Tensor, step_index: int, sched: Schedule) -> Tensor:
    """The noise that makes the update land exactly on the trajectory toward x0."""
    z_t = as_tensor(z_t)
    ab = sched.alpha_bar_at(step_index)
    eps = (z_t.astype(np.float64) - np.sqrt(ab) * as_tensor(x0).astype(np.float64)) / np.sqrt(1.0 - ab)
    return eps.astype(z_t.dtype)
