"""Noise schedules, forward diffusion and reverse sampler steps.

Timesteps are 0-based indices ``t ∈ [0, T-1]``; step ``t`` of a 1-based
presentation maps to index ``t - 1``. All formulas accept LatentGrid or
DuoGrid arguments as well as batched numpy arrays, see `elementwise`.
"""

from dataclasses import dataclass
import numpy as np
from .constants import SCHEDULE_KINDS
from .errors import IndexOutOfRange, InvalidConfig
from .gridcore import check_same_shape, elementwise


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Variance schedule tables of a diffusion process."""

    kind: str
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def check_t(self, t: int):
        """Raises IndexOutOfRange unless `t` indexes the schedule."""
        if not 0 <= int(t) < self.T:
            raise IndexOutOfRange(f"Timestep {t} outside [0, {self.T}).")


def build_schedule(
    kind: str = "scaled_linear",
    T: int = 1000,
    beta_start: float = 8.5e-4,
    beta_end: float = 1.2e-2,
) -> NoiseSchedule:
    """Builds a linear or scaled-linear (Stable Diffusion) schedule.

    Args:
        kind (str): 'linear' spaces beta linearly, 'scaled_linear' spaces
                    sqrt(beta) linearly.
        T (int): Number of diffusion steps.
        beta_start (float): First variance increment.
        beta_end (float): Last variance increment.

    Returns:
        NoiseSchedule: Tables beta, alpha = 1 - beta, alpha_bar = cumprod(alpha).

    Raises:
        InvalidConfig: If T < 1, the kind is unknown or the betas are out of range.
    """
    if kind not in SCHEDULE_KINDS:
        raise InvalidConfig(f"Unknown schedule kind '{kind}'.")
    if int(T) < 1:
        raise InvalidConfig(f"T must be at least 1, got {T}.")
    if not 0 < beta_start <= beta_end < 1:
        raise InvalidConfig(
            f"Need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}."
        )
    if kind == "linear":
        beta = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    else:
        beta = np.linspace(np.sqrt(beta_start), np.sqrt(beta_end), int(T), dtype=np.float64) ** 2
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    for table in (beta, alpha, alpha_bar):
        table.setflags(write=False)
    return NoiseSchedule(kind=kind, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def sampling_timesteps(T: int, steps: int) -> np.ndarray:
    """Evenly strided descending timesteps, e.g. [980, 960, ..., 0] for T=1000, steps=50."""
    if not 1 <= steps <= T:
        raise InvalidConfig(f"Sampler steps must lie in [1, {T}], got {steps}.")
    return (np.arange(steps) * (T // steps))[::-1].copy()


@elementwise
def forward_diffuse(z0, t: int, eps, s: NoiseSchedule):
    """Noises a clean latent: z_t = sqrt(alpha_bar_t)·z0 + sqrt(1 − alpha_bar_t)·eps."""
    check_same_shape(z0, eps)
    s.check_t(t)
    a = s.alpha_bar[t]
    return np.sqrt(a) * z0 + np.sqrt(1.0 - a) * eps


@elementwise
def predict_z0(zt, eps_hat, t: int, s: NoiseSchedule):
    """Inverts forward diffusion for a given noise estimate."""
    check_same_shape(zt, eps_hat)
    s.check_t(t)
    a = s.alpha_bar[t]
    return (zt - np.sqrt(1.0 - a) * eps_hat) / np.sqrt(a)


@elementwise
def ddpm_step(zt, eps_hat, t: int, xi, s: NoiseSchedule, t_prev: int = None):
    """One ancestral DDPM step from `t` to `t_prev` (default t − 1).

    For consecutive steps the schedule's own alpha_t and beta_t are used. For
    strided steps the effective alpha = alpha_bar_t / alpha_bar_prev applies.
    The posterior variance is the lower-bound beta-tilde, zero on the last
    step (t_prev = −1), so `xi` is ignored there.
    """
    check_same_shape(zt, eps_hat, xi)
    s.check_t(t)
    t_prev = t - 1 if t_prev is None else int(t_prev)
    if not -1 <= t_prev < t:
        raise IndexOutOfRange(f"t_prev {t_prev} must lie in [-1, {t}).")
    alpha_bar_prev = 1.0 if t_prev < 0 else s.alpha_bar[t_prev]
    if t_prev == t - 1:
        alpha_t, beta_t = s.alpha[t], s.beta[t]
    else:
        alpha_t = s.alpha_bar[t] / alpha_bar_prev
        beta_t = 1.0 - alpha_t
    mean = (zt - beta_t / np.sqrt(1.0 - s.alpha_bar[t]) * eps_hat) / np.sqrt(alpha_t)
    if t_prev < 0:
        return mean
    variance = (1.0 - alpha_bar_prev) / (1.0 - s.alpha_bar[t]) * beta_t
    return mean + np.sqrt(variance) * xi


@elementwise
def ddim_step(zt, eps_hat, t: int, t_prev: int, s: NoiseSchedule):
    """Deterministic DDIM step (eta = 0); `t_prev = -1` returns the z0 estimate."""
    check_same_shape(zt, eps_hat)
    s.check_t(t)
    if not -1 <= t_prev <= t:
        raise IndexOutOfRange(f"t_prev {t_prev} must lie in [-1, {t}].")
    z0_hat = predict_z0(zt, eps_hat, t, s)
    if t_prev < 0:
        return z0_hat
    a = s.alpha_bar[t_prev]
    return np.sqrt(a) * z0_hat + np.sqrt(1.0 - a) * eps_hat
