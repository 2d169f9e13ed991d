"""Denoising-diffusion math: variance schedule, forward noising, reverse step.

All functions are pure and framework-free; they accept numpy arrays (and,
for the noising helpers, torch tensors, since only scalar schedule constants
touch the data). Timesteps are 1-based; ``t = 0`` means "no noise" and the
cumulative product at step 0 is defined as 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    # conditioning timestep for each step; differs from 1..T for strided
    # sub-schedules, where step s runs the math of the coarse chain but the
    # denoiser is conditioned on the original training timestep
    timestep_map: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.timestep_map is None:
            object.__setattr__(
                self, "timestep_map", np.arange(1, len(self.beta) + 1, dtype=np.int64)
            )
        if not (len(self.beta) == len(self.alpha) == len(self.alpha_bar) == len(self.timestep_map)):
            raise ValidationError("schedule tables must share length")
        if np.any(self.beta <= 0.0) or np.any(self.beta >= 1.0):
            raise ValidationError("beta values must lie in (0, 1)")
        if np.any(np.diff(self.alpha_bar) >= 0.0):
            raise ValidationError("alpha_bar must be strictly decreasing")

    @property
    def T_steps(self) -> int:
        return len(self.beta)

    def abar(self, t: int) -> float:
        """Cumulative product at step ``t``, with ``abar(0) == 1``."""
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bar[t - 1])

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.T_steps:
            raise ValidationError(f"timestep {t} outside [1, {self.T_steps}]")


def make_schedule(T_steps: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear variance schedule from ``beta_start`` to ``beta_end``."""
    if T_steps < 1:
        raise ValidationError(f"T_steps must be >= 1, got {T_steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValidationError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    beta = np.linspace(beta_start, beta_end, T_steps, dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def strided_schedule(sched: NoiseSchedule, n_steps: int) -> NoiseSchedule:
    """Uniformly strided sub-schedule for few-step sampling.

    The sub-chain reuses the parent's cumulative products at the selected
    timesteps, so its per-step alphas are the exact products of the skipped
    fine steps.
    """
    if not 1 <= n_steps <= sched.T_steps:
        raise ValidationError(f"n_steps must be in [1, {sched.T_steps}]")
    taus = np.unique(np.round(np.linspace(1, sched.T_steps, n_steps)).astype(np.int64))
    abar = sched.alpha_bar[taus - 1]
    prev = np.concatenate([[1.0], abar[:-1]])
    alpha = abar / prev
    return NoiseSchedule(
        beta=1.0 - alpha,
        alpha=alpha,
        alpha_bar=abar,
        timestep_map=sched.timestep_map[taus - 1],
    )


def q_sample(z0, t: int, eps, sched: NoiseSchedule):
    """Forward noising: ``sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps``.

    ``t = 0`` is a pass-through returning ``z0``.
    """
    if t == 0:
        return z0
    sched._check_t(t)
    if eps.shape != z0.shape:
        raise ValidationError(f"eps shape {eps.shape} does not match z0 shape {z0.shape}")
    abar = sched.abar(t)
    return math.sqrt(abar) * z0 + math.sqrt(1.0 - abar) * eps


def ddpm_step(z_t, eps_hat, t: int, eps, sched: NoiseSchedule):
    """One reverse ancestral step from ``z_t`` to ``z_{t-1}``.

    mean = (z_t - (1 - alpha_t) / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)
    std  = sqrt((1 - abar_{t-1}) / (1 - abar_t) * (1 - alpha_t))

    At ``t = 1`` the leading cumulative product is 1, so the added variance
    is exactly zero and the step is deterministic.
    """
    sched._check_t(t)
    alpha_t = float(sched.alpha[t - 1])
    abar_t = sched.abar(t)
    abar_prev = sched.abar(t - 1)
    mean = (z_t - (1.0 - alpha_t) / math.sqrt(1.0 - abar_t) * eps_hat) / math.sqrt(alpha_t)
    if t == 1:
        return mean
    std = math.sqrt((1.0 - abar_prev) / (1.0 - abar_t) * (1.0 - alpha_t))
    return mean + std * eps


def blended_epsilon(denoiser, z_t, clean_cond, vg_cond, t: int, w: float):
    """Mix the clean-conditioned and map-conditioned noise predictions.

    ``w * eps(z_t, clean, none, t) + (1 - w) * eps(z_t, none, maps, t)``.
    The endpoints skip the branch they do not need.
    """
    if not 0.0 <= w <= 1.0:
        raise ValidationError(f"w must be in [0, 1], got {w}")
    if w == 1.0:
        return denoiser(z_t, clean_cond, None, t)
    if w == 0.0:
        return denoiser(z_t, None, vg_cond, t)
    clean_branch = denoiser(z_t, clean_cond, None, t)
    vg_branch = denoiser(z_t, None, vg_cond, t)
    return w * clean_branch + (1.0 - w) * vg_branch


def sample_loop(denoiser, clean_cond, vg_cond, sched: NoiseSchedule, w: float, seed: int):
    """Full reverse chain from seeded Gaussian noise down to ``z_0``.

    The latent shape is taken from ``clean_cond``. Bit-reproducible for a
    fixed seed: all noise comes from one seeded generator in a fixed order.
    """
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(np.asarray(clean_cond).shape)
    for s in range(sched.T_steps, 0, -1):
        t_cond = int(sched.timestep_map[s - 1])
        eps_hat = blended_epsilon(denoiser, z, clean_cond, vg_cond, t_cond, w)
        noise = rng.standard_normal(z.shape)
        z = ddpm_step(z, eps_hat, s, noise, sched)
    return z
