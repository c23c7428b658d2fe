"""Denoising diffusion: linear schedule, forward noising, two samplers.

Convention: t is a 0-based index into the schedule arrays, so t = 0 is the
least-noised level and t = T-1 the most.  The forward process is the closed
form z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps.  Sampling supports
fewer steps than the schedule by respacing: an evenly spaced subsequence of
levels with per-transition coefficients recomputed from the cumulative
alphas, which reduces to the exact reverse process when steps == T.

``eps_fn(z, t)`` is any callable returning the predicted noise for a batch
at level t (an int); samplers never touch model internals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-level beta/alpha/alpha-bar arrays of length T."""
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return self.betas.shape[0]

    @classmethod
    def linear(cls, T: int = 1000, beta_start: float = 1e-4,
               beta_end: float = 0.02) -> "NoiseSchedule":
        if T < 1:
            raise ShapeError(f"schedule length must be >= 1, got {T}")
        if not (0.0 < beta_start <= beta_end < 1.0):
            raise ShapeError(f"invalid beta range [{beta_start}, {beta_end}]")
        betas = np.linspace(beta_start, beta_end, T)
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        sched = cls(betas, alphas, alpha_bars)
        sched.validate()
        return sched

    def validate(self) -> None:
        if not (np.all(self.betas > 0) and np.all(self.betas < 1)):
            raise NumericalError("betas must lie in (0, 1)")
        if np.any(np.diff(self.alpha_bars) >= 0):
            raise NumericalError("alpha_bars must be strictly decreasing")
        if not (np.all(self.alpha_bars > 0) and np.all(self.alpha_bars < 1)):
            raise NumericalError("alpha_bars must lie in (0, 1)")


def _coef(values: np.ndarray, t, ndim: int) -> np.ndarray:
    """Gather per-sample coefficients and shape them to broadcast over z."""
    c = np.asarray(values)[t]
    if np.ndim(c) == 0:
        return np.float64(c)
    return c.reshape(c.shape + (1,) * (ndim - 1))


def q_sample(z0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form forward diffusion of z0 to level t with given noise."""
    if z0.shape != eps.shape:
        raise ShapeError(f"q_sample: z0 {z0.shape} and eps {eps.shape} differ")
    t = np.asarray(t)
    if t.min() < 0 or t.max() >= schedule.T:
        raise ShapeError(f"q_sample: t outside [0, {schedule.T - 1}]")
    abar = _coef(schedule.alpha_bars, t, z0.ndim)
    return np.sqrt(abar) * z0 + np.sqrt(1.0 - abar) * eps


def denoise_predict(model, z_t, t, cond):
    """Predicted noise from a conditional denoiser (thin dispatch)."""
    return model(z_t, t, cond)


def respaced_levels(T: int, steps: int) -> np.ndarray:
    """Evenly spaced 0-based levels, ascending, steps of them, last == T-1."""
    if not 1 <= steps <= T:
        raise ShapeError(f"steps must be in [1, {T}], got {steps}")
    levels = np.unique(np.round(np.linspace(0, T - 1, steps)).astype(np.int64))
    if levels.shape[0] != steps:
        raise NumericalError(f"respacing {T} levels to {steps} steps collided")
    return levels


def ddpm_sample(eps_fn, shape: tuple[int, ...], schedule: NoiseSchedule,
                steps: int, rng: np.random.Generator) -> np.ndarray:
    """Ancestral sampling with the posterior variance at each transition.

    Starts from standard normal noise; the final transition to z_0 adds no
    noise.  With steps == T this is the exact reverse process.
    """
    levels = respaced_levels(schedule.T, steps)[::-1]
    z = rng.standard_normal(shape)
    for i, t_cur in enumerate(levels):
        t_prev = levels[i + 1] if i + 1 < len(levels) else -1
        abar_cur = schedule.alpha_bars[t_cur]
        abar_prev = schedule.alpha_bars[t_prev] if t_prev >= 0 else 1.0
        alpha_eff = abar_cur / abar_prev
        beta_eff = 1.0 - alpha_eff
        eps_hat = eps_fn(z, int(t_cur))
        mean = (z - beta_eff / np.sqrt(1.0 - abar_cur) * eps_hat) / np.sqrt(alpha_eff)
        var = beta_eff * (1.0 - abar_prev) / (1.0 - abar_cur)
        if var > 0 and i + 1 < len(levels):
            z = mean + np.sqrt(var) * rng.standard_normal(shape)
        else:
            z = mean
        if not np.isfinite(z).all():
            raise NumericalError(f"ddpm_sample diverged at level {t_cur}")
    return z


# Adams-Bashforth style multistep weights over the latest noise estimates.
_PLMS_WEIGHTS = (
    (1.0,),
    (3.0 / 2.0, -1.0 / 2.0),
    (23.0 / 12.0, -16.0 / 12.0, 5.0 / 12.0),
    (55.0 / 24.0, -59.0 / 24.0, 37.0 / 24.0, -9.0 / 24.0),
)


def plms_sample(eps_fn, shape: tuple[int, ...], schedule: NoiseSchedule,
                steps: int, rng: np.random.Generator) -> np.ndarray:
    """Pseudo linear multistep sampling.

    Each transition combines up to the four most recent noise predictions
    with Adams-Bashforth weights, then applies the deterministic (eta = 0)
    transfer to the next level; randomness enters only through the initial
    noise draw.
    """
    levels = respaced_levels(schedule.T, steps)[::-1]
    z = rng.standard_normal(shape)
    history: list[np.ndarray] = []
    for i, t_cur in enumerate(levels):
        t_prev = levels[i + 1] if i + 1 < len(levels) else -1
        abar_cur = schedule.alpha_bars[t_cur]
        abar_prev = schedule.alpha_bars[t_prev] if t_prev >= 0 else 1.0
        eps_hat = eps_fn(z, int(t_cur))
        stack = [eps_hat] + history
        weights = _PLMS_WEIGHTS[min(len(stack), 4) - 1]
        eps_prime = sum(w * e for w, e in zip(weights, stack))
        pred_z0 = (z - np.sqrt(1.0 - abar_cur) * eps_prime) / np.sqrt(abar_cur)
        z = np.sqrt(abar_prev) * pred_z0 + np.sqrt(1.0 - abar_prev) * eps_prime
        history = [eps_hat] + history[:2]
        if not np.isfinite(z).all():
            raise NumericalError(f"plms_sample diverged at level {t_cur}")
    return z
