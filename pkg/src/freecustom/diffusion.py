"""Noise schedule, forward noising and the DDPM / DDIM reverse updates.

Timesteps are 1-based in every formula (t = 1..T) and 0-based in storage:
``sched.alpha_bar[t - 1]`` holds alpha_bar_t. ``alpha_bar_at(0)`` is 1, the
clean endpoint. Schedule tables are float64 scalars; tensors stay float32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .numerics import DTYPE, as_tensor


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray  # posterior std; sigma[0]**2 == beta[0] by convention

    @classmethod
    def from_betas(cls, beta) -> "NoiseSchedule":
        beta = np.asarray(beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size == 0:
            raise InputError("beta table must be a nonempty vector")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise InputError("every beta must lie in (0, 1)")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        if not (alpha_bar[-1] > 0 and np.all(np.diff(alpha_bar) < 0)):
            raise InputError("alpha_bar underflows; shorten T or lower the betas")
        prev = np.concatenate([[1.0], alpha_bar[:-1]])
        var = (1.0 - prev) / (1.0 - alpha_bar) * beta
        var[0] = beta[0]
        for arr in (beta, alpha, alpha_bar, var):
            arr.setflags(write=False)
        sigma = np.sqrt(var)
        sigma.setflags(write=False)
        return cls(beta.size, beta, alpha, alpha_bar, sigma)

    def alpha_bar_at(self, t: int) -> float:
        if t == 0:
            return 1.0
        self._check(t)
        return float(self.alpha_bar[t - 1])

    def _check(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise InputError(f"timestep {t} outside [1, {self.T}]")


def linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    if T < 1:
        raise InputError(f"T must be positive, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise InputError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, T, dtype=np.float64))


def respaced(sched: NoiseSchedule, timesteps) -> NoiseSchedule:
    """Schedule whose k-th step jumps between consecutive entries of ``timesteps``.

    ``timesteps`` is ascending and 1-based; the respaced alpha_bar equals the
    original alpha_bar at each listed timestep.
    """
    abar = np.array([sched.alpha_bar_at(int(t)) for t in timesteps])
    prev = np.concatenate([[1.0], abar[:-1]])
    return NoiseSchedule.from_betas(1.0 - abar / prev)


def sampling_plan(T: int, steps: int) -> list[int]:
    """Descending timesteps ``[t_1, ..., t_steps, 0]`` spaced uniformly over [0, T]."""
    if not 1 <= steps <= T:
        raise InputError(f"steps must lie in [1, {T}], got {steps}")
    plan = np.rint(np.linspace(T, 0, steps + 1)).astype(int)
    return [int(t) for t in plan]


def forward_diffuse(z0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    z0, eps = as_tensor(z0), as_tensor(eps)
    if z0.shape != eps.shape:
        raise InputError(f"noise dims {eps.shape} != sample dims {z0.shape}")
    sched._check(t)
    abar = sched.alpha_bar_at(t)
    return as_tensor(np.sqrt(abar) * z0.astype(np.float64) + np.sqrt(1.0 - abar) * eps.astype(np.float64))


def ddpm_mean(z_t: np.ndarray, eps_hat: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    sched._check(t)
    a = float(sched.alpha[t - 1])
    abar = float(sched.alpha_bar[t - 1])
    coef = (1.0 - a) / np.sqrt(1.0 - abar) if abar < 1.0 else 0.0
    return as_tensor(DTYPE(1.0 / np.sqrt(a)) * (as_tensor(z_t) - DTYPE(coef) * as_tensor(eps_hat)))


def ddpm_step(
    z_t: np.ndarray, eps_hat: np.ndarray, t: int, sched: NoiseSchedule, noise: np.ndarray | None
) -> np.ndarray:
    """Ancestral step ``z_{t-1} = mu + sigma_t * noise``; noise is ignored at t = 1."""
    mu = ddpm_mean(z_t, eps_hat, t, sched)
    if t == 1 or noise is None:
        return mu
    return as_tensor(mu + DTYPE(sched.sigma[t - 1]) * as_tensor(noise))


def _x0_f64(z_t, eps_hat, t: int, sched: NoiseSchedule) -> np.ndarray:
    abar = sched.alpha_bar_at(t)
    z = as_tensor(z_t).astype(np.float64)
    return (z - np.sqrt(1.0 - abar) * as_tensor(eps_hat).astype(np.float64)) / np.sqrt(abar)


def predict_x0(z_t: np.ndarray, eps_hat: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    return as_tensor(_x0_f64(z_t, eps_hat, t, sched))


def ddim_step(
    z_t: np.ndarray, eps_hat: np.ndarray, t: int, t_prev: int, sched: NoiseSchedule
) -> np.ndarray:
    """Deterministic (eta = 0) DDIM update from ``t`` to ``t_prev``."""
    if not 0 <= t_prev < t:
        raise InputError(f"need 0 <= t_prev < t, got t={t}, t_prev={t_prev}")
    x0 = _x0_f64(z_t, eps_hat, t, sched)
    abar_prev = sched.alpha_bar_at(t_prev)
    if abar_prev == 1.0:
        return as_tensor(x0)
    return as_tensor(np.sqrt(abar_prev) * x0 + np.sqrt(1.0 - abar_prev) * as_tensor(eps_hat).astype(np.float64))
