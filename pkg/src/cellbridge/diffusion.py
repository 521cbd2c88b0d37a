"""Noise schedule, forward noising and the deterministic DDIM bridge.

The sampler predicts clean data (x0) rather than noise, so each reverse or
inversion step first recovers the implied noise algebraically:

    eps_hat = (x_t - sqrt(abar_t) * x0_hat) / sqrt(1 - abar_t)
    x_s     = sqrt(abar_s) * x0_hat + sqrt(1 - abar_s - eta^2) * eps_hat
              + eta * eps_random

With eta = 0 the step is fully deterministic and invertible on a fixed
substep grid, which is what makes the encode/decode pair a usable bridge
between the unperturbed and perturbed denoisers: encode runs the grid
upward under source conditioning, decode runs it back down under target
conditioning, and the shared Gaussian endpoint links the two without any
explicit sample pairing.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

DenoiserFn = Callable[[np.ndarray, int], np.ndarray]


@dataclass
class DiffusionSchedule:
    """abar[t] for t = 0..T with abar[0] = 1 and a strict decrease to near 0."""

    T: int
    alpha_bar: np.ndarray

    def __post_init__(self):
        self.alpha_bar = np.asarray(self.alpha_bar, dtype=np.float64)
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.alpha_bar.shape != (self.T + 1,):
            raise ValueError("alpha_bar must have length T + 1")
        if self.alpha_bar[0] != 1.0:
            raise ValueError("alpha_bar[0] must be 1")
        if np.any(np.diff(self.alpha_bar) >= 0) or self.alpha_bar[-1] <= 0:
            raise ValueError("alpha_bar must decrease strictly and stay positive")


@dataclass
class SamplerConfig:
    num_steps: int = 50
    eta: float = 0.0

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    """Linear betas from beta_start to beta_end; abar is the running product."""
    if T < 1:
        raise ValueError("T must be >= 1")
    betas = np.linspace(beta_start, beta_end, T)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return DiffusionSchedule(T=T, alpha_bar=alpha_bar)


def forward_noise(x0: np.ndarray, t: int, eps: np.ndarray, sched: DiffusionSchedule) -> np.ndarray:
    """sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps."""
    if not 0 <= t <= sched.T:
        raise ValueError(f"t={t} outside [0, {sched.T}]")
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ValueError("eps shape must match x0")
    ab = sched.alpha_bar[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def ddim_step(
    x_t: np.ndarray,
    x0_hat: np.ndarray,
    t: int,
    s: int,
    sched: DiffusionSchedule,
    eta: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Move the state from step t to step s (either direction) given x0_hat."""
    if not 1 <= t <= sched.T:
        raise ValueError(f"source step t={t} outside [1, {sched.T}] (t=0 implies no noise to invert)")
    if not 0 <= s <= sched.T:
        raise ValueError(f"target step s={s} outside [0, {sched.T}]")
    if eta < 0:
        raise ValueError("eta must be >= 0")
    ab_t = sched.alpha_bar[t]
    ab_s = sched.alpha_bar[s]
    resid = 1.0 - ab_s - eta * eta
    if resid < 0:
        raise ValueError("eta too large for target step")
    x_t = np.asarray(x_t, dtype=np.float64)
    x0_hat = np.asarray(x0_hat, dtype=np.float64)
    eps_hat = (x_t - np.sqrt(ab_t) * x0_hat) / np.sqrt(1.0 - ab_t)
    x_s = np.sqrt(ab_s) * x0_hat + np.sqrt(resid) * eps_hat
    if eta > 0:
        if rng is None:
            raise ValueError("eta > 0 requires an rng")
        x_s = x_s + eta * rng.standard_normal(x_s.shape)
    return x_s


def substep_grid(T: int, num_steps: int) -> np.ndarray:
    """num_steps + 1 evenly spaced integer steps covering [0, T] inclusive."""
    if num_steps > T:
        raise ValueError("num_steps cannot exceed T")
    grid = np.round(np.linspace(0.0, T, num_steps + 1)).astype(int)
    if np.any(np.diff(grid) <= 0):
        raise ValueError("substep grid is not strictly increasing")
    return grid


def ode_encode(model: DenoiserFn, x: np.ndarray, cfg: SamplerConfig, sched: DiffusionSchedule) -> np.ndarray:
    """Deterministically invert clean data to the shared-prior latent.

    The clean state enters the grid at its first positive substep (a step
    sourced at t=0 carries no noise to invert) and is pushed upward to T,
    querying the denoiser at each source substep.
    """
    if cfg.eta != 0.0:
        raise ValueError("encode requires eta = 0")
    grid = substep_grid(sched.T, cfg.num_steps)
    state = np.asarray(x, dtype=np.float64)
    for k in range(1, cfg.num_steps):
        t = int(grid[k])
        x0_hat = model(state, t)
        state = ddim_step(state, x0_hat, t, int(grid[k + 1]), sched, eta=0.0)
    return state


def ode_decode(model: DenoiserFn, x_l: np.ndarray, cfg: SamplerConfig, sched: DiffusionSchedule) -> np.ndarray:
    """Deterministically run the latent back down the same grid to t=0."""
    if cfg.eta != 0.0:
        raise ValueError("decode requires eta = 0")
    grid = substep_grid(sched.T, cfg.num_steps)
    state = np.asarray(x_l, dtype=np.float64)
    for k in range(cfg.num_steps, 0, -1):
        t = int(grid[k])
        x0_hat = model(state, t)
        state = ddim_step(state, x0_hat, t, int(grid[k - 1]), sched, eta=0.0)
    return state
