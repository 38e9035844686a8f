"""
Linear noise schedule and the closed-form forward (noising) process.

Timesteps are 1-indexed at every interface: t in {1..T}. Where ᾱ_0 is needed
(the last DDIM step) it is defined as 1.
"""
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor

from tabdiff.errors import ScheduleError, ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta_start: float
    beta_end: float
    kind: str = "linear"
    betas: np.ndarray = field(repr=False, compare=False, default=None)
    alphas: np.ndarray = field(repr=False, compare=False, default=None)
    alpha_bars: np.ndarray = field(repr=False, compare=False, default=None)

    def params(self) -> dict:
        return dict(T=self.T, beta_start=self.beta_start, beta_end=self.beta_end, kind=self.kind)

    def check_t(self, t: int):
        if not 1 <= int(t) <= self.T:
            raise ScheduleError(f"timestep {t} outside 1..{self.T}")

    def alpha_bar(self, t: int) -> float:
        if int(t) == 0:
            return 1.0
        self.check_t(t)
        return float(self.alpha_bars[int(t) - 1])


def build_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02, kind: str = "linear") -> NoiseSchedule:
    if kind != "linear":
        raise ScheduleError(f"unsupported schedule kind {kind!r}")
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    # float64 tables; β_t = beta_start + (t-1)/(T-1)·(beta_end - beta_start)
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64) if T > 1 else np.array([beta_start])
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for a in (betas, alphas, alpha_bars):
        a.setflags(write=False)
    return NoiseSchedule(T, float(beta_start), float(beta_end), kind, betas, alphas, alpha_bars)


def marginal_coeffs(alpha_bar: float) -> tuple[float, float]:
    return float(np.sqrt(alpha_bar)), float(np.sqrt(1.0 - alpha_bar))


def marginal_stats(t: int, schedule: NoiseSchedule) -> tuple[float, float]:
    """(√ᾱ_t, √(1-ᾱ_t)): mean coefficient and std of q(z_t | z_0)."""
    schedule.check_t(t)
    return marginal_coeffs(schedule.alpha_bar(t))


def per_sample_coeff(t, schedule: NoiseSchedule, like: Tensor, fn) -> Tensor | float:
    """Scalar coefficient for an int t, else a (B, 1, ...) tensor for per-sample t."""
    if isinstance(t, (int, np.integer)):
        schedule.check_t(t)
        return float(fn(schedule.alpha_bars[int(t) - 1]))
    ts = np.asarray(t.cpu() if isinstance(t, Tensor) else t, dtype=np.int64)
    if ts.ndim != 1 or like.dim() == 0 or len(ts) != like.shape[0]:
        raise ShapeError("q_sample", like.shape, ts.shape, detail="one timestep per batch element")
    for s in ts:
        schedule.check_t(s)
    c = torch.as_tensor(fn(schedule.alpha_bars[ts - 1]), dtype=like.dtype)
    return c.reshape((len(ts),) + (1,) * (like.dim() - 1))


def q_sample(z0: Tensor, t, eps: Tensor, schedule: NoiseSchedule) -> Tensor:
    """
    z_t = √ᾱ_t · z0 + √(1-ᾱ_t) · ε.

    `t` is an int for a single latent, or a length-B sequence of ints for a
    batch (B, ...) with a per-sample timestep.
    """
    if eps.shape != z0.shape:
        raise ShapeError("q_sample", z0.shape, eps.shape)
    return per_sample_coeff(t, schedule, z0, np.sqrt) * z0 + per_sample_coeff(t, schedule, z0, lambda a: np.sqrt(1.0 - a)) * eps


def q_step(z_prev: Tensor, t: int, eps: Tensor, schedule: NoiseSchedule) -> Tensor:
    """One step of the Markov chain: z_t = √(1-β_t) · z_{t-1} + √β_t · ε."""
    schedule.check_t(t)
    if eps.shape != z_prev.shape:
        raise ShapeError("q_step", z_prev.shape, eps.shape)
    beta = float(schedule.betas[t - 1])
    return float(np.sqrt(1.0 - beta)) * z_prev + float(np.sqrt(beta)) * eps
