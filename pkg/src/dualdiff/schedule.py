"""Forward noising, its algebraic inverse, and the ancestral reverse step.

Timesteps are 0-based: ``t`` ranges over ``[0, T)`` and sampling starts at
``T - 1``. Coefficients are kept in float64 numpy arrays and applied to
torch tensors of any floating dtype.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_start: float
    beta_end: float

    @property
    def T(self) -> int:
        return len(self.beta)

    def to_manifest(self) -> dict:
        return {"kind": "linear", "T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}

    @classmethod
    def from_manifest(cls, d: dict) -> "NoiseSchedule":
        if d.get("kind", "linear") != "linear":
            raise ScheduleError(f"unknown schedule kind {d['kind']!r}")
        return make_linear_schedule(int(d["T"]), float(d["beta_start"]), float(d["beta_end"]))

    def posterior_std(self, t: int) -> float:
        """Standard deviation of the "small" posterior variance; zero at t = 0."""
        if t == 0:
            return 0.0
        var = self.beta[t] * (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t])
        return math.sqrt(var)


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start:
        raise ScheduleError(f"beta_start must be > 0, got {beta_start}")
    if not beta_start <= beta_end:
        raise ScheduleError(f"beta_end must be >= beta_start, got beta_end={beta_end}")
    if not beta_end < 1.0:
        raise ScheduleError(f"beta_end must be < 1, got {beta_end}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64) if T > 1 else np.array([beta_start])
    alpha = 1.0 - beta
    alpha_bar = np.empty_like(alpha)
    running = 1.0
    for i, a in enumerate(alpha):
        running = running * a
        alpha_bar[i] = running
    for arr in (beta, alpha, alpha_bar):
        arr.setflags(write=False)
    return NoiseSchedule(beta, alpha, alpha_bar, float(beta_start), float(beta_end))


def _check(a: torch.Tensor, b: torch.Tensor, t, sched: NoiseSchedule) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if isinstance(t, torch.Tensor):
        if t.numel() and (int(t.min()) < 0 or int(t.max()) >= sched.T):
            raise IndexError(f"timestep out of range [0, {sched.T})")
    elif not 0 <= t < sched.T:
        raise IndexError(f"timestep {t} out of range [0, {sched.T})")


def _coef(values: np.ndarray, t, like: torch.Tensor):
    """Scalar coefficient for an int t, or a [B, 1, ...] tensor for per-example t."""
    if isinstance(t, torch.Tensor):
        c = torch.as_tensor(values, dtype=like.dtype)[t.long()]
        return c.view(-1, *([1] * (like.dim() - 1)))
    return float(values[t])


def forward_diffuse(z0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """z_t = sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps."""
    _check(z0, eps, t, sched)
    a = _coef(np.sqrt(sched.alpha_bar), t, z0)
    s = _coef(np.sqrt(1.0 - sched.alpha_bar), t, z0)
    return a * z0 + s * eps


def predict_z0(z_t: torch.Tensor, eps_hat: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    _check(z_t, eps_hat, t, sched)
    a = _coef(np.sqrt(sched.alpha_bar), t, z_t)
    s = _coef(np.sqrt(1.0 - sched.alpha_bar), t, z_t)
    return (z_t - s * eps_hat) / a


def clip_eps(z_t: torch.Tensor, eps_hat: torch.Tensor, t: int, sched: NoiseSchedule,
             bound: float = 1.0) -> torch.Tensor:
    """Noise estimate consistent with the clean-latent prediction clamped to [-bound, bound].

    Feeding it to ``ddpm_step`` gives the posterior mean of the clamped prediction.
    """
    _check(z_t, eps_hat, t, sched)
    ab = float(sched.alpha_bar[t])
    z0 = predict_z0(z_t, eps_hat, t, sched).clamp(-bound, bound)
    return (z_t - math.sqrt(ab) * z0) / math.sqrt(1.0 - ab)


def ddpm_step(z_t: torch.Tensor, eps_hat: torch.Tensor, t: int, sched: NoiseSchedule,
              noise: torch.Tensor) -> torch.Tensor:
    """One ancestral step z_t -> z_{t-1}; at t = 0 the noise term vanishes."""
    _check(z_t, eps_hat, t, sched)
    if noise.shape != z_t.shape:
        raise ValueError(f"shape mismatch: noise {tuple(noise.shape)} vs {tuple(z_t.shape)}")
    beta = float(sched.beta[t])
    mean = (z_t - (beta / math.sqrt(1.0 - sched.alpha_bar[t])) * eps_hat) / math.sqrt(sched.alpha[t])
    sigma = sched.posterior_std(t)
    if sigma == 0.0:
        return mean
    return mean + sigma * noise
