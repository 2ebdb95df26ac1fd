"""Lockstep ancestral sampling of the coupled video and depth latents.

Random draws come from four streams derived from one seed: initial noise and
per-step noise for each modality. Sampling one modality alone therefore
consumes exactly the draws that modality would see in a joint run.

By default each step uses the noise estimate implied by the clean-latent
prediction clamped to the data range. Without it, small noise errors at the
start of a long schedule are amplified by roughly 1/sqrt(alpha_bar[T-1]).
"""

from __future__ import annotations

import contextlib
from typing import Optional

import numpy as np
import torch

from .model import ConditionBundle, Modality, eval_mode
from .schedule import NoiseSchedule, clip_eps, ddpm_step


class SamplingError(FloatingPointError):
    pass


def stream_generator(seed: int, modality: Modality, kind: str) -> torch.Generator:
    """Independent generator for (modality, 'init' | 'step') derived from ``seed``."""
    key = {"init": 0, "step": 1}[kind]
    state = np.random.SeedSequence([int(seed), int(modality), key]).generate_state(2, dtype=np.uint32)
    return torch.Generator().manual_seed(int(state[0]) << 32 | int(state[1]))


def latent_shape(model, cond: ConditionBundle, frames: Optional[int] = None) -> tuple:
    cfg = model.cfg
    b = cond.fg_image.shape[0]
    l = frames or (cond.pose.shape[1] if cond.pose is not None else cfg.frames)
    return (b, l, cfg.latent_channels, cfg.latent_size, cfg.latent_size)


def decode(z: torch.Tensor) -> torch.Tensor:
    """[-1, 1] latent -> [0, 1] image, clamped."""
    return ((z + 1.0) / 2.0).clamp(0.0, 1.0)


def _dtype(model) -> torch.dtype:
    return next(model.parameters()).dtype if hasattr(model, "parameters") else torch.float32


def _check_finite(z: torch.Tensor, t: int, what: str) -> None:
    if not torch.isfinite(z).all():
        raise SamplingError(f"non-finite {what} latent at step t={t}")


@torch.no_grad()
def sample_joint(model, cond: ConditionBundle, sched: NoiseSchedule, seed: int = 0, couple: bool = True,
                 xattn_mode: str = "independent", return_latents: bool = False, clip_x0: bool = True):
    """Returns (video, depth_rgb), each [B, L, 3, H, W] in [0, 1]."""
    dtype = _dtype(model)
    cond = cond.to(dtype=dtype)
    shape = latent_shape(model, cond)
    gv, gd = stream_generator(seed, Modality.VIDEO, "step"), stream_generator(seed, Modality.DEPTH, "step")
    z_v = torch.randn(shape, generator=stream_generator(seed, Modality.VIDEO, "init"), dtype=dtype)
    z_d = torch.randn(shape, generator=stream_generator(seed, Modality.DEPTH, "init"), dtype=dtype)
    ctx = eval_mode(model) if isinstance(model, torch.nn.Module) else contextlib.nullcontext()
    with ctx:
        for t in range(sched.T - 1, -1, -1):
            ev, ed, _, _ = model.joint_forward(z_v, z_d, t, cond, couple=couple, xattn_mode=xattn_mode)
            if clip_x0:
                ev, ed = clip_eps(z_v, ev, t, sched), clip_eps(z_d, ed, t, sched)
            nv = torch.randn(shape, generator=gv, dtype=dtype)
            nd = torch.randn(shape, generator=gd, dtype=dtype)
            z_v = ddpm_step(z_v, ev, t, sched, nv)
            z_d = ddpm_step(z_d, ed, t, sched, nd)
            _check_finite(z_v, t, "video")
            _check_finite(z_d, t, "depth")
    if return_latents:
        return z_v, z_d
    return decode(z_v), decode(z_d)


@torch.no_grad()
def sample_single(model, cond: ConditionBundle, modality: Modality, sched: NoiseSchedule, seed: int = 0,
                  return_latents: bool = False, clip_x0: bool = True):
    """One-stream sampling; returns [B, L, 3, H, W] in [0, 1]."""
    modality = Modality(int(modality))
    dtype = _dtype(model)
    cond = cond.to(dtype=dtype)
    shape = latent_shape(model, cond)
    g = stream_generator(seed, modality, "step")
    z = torch.randn(shape, generator=stream_generator(seed, modality, "init"), dtype=dtype)
    ctx = eval_mode(model) if isinstance(model, torch.nn.Module) else contextlib.nullcontext()
    with ctx:
        for t in range(sched.T - 1, -1, -1):
            eps, _ = model.single_forward(z, t, modality, cond)
            if clip_x0:
                eps = clip_eps(z, eps, t, sched)
            z = ddpm_step(z, eps, t, sched, torch.randn(shape, generator=g, dtype=dtype))
            _check_finite(z, t, modality.name.lower())
    return z if return_latents else decode(z)

