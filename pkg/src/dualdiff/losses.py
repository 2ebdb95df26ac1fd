"""Training objective: joint denoising plus motion-field and cross-attention consistency.

Feature maps from the denoiser are channel-first ``[..., L, D, H, W]``; the
cost-volume helpers work channel-last on ``[..., H, W, D]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch

XATTN_SHARE_MODES = ("independent", "share_avg", "share_video")


@dataclass(frozen=True)
class LossWeights:
    w_mo: float = 0.01
    w_xattn: float = 0.01

    def __post_init__(self):
        if self.w_mo < 0 or self.w_xattn < 0:
            raise ValueError("loss weights must be non-negative")


def normalize_features(F: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Scale every vector along the last axis to unit L2 norm; zero vectors stay zero."""
    norm = torch.sqrt((F * F).sum(dim=-1, keepdim=True).clamp_min(eps * eps))
    return F / norm


def cost_volume(F_l: torch.Tensor, F_l1: torch.Tensor) -> torch.Tensor:
    """All-pairs dot products of two normalized maps: [..., H, W, D] x2 -> [..., H, W, H, W]."""
    if F_l.shape != F_l1.shape:
        raise ValueError(f"feature shapes differ: {tuple(F_l.shape)} vs {tuple(F_l1.shape)}")
    return torch.einsum("...ijd,...hkd->...ijhk", F_l, F_l1)


def motion_field(C: torch.Tensor, tau: float) -> torch.Tensor:
    """Temperature softmax over the target locations (last two axes) of a cost volume."""
    if not tau > 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    shape = C.shape
    logits = C.reshape(*shape[:-2], -1) / tau
    logits = logits - logits.amax(dim=-1, keepdim=True).detach()
    e = torch.exp(logits)
    return (e / e.sum(dim=-1, keepdim=True)).reshape(shape)


def _motion_fields(feats: torch.Tensor, tau: float) -> torch.Tensor:
    f = normalize_features(feats.movedim(-3, -1))  # [..., L, H, W, D]
    return motion_field(cost_volume(f[..., :-1, :, :, :], f[..., 1:, :, :, :]), tau)


def motion_consistency_loss(feats_v: torch.Tensor, feats_d: torch.Tensor, tau: float) -> torch.Tensor:
    """Mean squared difference between video and depth motion fields over all consecutive frame pairs.

    Normalized by the true element count (L-1)*H*W*H*W (times any leading batch size).
    """
    if feats_v.shape != feats_d.shape:
        raise ValueError(f"feature shapes differ: {tuple(feats_v.shape)} vs {tuple(feats_d.shape)}")
    if feats_v.dim() < 4 or feats_v.shape[-4] < 2:
        raise ValueError("motion consistency needs at least two frames")
    u_v = _motion_fields(feats_v, tau)
    u_d = _motion_fields(feats_d, tau)
    return ((u_v - u_d) ** 2).mean()


def default_temperature(channels: int) -> float:
    return 1.0 / math.sqrt(channels)


def xattn_consistency_loss(M_v: torch.Tensor, M_d: torch.Tensor, head_average: bool = False) -> torch.Tensor:
    """Elementwise mean squared difference of cross-attention maps.

    Maps are [..., heads, S, K]; ``head_average`` compares the head-mean maps instead.
    """
    if M_v.shape != M_d.shape:
        raise ValueError(f"map shapes differ: {tuple(M_v.shape)} vs {tuple(M_d.shape)}")
    if head_average:
        M_v, M_d = M_v.mean(dim=-3), M_d.mean(dim=-3)
    return ((M_v - M_d) ** 2).mean()


def denoise_loss(eps_v_hat, eps_v, eps_d_hat, eps_d, depth_weight: float = 1.0) -> torch.Tensor:
    for a, b in ((eps_v_hat, eps_v), (eps_d_hat, eps_d)):
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    video = ((eps_v_hat - eps_v) ** 2).mean()
    depth = ((eps_d_hat - eps_d) ** 2).mean()
    return video + depth_weight * depth


def total_loss(denoise, per_block_mo: Sequence, per_block_xattn: Sequence, w: LossWeights):
    if len(per_block_mo) != len(per_block_xattn):
        raise ValueError(f"block count mismatch: {len(per_block_mo)} vs {len(per_block_xattn)}")
    total = denoise
    for mo, xa in zip(per_block_mo, per_block_xattn):
        total = total + (w.w_mo * mo + w.w_xattn * xa)
    return total


def shared_xattn_variant(M_v: torch.Tensor, M_d: torch.Tensor, mode: str):
    """Replace both streams' cross-attention maps according to the sharing ablation."""
    if M_v.shape != M_d.shape:
        raise ValueError(f"map shapes differ: {tuple(M_v.shape)} vs {tuple(M_d.shape)}")
    if mode == "independent":
        return M_v, M_d
    if mode == "share_avg":
        avg = (M_v + M_d) / 2
        return avg, avg
    if mode == "share_video":
        return M_v, M_v
    raise ValueError(f"unknown cross-attention share mode {mode!r}")


def motion_block_losses(taps_v, taps_d, tau: float | None = None) -> list:
    """Motion consistency per up block; temperature defaults to 1/sqrt(D_n)."""
    out = []
    for f_v, f_d in zip(taps_v.features, taps_d.features):
        t = tau if tau is not None else default_temperature(f_v.shape[-3])
        out.append(motion_consistency_loss(f_v, f_d, t))
    return out


def xattn_block_losses(taps_v, taps_d, head_average: bool = False) -> list:
    return [xattn_consistency_loss(m_v, m_d, head_average) for m_v, m_d in zip(taps_v.xattn_maps, taps_d.xattn_maps)]


def block_losses(taps_v, taps_d, head_average: bool = False, tau: float | None = None):
    """Per-up-block (motion, cross-attention) consistency losses from two streams' taps."""
    return motion_block_losses(taps_v, taps_d, tau), xattn_block_losses(taps_v, taps_d, head_average)
