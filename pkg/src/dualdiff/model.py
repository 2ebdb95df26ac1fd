"""Parameter-shared dual-modal denoiser.

A small U-Net that denoises video latents and rendered-depth latents with one
set of weights. A learned modality embedding added to the timestep embedding
tells the network which stream it is denoising. Each block ends with a
cross-modal attention layer that attends jointly over the video and depth
tokens of the same frame; with a single stream it reduces to self-attention.

Streams are processed as a list of tensors and only meet inside cross-modal
attention (and cross-attention map sharing), so a decoupled joint pass runs
exactly the same kernels as two single-stream passes.

Layout conventions: latents are ``[B, L, C, H, W]``; internally frames are
flattened to ``[B*L, C, H, W]``.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .losses import shared_xattn_variant


class Modality(IntEnum):
    VIDEO = 0
    DEPTH = 1


@dataclass(frozen=True)
class DenoiserConfig:
    frames: int = 8
    latent_size: int = 32
    latent_channels: int = 3
    base_channels: int = 32
    channel_mults: tuple = (1, 2, 4)
    heads: int = 4
    cond_dim: int = 64
    fg_tokens: int = 4
    pose_keypoints: int = 3
    # Stem stride; 1 keeps the U-Net at full latent resolution. Above 1 a small
    # full-resolution head refines the upsampled prediction.
    patch_size: int = 1
    refine_channels: int = 16
    temporal: bool = True
    cross_modal: bool = True
    modality_embedding: bool = True
    max_timesteps: int = 200

    def __post_init__(self):
        object.__setattr__(self, "channel_mults", tuple(int(m) for m in self.channel_mults))
        self.validate()

    @property
    def num_up_blocks(self) -> int:
        return len(self.channel_mults)

    @property
    def widths(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_mults]

    def block_resolution(self, level: int) -> int:
        return self.latent_size // (self.patch_size * 2 ** level)

    def validate(self) -> None:
        if not self.channel_mults:
            raise ValueError("channel_mults must be non-empty")
        factor = self.patch_size * 2 ** (len(self.channel_mults) - 1)
        if self.latent_size % factor:
            raise ValueError(f"latent_size {self.latent_size} not divisible by {factor}")
        for w in self.widths:
            if w % self.heads:
                raise ValueError(f"channel width {w} not divisible by heads={self.heads}")
        if self.cond_dim % 2:
            raise ValueError("cond_dim must be even")
        side = math.isqrt(self.fg_tokens)
        if side * side != self.fg_tokens:
            raise ValueError("fg_tokens must be a perfect square")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["channel_mults"] = list(self.channel_mults)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class ConditionBundle:
    """Per-example conditions shared by both streams.

    fg_image: [B, 3, H, W] foreground image, encoded to tokens inside the model.
    bg_latent: [B, C, H, W] background latent added to every frame of the input.
    pose: [B, L, K_p, H, W] keypoint heatmaps, or None to bypass the pose adapter.
    """

    fg_image: torch.Tensor
    bg_latent: torch.Tensor
    pose: Optional[torch.Tensor] = None

    def to(self, dtype=None, device=None) -> "ConditionBundle":
        pose = None if self.pose is None else self.pose.to(device=device, dtype=dtype)
        return ConditionBundle(self.fg_image.to(device=device, dtype=dtype),
                               self.bg_latent.to(device=device, dtype=dtype), pose)


@dataclass
class DenoiserTaps:
    """Up-block features for the consistency losses, ordered from the deepest up block.

    features[n]: [B, L, D_n, H_n, W_n] spatial self-attention output.
    xattn_maps[n]: [B, L, heads, H_n*W_n, K_f] foreground cross-attention weights.
    """

    features: list = field(default_factory=list)
    xattn_maps: list = field(default_factory=list)


def zero_module(m: nn.Module) -> nn.Module:
    for p in m.parameters():
        nn.init.zeros_(p)
    m._zero_init = True
    return m


def group_norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(ch, 8), ch)


def sinusoidal_embedding(t: torch.Tensor, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Interleaved sinusoidal features: position 2i holds sin, 2i+1 holds cos."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.stack([torch.sin(args), torch.cos(args)], dim=-1).reshape(t.shape[0], 2 * half)
    return emb.to(dtype)


def attention(q, k, v, heads: int):
    """Multi-head scaled dot-product attention returning (output, probabilities)."""
    n, sq, d = q.shape
    sk = k.shape[1]
    dh = d // heads
    q = q.reshape(n, sq, heads, dh).transpose(1, 2)
    k = k.reshape(n, sk, heads, dh).transpose(1, 2)
    v = v.reshape(n, sk, heads, dh).transpose(1, 2)
    probs = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
    out = (probs @ v).transpose(1, 2).reshape(n, sq, d)
    return out, probs


class SelfAttention(nn.Module):
    """Pre-norm multi-head self-attention with a residual connection."""

    def __init__(self, dim: int, heads: int, zero_out: bool = False):
        super().__init__()
        self.heads = heads
        self.norm = nn.LayerNorm(dim)
        self.to_qkv = nn.Linear(dim, 3 * dim, bias=False)
        self.to_out = nn.Linear(dim, dim)
        if zero_out:
            zero_module(self.to_out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        q, k, v = self.to_qkv(self.norm(x)).chunk(3, dim=-1)
        out, _ = attention(q, k, v, self.heads)
        return x + self.to_out(out)


class CrossAttention(nn.Module):
    """Queries from spatial tokens, keys/values from foreground tokens."""

    def __init__(self, dim: int, ctx_dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.LayerNorm(dim)
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_kv = nn.Linear(ctx_dim, 2 * dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def probs(self, x, ctx):
        n, s, d = x.shape
        dh = d // self.heads
        q = self.to_q(self.norm(x)).reshape(n, s, self.heads, dh).transpose(1, 2)
        k, v = self.to_kv(ctx).chunk(2, dim=-1)
        k = k.reshape(n, -1, self.heads, dh).transpose(1, 2)
        v = v.reshape(n, -1, self.heads, dh).transpose(1, 2)
        return torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1), v

    def apply(self, x, probs, v):
        n, s, d = x.shape
        out = (probs @ v).transpose(1, 2).reshape(n, s, d)
        return x + self.to_out(out)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, temporal: bool):
        super().__init__()
        self.norm1 = group_norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, out_ch)
        self.norm2 = group_norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        # Per-pixel convolution along the frame axis.
        self.temporal_conv = zero_module(nn.Conv3d(out_ch, out_ch, (3, 1, 1), padding=(1, 0, 0))) if temporal else None

    def forward(self, x, emb, frames: int):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        out = self.skip(x) + h
        if self.temporal_conv is not None:
            n, c, hh, ww = out.shape
            seq = out.reshape(n // frames, frames, c, hh, ww).transpose(1, 2)
            out = out + self.temporal_conv(seq).transpose(1, 2).reshape(n, c, hh, ww)
        return out


class AttnStack(nn.Module):
    """Spatial self-attention, foreground cross-attention, temporal attention, cross-modal attention."""

    def __init__(self, dim: int, ctx_dim: int, heads: int, temporal: bool, cross_modal: bool):
        super().__init__()
        self.heads = heads
        self.self_attn = SelfAttention(dim, heads)
        self.cross_attn = CrossAttention(dim, ctx_dim, heads)
        self.temporal_attn = SelfAttention(dim, heads, zero_out=True) if temporal else None
        self.cross_modal_attn = SelfAttention(dim, heads, zero_out=True) if cross_modal else None

    def forward(self, xs, ctx, frames, couple=True, xattn_mode="independent", taps=None):
        n, c, h, w = xs[0].shape
        toks = [x.flatten(2).transpose(1, 2) for x in xs]
        toks = [self.self_attn(t) for t in toks]
        if taps is not None:
            taps.append(("feat", [t.transpose(1, 2).reshape(n // frames, frames, c, h, w) for t in toks]))

        pv = [self.cross_attn.probs(t, ctx) for t in toks]
        probs = [p for p, _ in pv]
        if len(probs) == 2 and xattn_mode != "independent":
            probs = list(shared_xattn_variant(probs[0], probs[1], xattn_mode))
        toks = [self.cross_attn.apply(t, p, v) for t, p, (_, v) in zip(toks, probs, pv)]
        if taps is not None:
            taps.append(("xattn", [p.reshape(n // frames, frames, *p.shape[1:]) for p in probs]))

        if self.temporal_attn is not None:
            s = h * w
            out = []
            for t in toks:
                seq = t.reshape(n // frames, frames, s, c).transpose(1, 2).reshape(-1, frames, c)
                seq = self.temporal_attn(seq)
                out.append(seq.reshape(n // frames, s, frames, c).transpose(1, 2).reshape(n, s, c))
            toks = out

        if self.cross_modal_attn is not None:
            if couple and len(toks) > 1:
                s = toks[0].shape[1]
                joint = self.cross_modal_attn(torch.cat(toks, dim=1))
                toks = list(joint.split(s, dim=1))
            else:
                toks = [self.cross_modal_attn(t) for t in toks]

        return [t.transpose(1, 2).reshape(n, c, h, w) for t in toks]


class Downsample(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class ForegroundEncoder(nn.Module):
    """Small convolutional encoder producing K_f tokens of width E from the foreground image."""

    def __init__(self, width: int, out_dim: int, tokens: int):
        super().__init__()
        side = math.isqrt(tokens)
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width, width, 3, stride=2, padding=1), nn.SiLU(),
            nn.AdaptiveAvgPool2d(side),
        )
        self.proj = nn.Linear(width, out_dim)

    def forward(self, fg):
        return self.proj(self.net(fg).flatten(2).transpose(1, 2))


class PoseAdapter(nn.Module):
    """Trainable side branch on the pose heatmaps.

    Mirrors the down path resolutions and emits one residual per up block
    through zero-initialized 1x1 projections, so a fresh adapter contributes
    nothing until trained.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        widths = cfg.widths
        p = cfg.patch_size
        self.hint = nn.Sequential(
            nn.Conv2d(cfg.pose_keypoints, widths[0], p, stride=p) if p > 1
            else nn.Conv2d(cfg.pose_keypoints, widths[0], 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(widths[0], widths[0], 3, padding=1),
        )
        self.blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        self.outs = nn.ModuleList()
        prev = widths[0]
        for i, w in enumerate(widths):
            self.blocks.append(ResBlock(prev, w, cfg.cond_dim, temporal=False))
            self.outs.append(zero_module(nn.Conv2d(w, w, 1)))
            self.downs.append(Downsample(w) if i < len(widths) - 1 else nn.Identity())
            prev = w

    def forward(self, pose, emb):
        """pose: [B*L, K_p, H, W]; emb: [B*L, E]. Returns residuals in up-block order."""
        h = self.hint(pose)
        per_level = []
        for block, out, down in zip(self.blocks, self.outs, self.downs):
            h = block(h, emb, frames=1)
            per_level.append(out(h))
            h = down(h)
        return per_level[::-1]


class DualDenoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        E = cfg.cond_dim
        widths = cfg.widths
        p = cfg.patch_size

        self.time_mlp = nn.Sequential(nn.Linear(E, E), nn.SiLU(), nn.Linear(E, E))
        if cfg.modality_embedding:
            self.modality_table = nn.Parameter(torch.empty(2, E).uniform_(-1.0, 1.0))
        else:
            self.register_parameter("modality_table", None)
        self.fg_encoder = ForegroundEncoder(widths[0], E, cfg.fg_tokens)
        self.pose_adapter = PoseAdapter(cfg)

        if p > 1:
            self.conv_in = nn.Conv2d(cfg.latent_channels, widths[0], p, stride=p)
        else:
            self.conv_in = nn.Conv2d(cfg.latent_channels, widths[0], 3, padding=1)

        self.down_res = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        prev = widths[0]
        for i, w in enumerate(widths):
            self.down_res.append(ResBlock(prev, w, E, cfg.temporal))
            self.down_attn.append(AttnStack(w, E, cfg.heads, cfg.temporal, cfg.cross_modal))
            self.downsamples.append(Downsample(w) if i < len(widths) - 1 else nn.Identity())
            prev = w

        self.mid_res1 = ResBlock(prev, prev, E, cfg.temporal)
        self.mid_attn = AttnStack(prev, E, cfg.heads, cfg.temporal, cfg.cross_modal)
        self.mid_res2 = ResBlock(prev, prev, E, cfg.temporal)

        self.up_res = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i in reversed(range(len(widths))):
            w = widths[i]
            self.up_res.append(ResBlock(prev + w, w, E, cfg.temporal))
            self.up_attn.append(AttnStack(w, E, cfg.heads, cfg.temporal, cfg.cross_modal))
            self.upsamples.append(Upsample(w) if i > 0 else nn.Identity())
            prev = w

        self.norm_out = group_norm(widths[0])
        if p > 1:
            self.conv_out = nn.ConvTranspose2d(widths[0], cfg.latent_channels, p, stride=p)
            r = cfg.refine_channels
            self.refine_in = nn.Conv2d(cfg.latent_channels, r, 3, padding=1)
            self.refine_res = ResBlock(r + cfg.latent_channels, r, E, temporal=False)
            self.refine_out = zero_module(nn.Conv2d(r, cfg.latent_channels, 3, padding=1))
        else:
            self.conv_out = nn.Conv2d(widths[0], cfg.latent_channels, 3, padding=1)
            self.refine_in = self.refine_res = self.refine_out = None

    # -- conditioning -----------------------------------------------------

    def embed_timestep_modality(self, t, y) -> torch.Tensor:
        """Sinusoidal timestep features projected to E, plus the modality row."""
        t = self._as_timesteps(t, 1)
        emb = self.time_mlp(sinusoidal_embedding(t, self.cfg.cond_dim, self._dtype()))
        return self._add_modality(emb, y)

    def _add_modality(self, emb, y):
        if self.modality_table is None or y is None:
            return emb
        idx = torch.as_tensor(int(y) if not isinstance(y, torch.Tensor) else y, dtype=torch.long)
        row = self.modality_table[idx]
        return emb + (row if row.dim() == 2 else row[None, :])

    def _as_timesteps(self, t, batch: int) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long)
        if t.dim() == 0:
            t = t.expand(batch)
        if int(t.min()) < 0 or int(t.max()) >= self.cfg.max_timesteps:
            raise IndexError(f"timestep out of range [0, {self.cfg.max_timesteps})")
        return t

    def _dtype(self):
        return self.conv_in.weight.dtype

    def encode_foreground(self, fg_image: torch.Tensor) -> torch.Tensor:
        return self.fg_encoder(fg_image)

    def pose_adapter_forward(self, pose: torch.Tensor, emb: torch.Tensor) -> list:
        """pose: [B, L, K_p, H, W]; emb: [B, E]. Returns [B*L, D_n, H_n, W_n] per up block."""
        b, l, k, h, w = pose.shape
        cfg = self.cfg
        if k != cfg.pose_keypoints or h != cfg.latent_size or w != cfg.latent_size:
            raise ValueError(f"pose heatmaps shape {tuple(pose.shape)} does not match config")
        return self.pose_adapter(pose.reshape(b * l, k, h, w), emb.repeat_interleave(l, 0))

    # -- forward ----------------------------------------------------------

    def forward_streams(self, zs: Sequence[torch.Tensor], t, labels: Sequence, cond: ConditionBundle,
                        capture_taps: bool = False, couple: bool = True, xattn_mode: str = "independent"):
        """Denoise one or two coupled streams. Returns (list of eps_hat, list of taps or None)."""
        cfg = self.cfg
        shape = zs[0].shape
        for z in zs:
            if z.shape != shape:
                raise ValueError(f"stream shapes differ: {tuple(z.shape)} vs {tuple(shape)}")
        if len(shape) != 5 or shape[2] != cfg.latent_channels or shape[3] != cfg.latent_size or shape[4] != cfg.latent_size:
            raise ValueError(f"latent shape {tuple(shape)} does not match config")
        b, frames = shape[0], shape[1]
        if cond.bg_latent.shape != (b, *shape[2:]):
            raise ValueError(f"background latent shape {tuple(cond.bg_latent.shape)} does not match latent frames")
        if cond.pose is not None and cond.pose.shape[:2] != (b, frames):
            raise ValueError(f"pose shape {tuple(cond.pose.shape)} does not match latents")

        t = self._as_timesteps(t, b)
        base = self.time_mlp(sinusoidal_embedding(t, cfg.cond_dim, self._dtype()))
        ctx = self.encode_foreground(cond.fg_image).repeat_interleave(frames, 0)

        embs, residuals = [], []
        for y in labels:
            emb = self._add_modality(base, y)
            embs.append(emb.repeat_interleave(frames, 0))
            residuals.append(self.pose_adapter_forward(cond.pose, emb) if cond.pose is not None else None)

        n = b * frames
        zin = [add_background_latent(z, cond.bg_latent).reshape(n, *shape[2:]) for z in zs]
        hs = [self.conv_in(x) for x in zin]

        skips = []
        for res, att, down in zip(self.down_res, self.down_attn, self.downsamples):
            hs = [res(h, e, frames) for h, e in zip(hs, embs)]
            hs = att(hs, ctx, frames, couple, xattn_mode)
            skips.append(hs)
            hs = [down(h) for h in hs]

        hs = [self.mid_res1(h, e, frames) for h, e in zip(hs, embs)]
        hs = self.mid_attn(hs, ctx, frames, couple, xattn_mode)
        hs = [self.mid_res2(h, e, frames) for h, e in zip(hs, embs)]

        raw_taps = [] if capture_taps else None
        for i, (res, att, up) in enumerate(zip(self.up_res, self.up_attn, self.upsamples)):
            skip = skips.pop()
            hs = [res(torch.cat([h, s], dim=1), e, frames) for h, s, e in zip(hs, skip, embs)]
            hs = [h if r is None else h + r[i] for h, r in zip(hs, residuals)]
            hs = att(hs, ctx, frames, couple, xattn_mode, taps=raw_taps)
            hs = [up(h) for h in hs]

        outs = [self.conv_out(F.silu(self.norm_out(h))) for h in hs]
        if self.refine_out is not None:
            outs = [o + self._refine(x, o, e) for x, o, e in zip(zin, outs, embs)]
        outs = [o.reshape(shape) for o in outs]
        if not capture_taps:
            return outs, None
        taps = [DenoiserTaps() for _ in zs]
        for kind, per_stream in raw_taps:
            for tp, value in zip(taps, per_stream):
                (tp.features if kind == "feat" else tp.xattn_maps).append(value)
        return outs, taps

    def _refine(self, x, coarse, emb):
        h = self.refine_res(torch.cat([self.refine_in(x), coarse], dim=1), emb, 1)
        return self.refine_out(F.silu(h))

    def single_forward(self, z, t, y, cond, capture_taps: bool = False):
        outs, taps = self.forward_streams([z], t, [y], cond, capture_taps)
        return outs[0], (taps[0] if taps else None)

    def joint_forward(self, z_v, z_d, t, cond, capture_taps: bool = False, couple: bool = True,
                      xattn_mode: str = "independent"):
        outs, taps = self.forward_streams([z_v, z_d], t, [Modality.VIDEO, Modality.DEPTH], cond,
                                          capture_taps, couple, xattn_mode)
        tv, td = taps if taps else (None, None)
        return outs[0], outs[1], tv, td

    forward = joint_forward


class SeparateDenoisers(nn.Module):
    """Ablation: one independent single-modality denoiser per stream."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        sub = replace(cfg, modality_embedding=False)
        self.cfg = sub
        self.video = DualDenoiser(sub)
        self.depth = DualDenoiser(sub)

    def _net(self, y) -> DualDenoiser:
        return self.video if Modality(int(y)) == Modality.VIDEO else self.depth

    def _refine(self, x, coarse, emb):
        h = self.refine_res(torch.cat([self.refine_in(x), coarse], dim=1), emb, 1)
        return self.refine_out(F.silu(h))

    def single_forward(self, z, t, y, cond, capture_taps: bool = False):
        return self._net(y).single_forward(z, t, None, cond, capture_taps)

    def joint_forward(self, z_v, z_d, t, cond, capture_taps: bool = False, couple: bool = True,
                      xattn_mode: str = "independent"):
        ev, tv = self.video.single_forward(z_v, t, None, cond, capture_taps)
        ed, td = self.depth.single_forward(z_d, t, None, cond, capture_taps)
        return ev, ed, tv, td

    def forward_streams(self, zs, t, labels, cond, capture_taps=False, couple=True, xattn_mode="independent"):
        results = [self._net(y).single_forward(z, t, None, cond, capture_taps) for z, y in zip(zs, labels)]
        outs = [r[0] for r in results]
        return outs, ([r[1] for r in results] if capture_taps else None)

    forward = joint_forward


def add_background_latent(z_in: torch.Tensor, bg: torch.Tensor) -> torch.Tensor:
    """Broadcast-add a background latent to every frame.

    ``z_in`` is [L, C, H, W] with ``bg`` [C, H, W], or batched [B, L, C, H, W]
    with ``bg`` [B, C, H, W].
    """
    if z_in.dim() == 4:
        if bg.shape != z_in.shape[1:]:
            raise ValueError(f"background shape {tuple(bg.shape)} does not match frame shape {tuple(z_in.shape[1:])}")
        return z_in + bg[None]
    if bg.shape != (z_in.shape[0], *z_in.shape[2:]):
        raise ValueError(f"background shape {tuple(bg.shape)} does not match frame shape {tuple(z_in.shape[2:])}")
    return z_in + bg[:, None]


def cross_modal_attention(layer: SelfAttention, tokens_v: torch.Tensor, tokens_d: Optional[torch.Tensor] = None):
    """Joint self-attention over the concatenated video and depth tokens of one frame.

    Tokens are [S, D] or batched [N, S, D]. With ``tokens_d`` omitted this is
    plain self-attention over ``tokens_v``.
    """
    squeeze = tokens_v.dim() == 2
    tv = tokens_v[None] if squeeze else tokens_v
    if tokens_d is None:
        out = layer(tv)
        return (out[0] if squeeze else out), None
    td = tokens_d[None] if squeeze else tokens_d
    if tv.shape != td.shape:
        raise ValueError(f"token shapes differ: {tuple(tv.shape)} vs {tuple(td.shape)}")
    out = layer(torch.cat([tv, td], dim=1))
    ov, od = out.split(tv.shape[1], dim=1)
    return (ov[0], od[0]) if squeeze else (ov, od)


def build_model(cfg: DenoiserConfig, seed: int = 0, separate: bool = False) -> nn.Module:
    """Construct a denoiser with a deterministic initialization."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return SeparateDenoisers(cfg) if separate else DualDenoiser(cfg)


def parameter_inventory(model: nn.Module) -> dict:
    return {name: p.numel() for name, p in model.named_parameters()}


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def zero_init_names(model: nn.Module) -> set:
    names = set()
    for mname, mod in model.named_modules():
        if getattr(mod, "_zero_init", False):
            for pname, _ in mod.named_parameters():
                names.add(f"{mname}.{pname}" if mname else pname)
    return names


def is_temporal_or_cross_modal(name: str) -> bool:
    return any(key in name for key in ("temporal_conv", "temporal_attn", "cross_modal_attn"))


@contextlib.contextmanager
def eval_mode(model: nn.Module):
    was = model.training
    model.eval()
    try:
        yield model
    finally:
        model.train(was)
