"""Two-stage training: outpainting pre-training on single frames, then joint video-depth."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import CoverageReport, load_checkpoint, restore_parameters, save_checkpoint
from .config import TrainConfig, config_to_dict, dump_config
from .haop import haop_sample
from .losses import LossWeights, denoise_loss, motion_block_losses, total_loss, xattn_block_losses
from .model import ConditionBundle, DenoiserTaps, Modality, build_model
from .scenes import SceneDataset
from .schedule import NoiseSchedule, forward_diffuse, make_linear_schedule

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class Batch:
    """Images in [0, 1]; ``depth_rgb`` is None for the outpainting stage."""

    video: torch.Tensor              # [B, L, 3, H, W]
    fg: torch.Tensor                 # [B, 3, H, W]
    bg: torch.Tensor                 # [B, 3, H, W]
    pose: Optional[torch.Tensor] = None   # [B, L, K_p, H, W]
    depth_rgb: Optional[torch.Tensor] = None

    def to(self, dtype) -> "Batch":
        def cv(x):
            return None if x is None else x.to(dtype)
        return Batch(cv(self.video), cv(self.fg), cv(self.bg), cv(self.pose), cv(self.depth_rgb))

    def condition(self) -> ConditionBundle:
        return ConditionBundle(self.fg, encode_image(self.bg), self.pose)


@dataclass
class LossBreakdown:
    denoise: float
    mo: list
    xattn: list
    total: float
    step: int = 0

    def to_record(self) -> dict:
        return {"step": self.step, "denoise": self.denoise, "mo": self.mo, "xattn": self.xattn, "total": self.total}


def encode_image(x: torch.Tensor) -> torch.Tensor:
    """[0, 1] image -> [-1, 1] latent."""
    return x * 2.0 - 1.0


def decode_latent(z: torch.Tensor) -> torch.Tensor:
    return ((z + 1.0) / 2.0).clamp(0.0, 1.0)


def scene_batch(samples, dtype=torch.float32) -> Batch:
    def st(key):
        return torch.from_numpy(np.stack([getattr(s, key) for s in samples])).to(dtype)
    return Batch(video=st("video"), fg=st("fg_image"), bg=st("bg_image"), pose=st("pose_heatmaps"),
                 depth_rgb=st("depth_rgb"))


def haop_batch(samples, frames, rng: np.random.Generator, params, dtype=torch.float32) -> Batch:
    targets, fgs, bgs = [], [], []
    for s, l in zip(samples, frames):
        hs = haop_sample(s.video[l], s.fg_mask[l], rng, params)
        targets.append(hs.target[None])
        fgs.append(hs.f_aug)
        bgs.append(hs.b_aug)
    return Batch(video=torch.from_numpy(np.stack(targets)).to(dtype), fg=torch.from_numpy(np.stack(fgs)).to(dtype),
                 bg=torch.from_numpy(np.stack(bgs)).to(dtype))


class BatchSampler:
    """Deterministic batch assembly from a dataset's training split."""

    def __init__(self, dataset: SceneDataset, cfg: TrainConfig):
        self.dataset = dataset
        self.cfg = cfg
        self.rng = np.random.default_rng([cfg.seed, 11])

    def next(self) -> Batch:
        train = self.dataset.train
        idx = self.rng.integers(len(train), size=self.cfg.batch_size)
        picked = [train[i] for i in idx]
        if self.cfg.stage == "haop":
            frames = self.rng.integers(self.dataset.L, size=self.cfg.batch_size)
            return haop_batch(picked, frames, self.rng, self.cfg.haop)
        return scene_batch(picked)


def _tap_stats(taps: Optional[DenoiserTaps]) -> str:
    if taps is None:
        return "no taps"
    parts = []
    for n, f in enumerate(taps.features):
        f = f.detach()
        parts.append(f"block{n}: min={f.min().item():.3g} max={f.max().item():.3g} "
                     f"mean={f.mean().item():.3g} finite={bool(torch.isfinite(f).all())}")
    return "; ".join(parts)


def compute_losses(model: nn.Module, batch: Batch, cfg: TrainConfig, sched: NoiseSchedule,
                   gen: torch.Generator):
    """Sample (t, noise) and evaluate the stage objective. Returns (total tensor, breakdown)."""
    dtype = next(model.parameters()).dtype
    batch = batch.to(dtype)
    B = batch.video.shape[0]
    t = torch.randint(0, sched.T, (B,), generator=gen)
    cond = batch.condition()

    if cfg.stage == "haop":
        z0 = encode_image(batch.video)
        eps = torch.randn(z0.shape, generator=gen, dtype=dtype)
        eps_hat, _ = model.single_forward(forward_diffuse(z0, t, eps, sched), t, Modality.VIDEO, cond)
        den = denoise_loss(eps_hat, eps, eps_hat, eps, depth_weight=0.0)
        return den, LossBreakdown(den.item(), [], [], den.item())

    z_v, z_d = encode_image(batch.video), encode_image(batch.depth_rgb)
    eps_v = torch.randn(z_v.shape, generator=gen, dtype=dtype)
    eps_d = torch.randn(z_d.shape, generator=gen, dtype=dtype)
    ab = cfg.ablations
    ev, ed, tv, td = model.joint_forward(
        forward_diffuse(z_v, t, eps_v, sched), forward_diffuse(z_d, t, eps_d, sched), t, cond,
        capture_taps=True, xattn_mode=ab.xattn_share_mode,
    )
    den = denoise_loss(ev, eps_v, ed, eps_d)
    mo, xa = consistency_terms(tv, td, cfg)
    total = total_loss(den, mo, xa, effective_weights(cfg))
    if not torch.isfinite(total):
        raise NonFiniteLossError(f"non-finite loss (denoise={den.item()}); video taps: {_tap_stats(tv)}; "
                                 f"depth taps: {_tap_stats(td)}")
    return total, LossBreakdown(den.item(), [m.item() for m in mo], [x.item() for x in xa], total.item())


def effective_weights(cfg: TrainConfig) -> LossWeights:
    w = cfg.weights
    return LossWeights(0.0 if cfg.ablations.disable_mo else w.w_mo, 0.0 if cfg.ablations.disable_xattn else w.w_xattn)


def consistency_terms(taps_v, taps_d, cfg: TrainConfig):
    """Per-up-block losses; terms with zero effective weight are computed without a graph."""
    w = effective_weights(cfg)
    with torch.set_grad_enabled(torch.is_grad_enabled() and w.w_mo > 0):
        mo = motion_block_losses(taps_v, taps_d)
    with torch.set_grad_enabled(torch.is_grad_enabled() and w.w_xattn > 0):
        xa = xattn_block_losses(taps_v, taps_d, cfg.head_average)
    return mo, xa


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.Optimizer:
    params = [p for p in params if p.requires_grad]
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.lr)
    return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum)


def train_step(model: nn.Module, batch: Batch, optimizer: torch.optim.Optimizer, cfg: TrainConfig,
               sched: NoiseSchedule, gen: torch.Generator) -> LossBreakdown:
    optimizer.zero_grad(set_to_none=True)
    total, breakdown = compute_losses(model, batch, cfg, sched, gen)
    if not math.isfinite(breakdown.total):
        raise NonFiniteLossError(f"non-finite loss {breakdown.total}")
    total.backward()
    optimizer.step()
    return breakdown


def freeze_resblocks(model: nn.Module) -> int:
    """Stop gradients into spatial ResBlock weights (temporal convolutions stay trainable)."""
    frozen = 0
    for name, p in model.named_parameters():
        if ("_res" in name or "mid_res" in name) and "temporal_conv" not in name:
            p.requires_grad_(False)
            frozen += 1
    return frozen


def make_schedule(cfg: TrainConfig) -> NoiseSchedule:
    return make_linear_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)


def build_for_config(cfg: TrainConfig) -> nn.Module:
    return build_model(cfg.model_config(), seed=cfg.seed, separate=cfg.ablations.separate_unets)


@dataclass
class TrainResult:
    model: nn.Module
    losses: list = field(default_factory=list)
    coverage: Optional[CoverageReport] = None
    checkpoint: Optional[Path] = None


def train(cfg: TrainConfig, dataset: SceneDataset, out_dir: Optional[Path] = None,
          resume: Optional[Path] = None, model: Optional[nn.Module] = None) -> TrainResult:
    """Run ``cfg.steps`` optimizer steps, logging one JSON line per step to ``out_dir/metrics.jsonl``."""
    torch.set_num_threads(max(1, torch.get_num_threads()))
    sched = make_schedule(cfg)
    model = model if model is not None else build_for_config(cfg)
    coverage = None
    if resume is not None:
        tensors, _ = load_checkpoint(resume)
        coverage = restore_parameters(model, tensors)
        log.info("resumed from %s: restored %d, initialized %d", resume, len(coverage.restored),
                 len(coverage.initialized))
    if cfg.freeze_resblocks:
        freeze_resblocks(model)
    model.train()
    optimizer = make_optimizer(model.parameters(), cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    sampler = BatchSampler(dataset, cfg)

    log_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.ini").write_text(dump_config(cfg))
        log_file = open(out_dir / "metrics.jsonl", "w")
        if coverage is not None:
            (out_dir / "resume_coverage.json").write_text(json.dumps(coverage.to_dict(), indent=1))
    result = TrainResult(model, coverage=coverage)
    t0 = time.perf_counter()
    try:
        for step in range(1, cfg.steps + 1):
            bd = train_step(model, sampler.next(), optimizer, cfg, sched, gen)
            bd.step = step
            result.losses.append(bd)
            if log_file is not None and (step % cfg.log_every == 0 or step == cfg.steps):
                rec = bd.to_record()
                rec["wall_time"] = time.perf_counter() - t0
                log_file.write(json.dumps(rec) + "\n")
                log_file.flush()
            if out_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(model, config_to_dict(cfg), step, out_dir / f"step_{step:06d}.ckpt", sched)
    finally:
        if log_file is not None:
            log_file.close()
    if out_dir is not None:
        result.checkpoint = out_dir / "final.ckpt"
        save_checkpoint(model, config_to_dict(cfg), cfg.steps, result.checkpoint, sched)
    return result
