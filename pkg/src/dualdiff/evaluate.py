"""Sample every eval scene from a checkpoint and score the generated pairs."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .checkpoint import load_checkpoint, restore_parameters
from .config import TrainConfig, config_from_dict
from .depthcodec import rgb_to_depth
from .metrics import depth_l2, depth_threshold, motion_divergence, silhouette_iou
from .model import DenoiserConfig, build_model
from .sampler import sample_joint
from .scenes import background_depth
from .schedule import NoiseSchedule
from .train import scene_batch

log = logging.getLogger(__name__)

METRICS = ("depth_l2", "iou", "motion_div")


@dataclass
class LoadedModel:
    model: torch.nn.Module
    config: TrainConfig
    schedule: NoiseSchedule
    step: int


def model_from_checkpoint(path: Path) -> LoadedModel:
    tensors, manifest = load_checkpoint(path)
    cfg = config_from_dict(manifest["config"])
    mcfg = DenoiserConfig.from_dict(manifest["model"])
    model = build_model(mcfg, seed=cfg.seed, separate=cfg.ablations.separate_unets)
    cov = restore_parameters(model, tensors)
    if cov.initialized or cov.unexpected:
        raise ValueError(f"checkpoint does not match its recorded model: missing {cov.initialized[:3]}, "
                         f"unexpected {cov.unexpected[:3]}")
    sched = NoiseSchedule.from_manifest(manifest["schedule"])
    model.eval()
    return LoadedModel(model, cfg, sched, int(manifest["step"]))


def sample_eval_set(model, sched: NoiseSchedule, scenes: Sequence, seed: int = 0, couple: bool = True) -> list:
    """Joint samples [(video, depth_rgb)], each [1, L, 3, H, W]; scene i uses seed ``seed + i``."""
    out = []
    for i, scene in enumerate(scenes):
        cond = scene_batch([scene]).condition()
        out.append(sample_joint(model, cond, sched, seed=seed + i, couple=couple))
    return out


def score_samples(model, sched: NoiseSchedule, scenes: Sequence, samples: Sequence, metrics: Sequence[str] = METRICS,
                  seed: int = 0, t: Optional[int] = None) -> tuple:
    """Returns (metric -> mean value, per-sample rows). ``model`` is only used for motion divergence."""
    unknown = set(metrics) - set(METRICS)
    if unknown:
        raise ValueError(f"unknown metrics {sorted(unknown)}; choose from {METRICS}")
    if len(samples) != len(scenes):
        raise ValueError(f"{len(samples)} samples for {len(scenes)} scenes")
    rows, preds, gts = [], [], []
    for i, (scene, (video, depth_rgb)) in enumerate(zip(scenes, samples)):
        v = video[0].numpy()
        d = rgb_to_depth(depth_rgb[0].numpy(), scene.colormap)
        row = {"scene": i}
        if "depth_l2" in metrics:
            preds.append(d)
            gts.append(scene.depth)
        if "iou" in metrics:
            H, W = scene.video.shape[-2:]
            thr = depth_threshold(scene.spec.sprite_depth, background_depth(scene.spec, H, W))
            row["iou"] = silhouette_iou(v, d, scene.spec.sprite_color, thr)
        if "motion_div" in metrics:
            cond = scene_batch([scene]).condition()
            row["motion_div"] = motion_divergence(model, video, depth_rgb, cond, sched, t=t, seed=seed + i)
        rows.append(row)
    out = {}
    if "depth_l2" in metrics:
        res = depth_l2(preds, gts)
        out["depth_l2"] = res.value
        for row, v in zip(rows, res.per_sample):
            row["depth_l2"] = v
        for i in res.flagged:
            rows[i]["depth_l2_flagged"] = True
    for key in ("iou", "motion_div"):
        if key in metrics:
            out[key] = float(np.mean([r[key] for r in rows]))
    return out, rows


def evaluate(model, sched: NoiseSchedule, scenes: Sequence, metrics: Sequence[str] = METRICS, seed: int = 0,
             t: Optional[int] = None, couple: bool = True) -> tuple:
    """Sample every scene, then score. Returns (metric -> mean value, per-sample rows)."""
    unknown = set(metrics) - set(METRICS)
    if unknown:
        raise ValueError(f"unknown metrics {sorted(unknown)}; choose from {METRICS}")
    samples = sample_eval_set(model, sched, scenes, seed=seed, couple=couple)
    return score_samples(model, sched, scenes, samples, metrics, seed=seed, t=t)
