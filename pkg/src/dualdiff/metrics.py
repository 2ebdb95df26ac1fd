"""Evaluation metrics: depth error, video/depth silhouette agreement and motion divergence."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .losses import motion_block_losses
from .model import ConditionBundle, Modality, eval_mode
from .schedule import NoiseSchedule, forward_diffuse

log = logging.getLogger(__name__)

VIDEO_COLOR_DISTANCE = 0.3


def minmax_scale(x: np.ndarray) -> tuple:
    """Scale a whole sequence to [0, 1]. Returns (scaled, degenerate); constant input is returned unchanged."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi - lo <= 0:
        return x.copy(), True
    return (x - lo) / (hi - lo), False


@dataclass
class DepthL2Result:
    value: float
    per_sample: list = field(default_factory=list)
    flagged: list = field(default_factory=list)   # indices with a constant map


def depth_l2_sequence(pred: np.ndarray, gt: np.ndarray) -> tuple:
    """RMS difference after independent per-sequence min-max scaling. Returns (rms, flagged)."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    p, fp = minmax_scale(pred)
    g, fg = minmax_scale(gt)
    return float(np.sqrt(np.mean((p - g) ** 2))), fp or fg


def depth_l2(preds, gts) -> DepthL2Result:
    """Mean of per-sequence RMS depth errors over an eval set.

    Accepts a single [L, 1, H, W] pair or sequences of them.
    """
    if isinstance(preds, np.ndarray) and preds.ndim == 4:
        preds, gts = [preds], [gts]
    if len(preds) != len(gts) or not preds:
        raise ValueError("need equally many (>= 1) predicted and ground-truth sequences")
    res = DepthL2Result(0.0)
    for i, (p, g) in enumerate(zip(preds, gts)):
        v, flagged = depth_l2_sequence(p, g)
        res.per_sample.append(v)
        if flagged:
            res.flagged.append(i)
            log.warning("depth_l2: sample %d has a constant depth map; scaling skipped", i)
    res.value = float(np.mean(res.per_sample))
    return res


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def video_foreground(video: np.ndarray, color, max_distance: float = VIDEO_COLOR_DISTANCE) -> np.ndarray:
    """[L, 3, H, W] -> [L, H, W] pixels within ``max_distance`` (Euclidean RGB) of the sprite color."""
    c = np.asarray(color, dtype=np.float64).reshape(1, 3, 1, 1)
    return np.sqrt(((np.asarray(video, np.float64) - c) ** 2).sum(axis=1)) < max_distance


def depth_foreground(depth: np.ndarray, threshold: float) -> np.ndarray:
    """[L, 1, H, W] scalar depth -> [L, H, W]; the sprite is the nearer (larger) value."""
    return np.asarray(depth)[:, 0] > threshold


def depth_threshold(sprite_depth: float, bg_depth: np.ndarray) -> float:
    """Midpoint between the sprite level and the nearest background level."""
    return 0.5 * (float(sprite_depth) + float(np.max(bg_depth)))


def silhouette_iou(video: np.ndarray, depth: np.ndarray, sprite_color, fg_threshold: float,
                   max_distance: float = VIDEO_COLOR_DISTANCE) -> float:
    """Per-frame IoU of the video and depth foreground masks, averaged over frames."""
    mv = video_foreground(video, sprite_color, max_distance)
    md = depth_foreground(depth, fg_threshold)
    if mv.shape != md.shape:
        raise ValueError(f"frame shapes differ: {mv.shape} vs {md.shape}")
    return float(np.mean([mask_iou(a, b) for a, b in zip(mv, md)]))


@torch.no_grad()
def motion_divergence(model, video: torch.Tensor, depth_rgb: torch.Tensor, cond: ConditionBundle,
                      sched: NoiseSchedule, t: Optional[int] = None, seed: int = 0) -> float:
    """Mean per-block motion consistency between a video and a depth rendering.

    Both [B, L, 3, H, W] images in [0, 1] are noised to step ``t`` (default T // 2)
    with the same noise and passed through the denoiser under the same label
    without cross-stream coupling, so identical inputs score exactly 0.
    """
    if video.shape != depth_rgb.shape:
        raise ValueError(f"shape mismatch: {tuple(video.shape)} vs {tuple(depth_rgb.shape)}")
    t = sched.T // 2 if t is None else int(t)
    dtype = next(model.parameters()).dtype
    z_v = video.to(dtype) * 2 - 1
    z_d = depth_rgb.to(dtype) * 2 - 1
    eps = torch.randn(z_v.shape, generator=torch.Generator().manual_seed(seed), dtype=dtype)
    zs = [forward_diffuse(z_v, t, eps, sched), forward_diffuse(z_d, t, eps, sched)]
    with eval_mode(model):
        _, taps = model.forward_streams(zs, t, [Modality.VIDEO, Modality.VIDEO], cond.to(dtype=dtype),
                                        capture_taps=True, couple=False)
    losses = motion_block_losses(taps[0], taps[1])
    return float(torch.stack(losses).mean())


def write_report(metrics: dict, per_sample: list, out_dir: Path, config: Optional[dict] = None) -> dict:
    """Write report.json (metric -> value plus per-sample rows) and summary.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"metrics": metrics, "per_sample": per_sample}
    if config is not None:
        doc["config"] = config
    (out_dir / "report.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["metric", "value"])
    for k in sorted(metrics):
        w.writerow([k, metrics[k]])
    (out_dir / "summary.csv").write_text(buf.getvalue())
    return doc
