"""Outpainting pre-training augmentation.

The background condition has a dilated foreground region removed so the
model must fill in background around the subject, and the foreground
condition is a random crop of the masked subject resized back to full frame.
The reconstruction target is the untouched frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage


@dataclass(frozen=True)
class HaopParams:
    dilation_radius: int = 2
    crop_scale_range: tuple = (0.6, 1.0)

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if self.dilation_radius < 0:
            raise ValueError("dilation_radius must be >= 0")
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"crop_scale_range must satisfy 0 < low <= high <= 1, got {self.crop_scale_range}")


@dataclass
class HaopSample:
    f_aug: np.ndarray
    b_aug: np.ndarray
    target: np.ndarray
    removed: np.ndarray
    fell_back: bool


def dilate_background(fg_mask: np.ndarray, radius: int) -> np.ndarray:
    """Region removed from the background: fg_mask dilated by a (2r+1)^2 square."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    mask = np.asarray(fg_mask) > 0
    if radius == 0:
        return mask.astype(np.uint8)
    structure = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    return ndimage.binary_dilation(mask, structure=structure).astype(np.uint8)


def resize_bilinear(img: np.ndarray, H: int, W: int) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32))[None]
    return F.interpolate(t, size=(H, W), mode="bilinear", align_corners=False)[0].numpy()


def crop_resize_foreground(f: np.ndarray, fg_mask: np.ndarray, rng: np.random.Generator,
                           params: HaopParams) -> tuple:
    """Random square crop touching the foreground, resized back to [C, H, W].

    Returns (image, fell_back); fell_back is True when the mask is empty and a
    center crop was used instead.
    """
    _, H, W = f.shape
    lo, hi = params.crop_scale_range
    scale = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    side = max(1, min(min(H, W), int(round(scale * min(H, W)))))
    mask = np.asarray(fg_mask) > 0
    if not mask.any():
        top, left = (H - side) // 2, (W - side) // 2
        fell_back = True
    else:
        # Window sums via an integral image; keep positions whose window hits the mask.
        ii = np.pad(mask.astype(np.int64).cumsum(0).cumsum(1), ((1, 0), (1, 0)))
        sums = ii[side:, side:] - ii[:-side, side:] - ii[side:, :-side] + ii[:-side, :-side]
        ys, xs = np.nonzero(sums > 0)
        k = int(rng.integers(len(ys)))
        top, left = int(ys[k]), int(xs[k])
        fell_back = False
    crop = f[:, top:top + side, left:left + side]
    if side == H and side == W:
        return crop.astype(np.float32).copy(), fell_back
    return resize_bilinear(crop, H, W), fell_back


def haop_sample(frame: np.ndarray, fg_mask: np.ndarray, rng: np.random.Generator,
                params: HaopParams = HaopParams()) -> HaopSample:
    """Build (f_aug, b_aug, target) for one frame [3, H, W] and its mask [H, W]."""
    mask = (np.asarray(fg_mask) > 0).astype(np.float32)
    foreground = frame * mask[None]
    f_aug, fell_back = crop_resize_foreground(foreground, mask, rng, params)
    removed = dilate_background(mask, params.dilation_radius)
    b_aug = frame * (1 - removed[None]).astype(frame.dtype)
    return HaopSample(f_aug=f_aug.astype(np.float32), b_aug=b_aug, target=frame, removed=removed,
                      fell_back=fell_back)
