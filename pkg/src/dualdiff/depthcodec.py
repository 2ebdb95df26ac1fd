"""Depth <-> RGB colormap codec.

Depth is scaled to [0, 1] with larger values nearer to the camera. The "hot"
map is the exact piecewise-linear ramp r = clamp(3d), g = clamp(3d - 1),
b = clamp(3d - 2), so encoding is reproducible without any plotting library.
"""

from __future__ import annotations

import logging
from functools import lru_cache

import numpy as np

log = logging.getLogger(__name__)

COLORMAPS = ("grayscale", "hot")
LOOKUP_SAMPLES = 1024


class ClampCounter:
    """Counts depth values clamped into [0, 1] during encoding."""

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


clamp_counter = ClampCounter()


def _check_colormap(colormap: str) -> None:
    if colormap not in COLORMAPS:
        raise ValueError(f"unknown colormap {colormap!r}; expected one of {COLORMAPS}")


def hot_curve(d: np.ndarray) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    return np.stack([np.clip(3 * d, 0, 1), np.clip(3 * d - 1, 0, 1), np.clip(3 * d - 2, 0, 1)], axis=0)


def depth_to_rgb(depth: np.ndarray, colormap: str = "hot") -> np.ndarray:
    """[..., 1, H, W] depth in [0, 1] -> [..., 3, H, W] RGB."""
    _check_colormap(colormap)
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape[-3] != 1:
        raise ValueError(f"expected a single depth channel, got shape {depth.shape}")
    out_of_range = int(np.count_nonzero((depth < 0) | (depth > 1)))
    if out_of_range:
        clamp_counter.count += out_of_range
        log.warning("clamped %d depth values into [0, 1]", out_of_range)
    d = np.clip(depth[..., 0, :, :], 0.0, 1.0)
    if colormap == "grayscale":
        rgb = np.stack([d, d, d], axis=-3)
    else:
        rgb = np.moveaxis(hot_curve(d), 0, -3)
    return rgb.astype(np.float32)


@lru_cache(maxsize=None)
def _hot_table():
    grid = np.linspace(0.0, 1.0, LOOKUP_SAMPLES)
    return grid, hot_curve(grid).T  # [N], [N, 3]


def rgb_to_depth(rgb: np.ndarray, colormap: str = "hot") -> np.ndarray:
    """[..., 3, H, W] RGB -> [..., 1, H, W] depth.

    Off-manifold colors project onto the nearest sample of the colormap curve.
    """
    _check_colormap(colormap)
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.shape[-3] != 3:
        raise ValueError(f"expected 3 channels, got shape {rgb.shape}")
    if colormap == "grayscale":
        return rgb.mean(axis=-3, keepdims=True).astype(np.float32)
    grid, table = _hot_table()
    pix = np.moveaxis(rgb, -3, -1).reshape(-1, 3)
    sq = (table * table).sum(axis=1)[None, :]
    idx = np.empty(len(pix), dtype=np.int64)
    for start in range(0, len(pix), 8192):
        chunk = pix[start:start + 8192]
        # |p - c|^2 = |p|^2 - 2 p.c + |c|^2; the |p|^2 term does not affect the argmin.
        idx[start:start + 8192] = np.argmin(sq - 2.0 * chunk @ table.T, axis=1)
    depth = grid[idx].reshape(*rgb.shape[:-3], rgb.shape[-2], rgb.shape[-1])
    return depth[..., None, :, :].astype(np.float32)
