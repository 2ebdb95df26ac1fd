"""Procedural video-depth scenes: one sprite moving over a gradient background.

Every quantity is analytic: the foreground mask is the rasterized sprite,
depth is the sprite depth under the mask and a vertical ramp elsewhere, and
pose heatmaps are normalized Gaussian bumps at three keypoints (center,
leading edge, trailing edge along the direction of motion).

Coordinates are in pixels with pixel centers at (j + 0.5, i + 0.5).
"""

from __future__ import annotations

import colorsys
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .depthcodec import depth_to_rgb, rgb_to_depth

SHAPES = ("circle", "square", "capsule")
HUE_BINS = 6
POSE_SIGMA = 1.5
NUM_KEYPOINTS = 3
MIN_DEPTH_GAP = 0.1


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    sprite_shape: str
    sprite_color: tuple
    # Fraction of the frame height; half-extent of the sprite's bounding box.
    sprite_radius: float
    # Start and per-frame velocity in fractions of (width, height).
    start: tuple
    velocity: tuple
    sway_amplitude: float = 0.0
    sway_cycles: float = 0.0
    sprite_depth: float = 0.8
    bg_gradient: tuple = (0.2, 0.4)
    seed: int = 0

    def color_bin(self) -> int:
        h, _, _ = colorsys.rgb_to_hsv(*self.sprite_color)
        return int(h * HUE_BINS) % HUE_BINS

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


@dataclass
class SceneSample:
    spec: SceneSpec
    video: np.ndarray        # [L, 3, H, W] in [0, 1]
    depth: np.ndarray        # [L, 1, H, W] in [0, 1]
    depth_rgb: np.ndarray    # [L, 3, H, W]
    pose_heatmaps: np.ndarray  # [L, K_p, H, W]
    fg_mask: np.ndarray      # [L, H, W] in {0, 1}
    fg_image: np.ndarray     # [3, H, W]
    bg_image: np.ndarray     # [3, H, W]
    centers: np.ndarray      # [L, 2] sprite centers (x, y) in pixels
    colormap: str = "hot"


def sprite_centers(spec: SceneSpec, L: int, H: int, W: int) -> np.ndarray:
    l = np.arange(L, dtype=np.float64)
    x = (spec.start[0] + spec.velocity[0] * l) * W
    y = (spec.start[1] + spec.velocity[1] * l) * H
    if spec.sway_amplitude:
        y = y + spec.sway_amplitude * H * np.sin(2 * math.pi * spec.sway_cycles * l / L)
    return np.stack([x, y], axis=1)


def rasterize(shape: str, cx: float, cy: float, r: float, H: int, W: int) -> np.ndarray:
    ys = np.arange(H)[:, None] + 0.5
    xs = np.arange(W)[None, :] + 0.5
    dx, dy = xs - cx, ys - cy
    if shape == "circle":
        inside = dx * dx + dy * dy <= r * r
    elif shape == "square":
        inside = (np.abs(dx) <= r) & (np.abs(dy) <= r)
    elif shape == "capsule":
        # Horizontal stadium: points within 0.6 r of the segment |dx| <= 0.4 r.
        ex = np.clip(np.abs(dx) - 0.4 * r, 0.0, None)
        inside = ex * ex + dy * dy <= (0.6 * r) ** 2
    else:
        raise SceneError(f"unknown sprite shape {shape!r}")
    return inside.astype(np.float32)


def gaussian_heatmap(cx: float, cy: float, H: int, W: int, sigma: float = POSE_SIGMA) -> np.ndarray:
    ys = np.arange(H)[:, None] + 0.5
    xs = np.arange(W)[None, :] + 0.5
    d2 = (xs - cx) ** 2 + (ys - cy) ** 2
    return (np.exp(-d2 / (2 * sigma * sigma)) / (2 * math.pi * sigma * sigma)).astype(np.float32)


def background_colors(seed: int) -> tuple:
    rng = np.random.default_rng([seed, 7])
    out = []
    for _ in range(2):
        h = rng.uniform()
        s = rng.uniform(0.0, 0.2)
        v = rng.uniform(0.15, 0.5)
        out.append(colorsys.hsv_to_rgb(h, s, v))
    return tuple(out)


def check_spec(spec: SceneSpec, L: int, H: int, W: int) -> None:
    if spec.sprite_shape not in SHAPES:
        raise SceneError(f"unknown sprite shape {spec.sprite_shape!r}")
    if not 0 < spec.sprite_depth < 1:
        raise SceneError("sprite_depth must lie in (0, 1)")
    r = spec.sprite_radius * H
    c = sprite_centers(spec, L, H, W)
    if (c[:, 0] - r < 1).any() or (c[:, 0] + r > W - 1).any() or (c[:, 1] - r < 1).any() or (c[:, 1] + r > H - 1).any():
        raise SceneError("trajectory leaves the frame")


def background_depth(spec: SceneSpec, H: int, W: int) -> np.ndarray:
    top, bottom = spec.bg_gradient
    rows = top + (bottom - top) * (np.arange(H) + 0.5) / H
    return np.repeat(rows[:, None], W, axis=1).astype(np.float32)


def generate_scene(spec: SceneSpec, L: int, H: int, W: int, colormap: str = "hot") -> SceneSample:
    check_spec(spec, L, H, W)
    r = spec.sprite_radius * H
    centers = sprite_centers(spec, L, H, W)
    (c_top, c_bot) = background_colors(spec.seed)
    t = ((np.arange(H) + 0.5) / H)[None, :, None]
    bg = (np.array(c_top)[:, None, None] * (1 - t) + np.array(c_bot)[:, None, None] * t)
    bg = np.broadcast_to(bg, (3, H, W)).astype(np.float32)
    bg_depth = background_depth(spec, H, W)
    color = np.asarray(spec.sprite_color, dtype=np.float32)[:, None, None]

    masks = np.stack([rasterize(spec.sprite_shape, cx, cy, r, H, W) for cx, cy in centers])
    covered = np.broadcast_to(bg_depth, masks.shape)[masks > 0.5]
    if covered.size and np.abs(covered - spec.sprite_depth).min() < MIN_DEPTH_GAP:
        raise SceneError("sprite depth too close to the background depth")

    video = bg[None] * (1 - masks[:, None]) + color[None] * masks[:, None]
    depth = np.where(masks > 0.5, np.float32(spec.sprite_depth), bg_depth[None])[:, None].astype(np.float32)

    vx, vy = spec.velocity[0] * W, spec.velocity[1] * H
    norm = math.hypot(vx, vy)
    dx, dy = (vx / norm, vy / norm) if norm > 1e-12 else (1.0, 0.0)
    pose = np.zeros((L, NUM_KEYPOINTS, H, W), dtype=np.float32)
    for l, (cx, cy) in enumerate(centers):
        for k, sgn in enumerate((0.0, 1.0, -1.0)):
            pose[l, k] = gaussian_heatmap(cx + sgn * r * dx, cy + sgn * r * dy, H, W)

    return SceneSample(
        spec=spec,
        video=video.astype(np.float32),
        depth=depth,
        depth_rgb=depth_to_rgb(depth, colormap),
        pose_heatmaps=pose,
        fg_mask=masks.astype(np.uint8),
        fg_image=(video[0] * masks[0][None]).astype(np.float32),
        bg_image=bg.copy(),
        centers=centers,
        colormap=colormap,
    )


# -- datasets -----------------------------------------------------------------


@dataclass
class SceneDataset:
    train: list
    eval: list
    L: int
    H: int
    W: int
    split_seed: int
    colormap: str = "hot"
    eval_combos: list = field(default_factory=list)


def split_combos(split_seed: int, eval_fraction: float) -> tuple:
    combos = [(s, b) for s in SHAPES for b in range(HUE_BINS)]
    rng = np.random.default_rng([split_seed, 1])
    order = rng.permutation(len(combos))
    n_eval = max(1, int(round(len(combos) * eval_fraction)))
    eval_c = sorted(combos[i] for i in order[:n_eval])
    train_c = sorted(combos[i] for i in order[n_eval:])
    return train_c, eval_c


def random_spec(rng: np.random.Generator, combo: tuple, L: int, H: int, W: int, seed: int) -> SceneSpec:
    shape, hue_bin = combo
    for _ in range(1000):
        h = (hue_bin + rng.uniform(0.05, 0.95)) / HUE_BINS
        color = tuple(float(c) for c in colorsys.hsv_to_rgb(h, rng.uniform(0.8, 1.0), rng.uniform(0.85, 1.0)))
        radius = float(rng.uniform(0.12, 0.2))
        margin = radius + 1.5 / H
        start = rng.uniform(margin, 1 - margin, size=2)
        end = rng.uniform(margin, 1 - margin, size=2)
        # Keep the per-frame displacement moderate.
        travel = np.clip(end - start, -0.5, 0.5)
        velocity = travel / max(L - 1, 1)
        amp = float(rng.uniform(0.0, 0.05))
        spec = SceneSpec(
            sprite_shape=shape,
            sprite_color=color,
            sprite_radius=radius,
            start=(float(start[0]), float(start[1])),
            velocity=(float(velocity[0]), float(velocity[1])),
            sway_amplitude=amp,
            sway_cycles=float(rng.uniform(0.5, 1.5)),
            sprite_depth=float(rng.uniform(0.6, 0.95)),
            bg_gradient=(float(rng.uniform(0.05, 0.45)), float(rng.uniform(0.05, 0.45))),
            seed=seed,
        )
        try:
            check_spec(spec, L, H, W)
        except SceneError:
            continue
        return spec
    raise SceneError("could not sample a valid scene")


def _generate(args):
    spec, L, H, W, colormap = args
    return generate_scene(spec, L, H, W, colormap)


def make_dataset(num_scenes: int, split_seed: int, L: int = 8, H: int = 32, W: int = 32,
                 eval_fraction: float = 0.2, colormap: str = "hot", workers: int | None = None) -> SceneDataset:
    """Train/eval scenes whose (shape, hue bin) combinations never overlap across splits."""
    if num_scenes < 1:
        raise ValueError("num_scenes must be >= 1")
    n_eval = int(round(num_scenes * eval_fraction))
    n_train = num_scenes - n_eval
    train_c, eval_c = split_combos(split_seed, eval_fraction)
    rng = np.random.default_rng([split_seed, 2])
    specs = []
    for i in range(num_scenes):
        pool = train_c if i < n_train else eval_c
        combo = pool[int(rng.integers(len(pool)))]
        specs.append(random_spec(rng, combo, L, H, W, seed=int(split_seed) * 100003 + i))
    if workers is None:
        workers = int(os.environ.get("IDOL_NUM_WORKERS", "1"))
    jobs = [(s, L, H, W, colormap) for s in specs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            samples = list(ex.map(_generate, jobs))
    else:
        samples = [_generate(j) for j in jobs]
    return SceneDataset(samples[:n_train], samples[n_train:], L, H, W, split_seed, colormap, eval_c)


# -- persistence ----------------------------------------------------------------


def _to_png(arr: np.ndarray, path: Path) -> None:
    a = np.clip(np.rint(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    if a.ndim == 3:
        a = np.moveaxis(a, 0, -1)
    Image.fromarray(a).save(path)


def _from_png(path: Path) -> np.ndarray:
    a = np.asarray(Image.open(path), dtype=np.float32) / 255.0
    return np.moveaxis(a, -1, 0) if a.ndim == 3 else a


def write_manifest(path: Path, fields: dict) -> None:
    lines = [f"{k} = {json.dumps(v)}" for k, v in fields.items()]
    path.write_text("\n".join(lines) + "\n")


def read_manifest(path: Path) -> dict:
    out = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        k, v = line.split("=", 1)
        out[k.strip()] = json.loads(v)
    return out


def save_scene(sample: SceneSample, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    L = sample.video.shape[0]
    peak = 1.0 / (2 * math.pi * POSE_SIGMA ** 2)
    for l in range(L):
        _to_png(sample.video[l], directory / f"video_{l:02d}.png")
        _to_png(sample.depth_rgb[l], directory / f"depth_rgb_{l:02d}.png")
        _to_png(sample.fg_mask[l], directory / f"mask_{l:02d}.png")
        for k in range(sample.pose_heatmaps.shape[1]):
            _to_png(sample.pose_heatmaps[l, k] / peak, directory / f"pose_{l:02d}_k{k}.png")
    _to_png(sample.fg_image, directory / "fg.png")
    _to_png(sample.bg_image, directory / "bg.png")
    fields = sample.spec.to_dict()
    fields.update(frames=L, colormap=sample.colormap, heatmap_png_scale=peak)
    write_manifest(directory / "scene.txt", fields)


def load_scene(directory: Path) -> SceneSample:
    """Read a scene back from its PNGs; geometry metadata comes from the manifest."""
    directory = Path(directory)
    meta = read_manifest(directory / "scene.txt")
    L = int(meta.pop("frames"))
    colormap = meta.pop("colormap")
    scale = float(meta.pop("heatmap_png_scale"))
    spec = SceneSpec.from_dict(meta)
    video = np.stack([_from_png(directory / f"video_{l:02d}.png") for l in range(L)])
    depth_rgb = np.stack([_from_png(directory / f"depth_rgb_{l:02d}.png") for l in range(L)])
    mask = np.stack([_from_png(directory / f"mask_{l:02d}.png") for l in range(L)]) > 0.5
    pose = np.stack([
        np.stack([_from_png(directory / f"pose_{l:02d}_k{k}.png") * scale for k in range(NUM_KEYPOINTS)])
        for l in range(L)
    ]).astype(np.float32)
    H, W = video.shape[-2:]
    return SceneSample(
        spec=spec, video=video, depth=rgb_to_depth(depth_rgb, colormap), depth_rgb=depth_rgb,
        pose_heatmaps=pose, fg_mask=mask.astype(np.uint8), fg_image=_from_png(directory / "fg.png"),
        bg_image=_from_png(directory / "bg.png"), centers=sprite_centers(spec, L, H, W), colormap=colormap,
    )


def save_dataset(ds: SceneDataset, root: Path) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for split, samples in (("train", ds.train), ("eval", ds.eval)):
        for i, s in enumerate(samples):
            save_scene(s, root / split / f"scene_{i:04d}")
    write_manifest(root / "manifest.txt", {
        "frames": ds.L, "height": ds.H, "width": ds.W, "split_seed": ds.split_seed,
        "colormap": ds.colormap, "train_scenes": len(ds.train), "eval_scenes": len(ds.eval),
        "eval_combos": [list(c) for c in ds.eval_combos],
    })


def load_dataset(root: Path) -> SceneDataset:
    root = Path(root)
    meta = read_manifest(root / "manifest.txt")
    train = [load_scene(root / "train" / f"scene_{i:04d}") for i in range(meta["train_scenes"])]
    ev = [load_scene(root / "eval" / f"scene_{i:04d}") for i in range(meta["eval_scenes"])]
    return SceneDataset(train, ev, meta["frames"], meta["height"], meta["width"], meta["split_seed"],
                        meta["colormap"], [tuple(c) for c in meta["eval_combos"]])
