import math
import time

import numpy as np
import pytest

from dualdiff.depthcodec import rgb_to_depth
from dualdiff.scenes import (MIN_DEPTH_GAP, SceneError, SceneSpec, generate_scene, load_dataset, load_scene,
                             make_dataset, save_dataset, save_scene, split_combos)


def spec(**kw):
    base = dict(sprite_shape="circle", sprite_color=(0.9, 0.2, 0.1), sprite_radius=0.2, start=(0.5, 0.5),
                velocity=(0.0, 0.0), sprite_depth=0.8, bg_gradient=(0.2, 0.4), seed=3)
    base.update(kw)
    return SceneSpec(**base)


def test_zero_velocity_frames_identical():
    s = generate_scene(spec(), 4, 32, 32)
    for l in range(1, 4):
        assert np.array_equal(s.video[l], s.video[0])
        assert np.array_equal(s.depth[l], s.depth[0])


def test_same_seed_bit_identical():
    a = generate_scene(spec(velocity=(0.02, 0.01), sway_amplitude=0.03, sway_cycles=1.0), 6, 32, 32)
    b = generate_scene(spec(velocity=(0.02, 0.01), sway_amplitude=0.03, sway_cycles=1.0), 6, 32, 32)
    for f in ("video", "depth", "depth_rgb", "pose_heatmaps", "fg_mask", "fg_image", "bg_image"):
        assert np.array_equal(getattr(a, f), getattr(b, f))


def test_circle_area():
    s = generate_scene(spec(), 1, 32, 32)
    area = math.pi * (0.2 * 32) ** 2
    assert abs(s.fg_mask[0].sum() - area) <= 0.1 * area


def test_sample_invariants():
    ds = make_dataset(12, 4, L=8, H=32, W=32)
    for s in ds.train + ds.eval:
        m = s.fg_mask > 0
        assert np.all(s.depth[:, 0][m] == np.float32(s.spec.sprite_depth))
        bg = s.depth[:, 0][~m]
        assert np.all(np.abs(bg - s.spec.sprite_depth) >= MIN_DEPTH_GAP)
        assert np.abs(rgb_to_depth(s.depth_rgb, s.colormap) - s.depth).mean() <= 1e-3
        assert s.video.min() >= 0 and s.video.max() <= 1
        for l in range(8):
            iy, ix = np.unravel_index(np.argmax(s.pose_heatmaps[l, 0]), (32, 32))
            cx, cy = s.centers[l]
            assert abs(ix + 0.5 - cx) <= 1 and abs(iy + 0.5 - cy) <= 1
            assert s.pose_heatmaps[l].sum(axis=(1, 2)).max() <= 1 + 1e-6
        assert s.pose_heatmaps.min() >= 0 and s.pose_heatmaps.max() <= 1


def test_trajectory_leaving_frame_rejected():
    with pytest.raises(SceneError):
        generate_scene(spec(start=(0.9, 0.5), velocity=(0.1, 0.0)), 8, 32, 32)
    with pytest.raises(SceneError):
        generate_scene(spec(sprite_shape="star"), 2, 32, 32)


def test_depth_too_close_rejected():
    with pytest.raises(SceneError):
        generate_scene(spec(sprite_depth=0.35, bg_gradient=(0.3, 0.4)), 2, 32, 32)


def test_split_determinism_and_disjointness():
    a = make_dataset(20, 7, L=2, H=16, W=16)
    b = make_dataset(20, 7, L=2, H=16, W=16)
    assert [s.spec for s in a.train] == [s.spec for s in b.train]
    assert [s.spec for s in a.eval] == [s.spec for s in b.eval]
    train_c = {(s.spec.sprite_shape, s.spec.color_bin()) for s in a.train}
    eval_c = {(s.spec.sprite_shape, s.spec.color_bin()) for s in a.eval}
    assert not train_c & eval_c
    tc, ec = split_combos(7, 0.2)
    assert not set(tc) & set(ec)


def test_split_sizes():
    ds = make_dataset(80, 0, L=2, H=16, W=16)
    assert (len(ds.train), len(ds.eval)) == (64, 16)


def test_generation_budget():
    t0 = time.perf_counter()
    make_dataset(64, 1, L=8, H=32, W=32)
    assert time.perf_counter() - t0 < 10.0


def test_parallel_generation_matches_serial():
    a = make_dataset(6, 2, L=2, H=16, W=16, workers=1)
    b = make_dataset(6, 2, L=2, H=16, W=16, workers=2)
    for x, y in zip(a.train + a.eval, b.train + b.eval):
        assert np.array_equal(x.video, y.video)


def test_scene_persistence_round_trip(tmp_path):
    s = generate_scene(spec(velocity=(0.02, 0.0)), 3, 16, 16)
    save_scene(s, tmp_path / "scene")
    r = load_scene(tmp_path / "scene")
    assert r.spec == s.spec
    assert np.abs(r.video - s.video).max() <= 0.5 / 255 + 1e-7
    assert np.array_equal(r.fg_mask, s.fg_mask)
    assert np.abs(r.pose_heatmaps - s.pose_heatmaps).max() <= 0.01
    assert np.abs(r.depth - s.depth).max() <= 3e-3


def test_dataset_persistence(tmp_path):
    ds = make_dataset(5, 3, L=2, H=16, W=16)
    save_dataset(ds, tmp_path)
    assert (tmp_path / "manifest.txt").exists()
    back = load_dataset(tmp_path)
    assert len(back.train) == len(ds.train) and len(back.eval) == len(ds.eval)
    assert back.eval_combos == ds.eval_combos
    assert [s.spec for s in back.train] == [s.spec for s in ds.train]
