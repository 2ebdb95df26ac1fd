import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dualdiff.metrics import (depth_foreground, depth_l2, depth_threshold, mask_iou, minmax_scale,
                              motion_divergence, silhouette_iou, video_foreground, write_report)
from dualdiff.model import build_model
from dualdiff.schedule import make_linear_schedule
from test_model import inputs


def seq(values):
    return np.asarray(values, dtype=np.float64).reshape(1, 1, 1, -1)


def test_depth_l2_examples():
    rng = np.random.default_rng(0)
    gt = rng.random((4, 1, 5, 5))
    assert depth_l2(gt, gt.copy()).value == 0.0
    assert depth_l2(gt * 0.5, gt).value == pytest.approx(0.0, abs=1e-12)
    assert depth_l2(seq([0.0, 1.0]), seq([1.0, 0.0])).value == pytest.approx(1.0)


def test_depth_l2_constant_map_flagged():
    res = depth_l2([seq([0.3, 0.3]), seq([0.0, 1.0])], [seq([0.0, 1.0]), seq([0.0, 1.0])])
    assert res.flagged == [0]
    assert res.per_sample[1] == 0.0
    assert res.value == pytest.approx(np.mean(res.per_sample))
    with pytest.raises(ValueError):
        depth_l2([seq([0.0, 1.0])], [seq([0.0, 1.0, 2.0])])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), a=st.floats(0.1, 10), b=st.floats(-5, 5))
def test_depth_l2_affine_invariance(seed, a, b):
    rng = np.random.default_rng(seed)
    p, g = rng.random((2, 1, 4, 4)), rng.random((2, 1, 4, 4))
    assert depth_l2(a * p + b, a * g + b).value == pytest.approx(depth_l2(p, g).value, abs=1e-9)


def test_minmax():
    x, flagged = minmax_scale(np.array([2.0, 4.0, 3.0]))
    assert x.tolist() == [0.0, 1.0, 0.5] and not flagged
    assert minmax_scale(np.ones(3))[1]


def test_mask_iou_examples():
    m = np.array([[1, 0], [1, 1]])
    assert mask_iou(m, m) == 1.0
    assert mask_iou(np.array([[1, 0], [0, 0]]), np.array([[0, 1], [0, 0]])) == 0.0
    assert mask_iou(np.array([[1, 1], [0, 0]]), np.array([[1, 0], [1, 0]])) == pytest.approx(1 / 3)
    assert mask_iou(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0
    assert mask_iou(np.zeros((2, 2)), np.ones((2, 2))) == 0.0


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_mask_iou_range_and_symmetry(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((6, 6)) > 0.5, rng.random((6, 6)) > 0.5
    v = mask_iou(a, b)
    assert 0 <= v <= 1 and v == mask_iou(b, a)


def test_silhouette_iou_on_ground_truth_scene():
    from dualdiff.scenes import background_depth, make_dataset
    s = make_dataset(3, 0, L=4, H=16, W=16).train[0]
    thr = depth_threshold(s.spec.sprite_depth, background_depth(s.spec, 16, 16))
    assert silhouette_iou(s.video, s.depth, s.spec.sprite_color, thr) == 1.0
    assert np.array_equal(video_foreground(s.video, s.spec.sprite_color), s.fg_mask > 0)
    assert np.array_equal(depth_foreground(s.depth, thr), s.fg_mask > 0)
    empty_depth = np.zeros_like(s.depth)
    assert silhouette_iou(s.video, empty_depth, s.spec.sprite_color, thr) == 0.0


def test_motion_divergence_properties(tiny_cfg):
    m = build_model(tiny_cfg, seed=1)
    _, _, cond = inputs(tiny_cfg)
    g = torch.Generator().manual_seed(0)
    v = torch.rand(1, tiny_cfg.frames, 3, 8, 8, generator=g)
    d = torch.rand(1, tiny_cfg.frames, 3, 8, 8, generator=g)
    sched = make_linear_schedule(20)
    assert motion_divergence(m, v, v.clone(), cond, sched) == 0.0
    val = motion_divergence(m, v, d, cond, sched)
    assert val > 0
    assert val == motion_divergence(m, v, d, cond, sched)


def test_write_report(tmp_path):
    doc = write_report({"iou": 0.5}, [{"scene": 0, "iou": 0.5}], tmp_path, {"seed": 1})
    assert (tmp_path / "report.json").exists()
    assert (tmp_path / "summary.csv").read_text().splitlines() == ["metric,value", "iou,0.5"]
    assert doc["metrics"]["iou"] == 0.5
