import math
from dataclasses import replace

import pytest
import torch

from dualdiff.gradcheck import perturb_zero_init
from dualdiff.model import (ConditionBundle, DenoiserConfig, Modality, SelfAttention, add_background_latent,
                            attention, build_model, count_parameters, cross_modal_attention, eval_mode,
                            is_temporal_or_cross_modal, parameter_inventory, sinusoidal_embedding,
                            zero_init_names)


def inputs(cfg, seed=0, batch=1, dtype=torch.float32, pose=True):
    g = torch.Generator().manual_seed(seed)
    s, l, c = cfg.latent_size, cfg.frames, cfg.latent_channels
    z_v = torch.randn(batch, l, c, s, s, generator=g, dtype=dtype)
    z_d = torch.randn(batch, l, c, s, s, generator=g, dtype=dtype)
    cond = ConditionBundle(torch.rand(batch, 3, s, s, generator=g, dtype=dtype),
                           torch.rand(batch, c, s, s, generator=g, dtype=dtype) * 2 - 1,
                           torch.rand(batch, l, cfg.pose_keypoints, s, s, generator=g, dtype=dtype) if pose else None)
    return z_v, z_d, cond


def test_config_validation():
    with pytest.raises(ValueError):
        DenoiserConfig(latent_size=30, channel_mults=(1, 2, 4))
    with pytest.raises(ValueError):
        DenoiserConfig(base_channels=30, heads=4)
    assert DenoiserConfig().num_up_blocks == 3
    cfg = DenoiserConfig()
    assert DenoiserConfig.from_dict(cfg.to_dict()) == cfg


def test_sinusoidal_at_zero():
    e = sinusoidal_embedding(torch.tensor([0]), 8)
    assert e[0, 0::2].tolist() == [0.0] * 4
    assert e[0, 1::2].tolist() == [1.0] * 4


def test_modality_embedding_additive(tiny_cfg):
    m = build_model(tiny_cfg, seed=1)
    ev = m.embed_timestep_modality(5, Modality.VIDEO)
    ed = m.embed_timestep_modality(5, Modality.DEPTH)
    torch.testing.assert_close(ev - ed, (m.modality_table[0] - m.modality_table[1])[None])
    with torch.no_grad():
        m.modality_table.zero_()
    assert torch.equal(m.embed_timestep_modality(5, Modality.VIDEO), m.embed_timestep_modality(5, Modality.DEPTH))


def test_add_background_latent():
    z = torch.randn(3, 2, 4, 4)
    assert torch.equal(add_background_latent(z, torch.zeros(2, 4, 4)), z)
    B = torch.randn(2, 4, 4)
    out = add_background_latent(torch.zeros(3, 2, 4, 4), B)
    assert all(torch.equal(out[l], B) for l in range(3))
    assert add_background_latent(torch.full((1, 1, 1, 1), 0.25), torch.full((1, 1, 1), -0.25)).item() == 0.0
    with pytest.raises(ValueError):
        add_background_latent(z, torch.zeros(2, 3, 4))


def test_pose_adapter_fresh_residuals_zero(tiny_cfg):
    m = build_model(tiny_cfg)
    _, _, cond = inputs(tiny_cfg)
    emb = m.embed_timestep_modality(3, Modality.VIDEO)
    res = m.pose_adapter_forward(cond.pose, emb)
    assert len(res) == tiny_cfg.num_up_blocks
    for n, r in enumerate(res):
        level = tiny_cfg.num_up_blocks - 1 - n
        assert r.shape == (tiny_cfg.frames, tiny_cfg.widths[level], tiny_cfg.block_resolution(level),
                           tiny_cfg.block_resolution(level))
        assert torch.count_nonzero(r) == 0


def test_pose_adapter_zero_heatmaps_zero_biases(tiny_cfg):
    m = build_model(tiny_cfg)
    perturb_zero_init(m)
    with torch.no_grad():
        for name, p in m.pose_adapter.named_parameters():
            if name.endswith("bias"):
                p.zero_()
    pose = torch.zeros(1, tiny_cfg.frames, tiny_cfg.pose_keypoints, 8, 8)
    res = m.pose_adapter_forward(pose, torch.zeros(1, tiny_cfg.cond_dim))
    assert all(torch.count_nonzero(r) == 0 for r in res)


def test_pose_adapter_sensitive_after_one_step(tiny_cfg):
    from dualdiff.losses import denoise_loss
    m = build_model(tiny_cfg)
    z_v, z_d, cond = inputs(tiny_cfg)
    opt = torch.optim.SGD(m.parameters(), lr=0.1)
    ev, ed, _, _ = m.joint_forward(z_v, z_d, 10, cond)
    denoise_loss(ev, torch.zeros_like(ev), ed, torch.zeros_like(ed)).backward()
    opt.step()
    emb = m.embed_timestep_modality(10, Modality.VIDEO)
    with torch.no_grad():
        base = m.pose_adapter_forward(cond.pose, emb)
        bumped = cond.pose.clone()
        bumped[0, 0, 0, 4, 4] += 0.5
        moved = m.pose_adapter_forward(bumped, emb)
    assert max((a - b).abs().max().item() for a, b in zip(base, moved)) > 0


def test_pose_adapter_shape_error(tiny_cfg):
    m = build_model(tiny_cfg)
    with pytest.raises(ValueError):
        m.pose_adapter_forward(torch.zeros(1, 2, 5, 8, 8), torch.zeros(1, tiny_cfg.cond_dim))


def test_cross_modal_attention_reductions():
    torch.manual_seed(0)
    layer = SelfAttention(4, 2, zero_out=False)
    tv = torch.randn(6, 4)
    out, none = cross_modal_attention(layer, tv)
    assert none is None
    torch.testing.assert_close(out, layer(tv[None])[0])
    a, b = cross_modal_attention(layer, tv, tv.clone())
    assert torch.equal(a, b)
    with pytest.raises(ValueError):
        cross_modal_attention(layer, tv, torch.randn(5, 4))


def test_two_token_attention_by_hand():
    q = torch.tensor([[[1.0], [2.0]]])
    k = torch.tensor([[[0.5], [-1.0]]])
    v = torch.tensor([[[3.0], [7.0]]])
    out, probs = attention(q, k, v, heads=1)
    for i, qi in enumerate([1.0, 2.0]):
        a, b = math.exp(qi * 0.5), math.exp(qi * -1.0)
        p = [a / (a + b), b / (a + b)]
        assert probs[0, 0, i].tolist() == pytest.approx(p, abs=1e-6)
        assert out[0, i, 0].item() == pytest.approx(3 * p[0] + 7 * p[1], abs=1e-5)


def test_cross_modal_layer_hand_weights():
    # S = 1, D = 1: LayerNorm maps each token to its bias, so q = k for both tokens and attention is [0.5, 0.5].
    layer = SelfAttention(1, 1)
    with torch.no_grad():
        layer.norm.bias.fill_(1.0)
        layer.to_qkv.weight.copy_(torch.tensor([[2.0], [3.0], [5.0]]))
        layer.to_out.weight.fill_(0.5)
        layer.to_out.bias.fill_(0.25)
    ov, od = cross_modal_attention(layer, torch.tensor([[0.1]]), torch.tensor([[0.7]]))
    # value 5 for both tokens -> attended 5 -> out = x + 0.5 * 5 + 0.25
    assert ov.item() == pytest.approx(0.1 + 2.75)
    assert od.item() == pytest.approx(0.7 + 2.75)


def test_single_forward_contract(tiny_cfg):
    m = build_model(tiny_cfg, seed=2)
    z, _, cond = inputs(tiny_cfg)
    a, _ = m.single_forward(z, 7, Modality.VIDEO, cond)
    b, _ = m.single_forward(z, 7, Modality.VIDEO, cond)
    assert torch.equal(a, b)
    assert a.shape == z.shape
    c, _ = m.single_forward(z, 7, Modality.DEPTH, cond)
    assert (a - c).abs().max().item() > 0


def test_shape_errors(tiny_cfg):
    m = build_model(tiny_cfg)
    z, _, cond = inputs(tiny_cfg)
    with pytest.raises(ValueError):
        m.single_forward(z[..., :4, :4], 0, Modality.VIDEO, cond)
    with pytest.raises(ValueError):
        m.joint_forward(z, z[:, :1], 0, cond)
    with pytest.raises(IndexError):
        m.single_forward(z, tiny_cfg.max_timesteps, Modality.VIDEO, cond)


def test_joint_symmetry_with_zeroed_table(tiny_cfg):
    m = build_model(tiny_cfg, seed=3)
    perturb_zero_init(m)
    with torch.no_grad():
        m.modality_table.zero_()
    z, _, cond = inputs(tiny_cfg)
    ev, ed, _, _ = m.joint_forward(z, z.clone(), 4, cond)
    assert torch.equal(ev, ed)


def test_decoupled_joint_equals_single(tiny_cfg):
    cfg = replace(tiny_cfg, cross_modal=False)
    m = build_model(cfg, seed=4)
    perturb_zero_init(m)
    z_v, z_d, cond = inputs(cfg)
    ev, ed, tv, td = m.joint_forward(z_v, z_d, 9, cond, capture_taps=True)
    sv, stv = m.single_forward(z_v, 9, Modality.VIDEO, cond, capture_taps=True)
    sd, _ = m.single_forward(z_d, 9, Modality.DEPTH, cond)
    assert torch.equal(ev, sv) and torch.equal(ed, sd)
    assert all(torch.equal(a, b) for a, b in zip(tv.features, stv.features))


def test_coupling_sensitivity(tiny_cfg):
    m = build_model(tiny_cfg, seed=5)
    perturb_zero_init(m)
    z_v, z_d, cond = inputs(tiny_cfg)
    ev, _, _, _ = m.joint_forward(z_v, z_d, 9, cond)
    ev2, _, _, _ = m.joint_forward(z_v, z_d + 0.1 * torch.randn_like(z_d), 9, cond)
    assert (ev - ev2).abs().max().item() > 0


def test_fresh_model_is_uncoupled(tiny_cfg):
    m = build_model(tiny_cfg, seed=5)
    z_v, z_d, cond = inputs(tiny_cfg)
    ev, _, _, _ = m.joint_forward(z_v, z_d, 9, cond)
    ev2, _, _, _ = m.joint_forward(z_v, z_d + 1.0, 9, cond)
    assert torch.equal(ev, ev2)


def test_taps(tiny_cfg):
    m = build_model(tiny_cfg, seed=6)
    z_v, z_d, cond = inputs(tiny_cfg, batch=2)
    _, _, tv, td = m.joint_forward(z_v, z_d, 3, cond, capture_taps=True)
    assert len(tv.features) == len(tv.xattn_maps) == tiny_cfg.num_up_blocks
    for n, (f, M) in enumerate(zip(tv.features, tv.xattn_maps)):
        level = tiny_cfg.num_up_blocks - 1 - n
        r = tiny_cfg.block_resolution(level)
        assert f.shape == (2, tiny_cfg.frames, tiny_cfg.widths[level], r, r)
        assert M.shape == (2, tiny_cfg.frames, tiny_cfg.heads, r * r, tiny_cfg.fg_tokens)
        assert (M.sum(-1) - 1).abs().max().item() <= 1e-5 and M.min().item() >= 0
    _, _, nt, _ = m.joint_forward(z_v, z_d, 3, cond)
    assert nt is None


def test_xattn_share_modes_reach_taps(tiny_cfg):
    m = build_model(tiny_cfg, seed=7)
    z_v, z_d, cond = inputs(tiny_cfg)
    _, _, tv, td = m.joint_forward(z_v, z_d, 3, cond, capture_taps=True, xattn_mode="share_video")
    assert all(torch.equal(a, b) for a, b in zip(tv.xattn_maps, td.xattn_maps))


def test_frame_locality_without_temporal_layers(tiny_cfg):
    cfg = replace(tiny_cfg, temporal=False, frames=3)
    m = build_model(cfg, seed=8)
    perturb_zero_init(m)
    z, _, cond = inputs(cfg)
    a, _ = m.single_forward(z, 5, Modality.VIDEO, cond)
    z2 = z.clone()
    z2[:, 1] += 1.0
    b, _ = m.single_forward(z2, 5, Modality.VIDEO, cond)
    assert torch.equal(a[:, 0], b[:, 0]) and torch.equal(a[:, 2], b[:, 2])
    assert (a[:, 1] - b[:, 1]).abs().max() > 0


def test_frames_mix_with_temporal_layers(tiny_cfg):
    m = build_model(replace(tiny_cfg, frames=3), seed=8)
    perturb_zero_init(m)
    z, _, cond = inputs(m.cfg)
    a, _ = m.single_forward(z, 5, Modality.VIDEO, cond)
    z2 = z.clone()
    z2[:, 1] += 1.0
    b, _ = m.single_forward(z2, 5, Modality.VIDEO, cond)
    assert (a[:, 0] - b[:, 0]).abs().max() > 0


def test_parameter_sharing_counts(tiny_cfg):
    joint = build_model(tiny_cfg)
    single = build_model(replace(tiny_cfg, modality_embedding=False))
    sep = build_model(tiny_cfg, separate=True)
    assert count_parameters(joint) == count_parameters(single) + 2 * tiny_cfg.cond_dim
    inv_single = parameter_inventory(single)
    inv_sep = parameter_inventory(sep)
    assert count_parameters(sep) == 2 * count_parameters(single)
    for stream in ("video", "depth"):
        assert {k.split(".", 1)[1]: v for k, v in inv_sep.items() if k.startswith(stream + ".")} == inv_single


def test_zero_init_inventory(tiny_cfg):
    m = build_model(tiny_cfg)
    names = zero_init_names(m)
    params = dict(m.named_parameters())
    assert names
    for n in names:
        assert torch.count_nonzero(params[n]) == 0
        assert is_temporal_or_cross_modal(n) or n.startswith("pose_adapter.outs")


def test_build_is_deterministic_and_isolated(tiny_cfg):
    torch.manual_seed(123)
    before = torch.rand(1)
    torch.manual_seed(123)
    a = build_model(tiny_cfg, seed=9)
    after = torch.rand(1)
    b = build_model(tiny_cfg, seed=9)
    assert torch.equal(before, after)
    assert all(torch.equal(x, y) for x, y in zip(a.parameters(), b.parameters()))


def test_patch_stem(tiny_cfg):
    cfg = replace(tiny_cfg, patch_size=2)
    m = build_model(cfg)
    z_v, z_d, cond = inputs(cfg)
    ev, ed, tv, _ = m.joint_forward(z_v, z_d, 1, cond, capture_taps=True)
    assert ev.shape == z_v.shape
    assert tv.features[-1].shape[-1] == 4
    # the full-resolution head starts silent and is trained like the other zero-initialized layers
    assert {"refine_out.weight", "refine_out.bias"} <= zero_init_names(m)
    perturb_zero_init(m, seed=1)
    ev2 = m.joint_forward(z_v, z_d, 1, cond)[0]
    # silencing the refine head again changes the prediction
    m.refine_out.weight.data.zero_()
    m.refine_out.bias.data.zero_()
    assert not torch.allclose(ev2, m.joint_forward(z_v, z_d, 1, cond)[0])
    assert build_model(tiny_cfg).refine_out is None


def test_eval_mode_restores(tiny_cfg):
    m = build_model(tiny_cfg)
    m.train()
    with eval_mode(m):
        assert not m.training
    assert m.training
