import math

import pytest
import torch

from dualdiff.gradcheck import (DEFAULT_FLOOR, OBJECTIVES, gradcheck, name_filter, perturb_zero_init, relative_error,
                                tiny_probe)
from dualdiff.losses import default_temperature, motion_consistency_loss
from dualdiff.model import build_model, zero_init_names


def dbl(*shape, seed=0):
    return torch.randn(shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def test_linear_probe_matches_to_machine_precision():
    w = dbl(5, 7, seed=1)
    x = dbl(5, 7, seed=2).requires_grad_()
    rep = gradcheck(lambda: {"lin": (w * x).sum()}, {"x": x})["lin"]
    assert rep.passed and rep.checked == 35
    # central differences of a linear function are exact up to round-off
    assert rep.max_rel_error < 1e-8


def test_subsample_capped_per_tensor():
    x = dbl(20, 20, seed=3).requires_grad_()
    rep = gradcheck(lambda: {"q": (x ** 2).sum()}, {"x": x}, max_entries=64)["q"]
    assert rep.checked == 64


class _WrongGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return x.clone()

    @staticmethod
    def backward(ctx, g):
        out = g.clone()
        out.view(-1)[3] *= 2
        return out


def test_failure_names_tensor_and_index():
    x = dbl(2, 3, seed=4).requires_grad_()
    w = dbl(2, 3, seed=5)
    rep = gradcheck(lambda: {"bad": (w * _WrongGrad.apply(x)).sum()}, {"theta": x})["bad"]
    assert not rep.passed
    assert [(f.tensor, f.index) for f in rep.failures] == [("theta", (1, 0))]
    assert rep.failures[0].rel_error == pytest.approx(0.5, rel=1e-6)


def test_requires_double():
    x = torch.zeros(3, requires_grad=True)
    with pytest.raises(TypeError):
        gradcheck(lambda: {"s": x.sum()}, {"x": x})


def test_relative_error_floor():
    assert relative_error(1.0, 1.0) == 0
    assert relative_error(2.0, 1.0) == 0.5
    assert relative_error(0.0, 1e-12, floor=1e-6) == pytest.approx(1e-6)
    assert DEFAULT_FLOOR <= 1e-5


def test_motion_loss_through_softmax():
    fv = dbl(3, 4, 3, 3, seed=6).requires_grad_()
    fd = dbl(3, 4, 3, 3, seed=7).requires_grad_()
    tau = default_temperature(4)
    rep = gradcheck(lambda: {"mo": motion_consistency_loss(fv, fd, tau)}, {"fv": fv, "fd": fd}, max_entries=200)["mo"]
    assert rep.checked == 216
    assert rep.max_rel_error < 1e-4


def test_perturb_zero_init_randomizes(tiny_cfg):
    model = build_model(tiny_cfg, seed=0).double()
    names = perturb_zero_init(model, seed=1)
    assert names == sorted(zero_init_names(model))
    params = dict(model.named_parameters())
    assert all(params[n].abs().sum() > 0 for n in names)


def test_name_filter():
    f = name_filter(["cross_modal", "temporal"])
    assert f("up.0.cross_modal.proj") and f("temporal_conv.weight") and not f("conv_in.weight")
    assert name_filter([])("anything")


@pytest.fixture(scope="module")
def probe():
    return tiny_probe()


def test_probe_objectives(probe):
    vals = probe.objectives()
    assert set(vals) == set(OBJECTIVES)
    assert all(v.dtype == torch.float64 and math.isfinite(v.item()) for v in vals.values())
    assert vals["total"].item() == pytest.approx(vals["denoise"].item() + 0.01 * (vals["mo"] + vals["xattn"]).item(),
                                                 rel=1e-12)


def test_joint_forward_subset_all_objectives(probe):
    # quick slice of the full oracle run: cross-modal attention, temporal layers and output head
    subset = name_filter(["cross_modal", "temporal", "conv_out", "modality"])
    reports = gradcheck(probe.objectives, probe.params, subset=subset, max_entries=3, seed=1)
    for k, rep in reports.items():
        assert rep.checked > 0
        assert rep.passed, (k, rep.failures[:3])
        assert rep.max_rel_error < 1e-4
        assert rep.grad_scale > 0
