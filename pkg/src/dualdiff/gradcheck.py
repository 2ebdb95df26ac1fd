"""Central-difference verification of analytic gradients.

Each checked entry's relative error is ``|a - n| / max(|a|, |n|, floor * g)``
where ``g`` is the largest analytic gradient magnitude of that objective. The
scaled floor keeps entries whose true gradient sits at round-off level from
producing meaningless ratios, whatever the objective's overall scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np
import torch

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4
DEFAULT_FLOOR = 1e-5
MAX_ENTRIES = 64


@dataclass
class Failure:
    tensor: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradcheckReport:
    objective: str
    tolerance: float
    per_tensor: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    checked: int = 0
    grad_scale: float = 0.0
    entries: Optional[list] = None

    @property
    def max_rel_error(self) -> float:
        return max(self.per_tensor.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> dict:
        worst = max(self.per_tensor, key=self.per_tensor.get) if self.per_tensor else None
        return {
            "objective": self.objective,
            "passed": self.passed,
            "max_rel_error": self.max_rel_error,
            "worst_tensor": worst,
            "checked_entries": self.checked,
            "tolerance": self.tolerance,
            "grad_scale": self.grad_scale,
            "failures": [f.__dict__ for f in self.failures[:20]],
        }


def relative_error(a: float, n: float, floor: float = DEFAULT_FLOOR) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def gradcheck(objectives: Callable[[], dict], params: dict, subset: Optional[Callable[[str], bool]] = None,
              step: float = DEFAULT_STEP, max_entries: int = MAX_ENTRIES, tolerance: float = DEFAULT_TOLERANCE,
              floor: float = DEFAULT_FLOOR, seed: int = 0, keep_entries: bool = False) -> dict:
    """Check several scalar objectives against central differences in one sweep.

    ``objectives()`` evaluates every objective at the current parameter values
    and returns ``{name: scalar tensor}``. ``params`` maps names to leaf
    tensors (double precision expected). Each perturbed evaluation is shared
    by all objectives. Returns ``{name: GradcheckReport}``.
    """
    names = [n for n in params if subset is None or subset(n)]
    for n in names:
        if params[n].dtype != torch.float64:
            raise TypeError(f"gradcheck needs float64 parameters; {n} is {params[n].dtype}")

    # Analytic gradients, one backward pass per objective.
    keys = list(objectives())
    analytic = {}
    for k in keys:
        for n in names:
            params[n].grad = None
        vals = objectives()
        vals[k].backward()
        analytic[k] = {n: (params[n].grad.detach().clone() if params[n].grad is not None
                           else torch.zeros_like(params[n])) for n in names}
        for n in names:
            params[n].grad = None

    scale = {k: max((g.abs().max().item() for g in analytic[k].values()), default=0.0) for k in keys}
    rng = np.random.default_rng(seed)
    reports = {k: GradcheckReport(k, tolerance, grad_scale=scale[k], entries=[] if keep_entries else None)
               for k in keys}
    with torch.no_grad():
        for n in names:
            p = params[n]
            flat = p.view(-1)
            count = flat.numel()
            idx = np.sort(rng.choice(count, size=min(count, max_entries), replace=False))
            worst = {k: 0.0 for k in keys}
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + step
                plus = {k: v.item() for k, v in objectives().items()}
                flat[i] = orig - step
                minus = {k: v.item() for k, v in objectives().items()}
                flat[i] = orig
                for k in keys:
                    num = (plus[k] - minus[k]) / (2 * step)
                    ana = analytic[k][n].view(-1)[i].item()
                    err = relative_error(ana, num, floor * scale[k] or floor)
                    worst[k] = max(worst[k], err)
                    reports[k].checked += 1
                    if keep_entries:
                        reports[k].entries.append((n, int(i), ana, num))
                    if err > tolerance:
                        index = tuple(int(j) for j in np.unravel_index(i, tuple(p.shape)))
                        reports[k].failures.append(Failure(n, index, ana, num, err))
            for k in keys:
                reports[k].per_tensor[n] = worst[k]
    return reports


def perturb_zero_init(model: torch.nn.Module, scale: float = 0.1, seed: int = 0) -> list:
    """Fill zero-initialized projections with small random values so every path carries gradient."""
    from .model import zero_init_names

    names = zero_init_names(model)
    gen = torch.Generator().manual_seed(seed)
    params = dict(model.named_parameters())
    with torch.no_grad():
        for n in sorted(names):
            p = params[n]
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)
    return sorted(names)


def name_filter(patterns: Iterable[str]) -> Callable[[str], bool]:
    pats = [p for p in patterns if p]
    if not pats:
        return lambda name: True
    return lambda name: any(p in name for p in pats)


OBJECTIVES = ("denoise", "mo", "xattn", "total")
TINY_MODEL = dict(frames=2, latent_size=8, base_channels=8, channel_mults=(1, 2), heads=2, cond_dim=16,
                  fg_tokens=4, max_timesteps=200)


@dataclass
class Probe:
    model: torch.nn.Module
    params: dict
    objectives: Callable[[], dict]


def tiny_probe(model_cfg=None, seed: int = 0, t: int = 100, weights=None) -> Probe:
    """Double-precision joint model with fixed inputs exposing the four training objectives."""
    from .losses import LossWeights, denoise_loss, motion_block_losses, total_loss, xattn_block_losses
    from .model import ConditionBundle, DenoiserConfig, build_model
    from .schedule import forward_diffuse, make_linear_schedule

    cfg = model_cfg or DenoiserConfig(**TINY_MODEL)
    w = weights or LossWeights()
    model = build_model(cfg, seed=seed).double()
    perturb_zero_init(model, seed=seed)
    sched = make_linear_schedule(cfg.max_timesteps)
    g = torch.Generator().manual_seed(seed + 1)
    b, l, c, s = 1, cfg.frames, cfg.latent_channels, cfg.latent_size

    def rnd(*shape):
        return torch.randn(shape, generator=g, dtype=torch.float64)

    z_v, z_d = rnd(b, l, c, s, s).tanh(), rnd(b, l, c, s, s).tanh()
    eps_v, eps_d = rnd(b, l, c, s, s), rnd(b, l, c, s, s)
    cond = ConditionBundle(rnd(b, 3, s, s).sigmoid(), rnd(b, c, s, s).tanh(),
                           rnd(b, l, cfg.pose_keypoints, s, s).abs())
    x_v, x_d = forward_diffuse(z_v, t, eps_v, sched), forward_diffuse(z_d, t, eps_d, sched)

    def objectives() -> dict:
        ev, ed, tv, td = model.joint_forward(x_v, x_d, t, cond, capture_taps=True)
        den = denoise_loss(ev, eps_v, ed, eps_d)
        mo = motion_block_losses(tv, td)
        xa = xattn_block_losses(tv, td)
        return {"denoise": den, "mo": sum(mo), "xattn": sum(xa), "total": total_loss(den, mo, xa, w)}

    return Probe(model, dict(model.named_parameters()), objectives)
