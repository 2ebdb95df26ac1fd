"""Command-line entry point: ``dualdiff <command> [flags]``.

Commands: gen-data, train, sample, eval, gradcheck, inspect-motion. Every
command writes its resolved settings beside its outputs. Failures exit
nonzero with a single JSON line on stderr.
"""

from __future__ import annotations

import argparse
import colorsys
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

log = logging.getLogger("dualdiff")


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _fail("usage", message, code=2)


def _fail(kind: str, message: str, code: int = 1):
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    raise SystemExit(code)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _save_png(img: np.ndarray, path: Path) -> None:
    """[3, H, W] or [H, W, 3] float in [0, 1]."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 3 and a.shape[0] == 3:
        a = np.moveaxis(a, 0, -1)
    Image.fromarray(np.clip(np.rint(a * 255), 0, 255).astype(np.uint8)).save(path)


def _parse_overrides(extra: list) -> list:
    items = []
    for tok in extra:
        if not tok.startswith("--") or "=" not in tok:
            raise CliError(f"unrecognized argument {tok!r}; config overrides take the form --key=value")
        key, value = tok[2:].split("=", 1)
        items.append((key.replace("-", "_") if "." not in key else key, value))
    return items


def _dataset(path):
    from .scenes import load_dataset
    if path is None:
        raise CliError("--data is required")
    return load_dataset(Path(path))


def _scene_from_arg(cond: str, data):
    """Scene directory, or an eval-split index into --data."""
    from .scenes import load_scene
    p = Path(cond)
    if p.is_dir():
        return load_scene(p)
    try:
        idx = int(cond)
    except ValueError:
        raise CliError(f"--cond must be a scene directory or an eval scene index, got {cond!r}") from None
    ds = _dataset(data)
    if not 0 <= idx < len(ds.eval):
        raise CliError(f"eval scene index {idx} out of range (0..{len(ds.eval) - 1})")
    return ds.eval[idx]


# -- commands -------------------------------------------------------------------


def cmd_gen_data(args) -> dict:
    from .scenes import make_dataset, save_dataset
    ds = make_dataset(args.scenes, args.seed, L=args.frames, H=args.size, W=args.size, colormap=args.colormap)
    out = Path(args.out)
    save_dataset(ds, out)
    settings = {"scenes": args.scenes, "frames": args.frames, "size": args.size, "seed": args.seed,
                "colormap": args.colormap}
    _write_json(out / "gen_data.json", settings)
    return {"out": str(out), "train": len(ds.train), "eval": len(ds.eval)}


def cmd_train(args, extra) -> dict:
    from .config import apply_overrides, load_config
    from .scenes import load_dataset, make_dataset
    from .train import train

    cfg = load_config(Path(args.config) if args.config else None)
    items = _parse_overrides(extra)
    if args.stage:
        items.append(("train.stage", args.stage))
    if args.seed is not None:
        items.append(("train.seed", str(args.seed)))
    cfg = apply_overrides(cfg, items)
    data = args.data or cfg.data_root
    if data:
        ds = load_dataset(Path(data))
    else:
        m = cfg.model
        ds = make_dataset(cfg.scenes, cfg.split_seed, L=m.frames, H=m.latent_size, W=m.latent_size,
                          colormap=cfg.colormap)
    if (ds.L, ds.H) != (cfg.model.frames, cfg.model.latent_size):
        raise CliError(f"dataset frames/size ({ds.L}, {ds.H}) do not match model config "
                       f"({cfg.model.frames}, {cfg.model.latent_size})")
    res = train(cfg, ds, Path(args.out), resume=Path(args.resume) if args.resume else None)
    last = res.losses[-1]
    out = {"checkpoint": str(res.checkpoint), "steps": cfg.steps, "final_loss": last.total}
    if res.coverage is not None:
        out["restored"] = len(res.coverage.restored)
        out["initialized"] = len(res.coverage.initialized)
    return out


def contact_sheet(video: np.ndarray, depth_rgb: np.ndarray) -> np.ndarray:
    """Two rows (video over depth) of L frames: [L, 3, H, W] x2 -> [2H, L*W, 3]."""
    top = np.concatenate(list(np.moveaxis(video, 1, -1)), axis=1)
    bottom = np.concatenate(list(np.moveaxis(depth_rgb, 1, -1)), axis=1)
    return np.concatenate([top, bottom], axis=0)


def cmd_sample(args) -> dict:
    from .evaluate import model_from_checkpoint
    from .model import Modality
    from .sampler import sample_joint, sample_single
    from .train import scene_batch

    lm = model_from_checkpoint(Path(args.ckpt))
    scene = _scene_from_arg(args.cond, args.data)
    cond = scene_batch([scene]).condition()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.modality == "joint":
        video, depth = sample_joint(lm.model, cond, lm.schedule, seed=args.seed)
        streams = {"video": video[0].numpy(), "depth_rgb": depth[0].numpy()}
    else:
        m = Modality.VIDEO if args.modality == "video" else Modality.DEPTH
        x = sample_single(lm.model, cond, m, lm.schedule, seed=args.seed)
        streams = {"video" if m == Modality.VIDEO else "depth_rgb": x[0].numpy()}
    files = []
    for name, frames in streams.items():
        for l, f in enumerate(frames):
            p = out / f"{name}_{l:02d}.png"
            _save_png(f, p)
            files.append(p.name)
    if len(streams) == 2:
        _save_png(contact_sheet(streams["video"], streams["depth_rgb"]), out / "contact_sheet.png")
        files.append("contact_sheet.png")
    _write_json(out / "sample.json", {"ckpt": str(args.ckpt), "cond": args.cond, "seed": args.seed,
                                      "modality": args.modality, "files": files})
    return {"out": str(out), "frames": len(next(iter(streams.values()))), "files": len(files)}


def cmd_eval(args) -> dict:
    from .config import config_to_dict
    from .evaluate import METRICS, evaluate, model_from_checkpoint
    from .metrics import write_report

    metrics = []
    for m in args.metrics or ["all"]:
        metrics.extend(METRICS if m == "all" else m.split(","))
    lm = model_from_checkpoint(Path(args.ckpt))
    ds = _dataset(args.data)
    scenes = ds.eval[: args.limit] if args.limit else ds.eval
    values, rows = evaluate(lm.model, lm.schedule, scenes, metrics, seed=args.seed, t=args.t)
    settings = {"ckpt": str(args.ckpt), "data": str(args.data), "metrics": metrics, "seed": args.seed,
                "t": args.t, "limit": args.limit, "train_config": config_to_dict(lm.config)}
    write_report(values, rows, Path(args.out), settings)
    return values


def cmd_gradcheck(args) -> dict:
    from .config import load_config
    from .gradcheck import OBJECTIVES, TINY_MODEL, gradcheck, tiny_probe
    from .model import DenoiserConfig

    torch.set_num_threads(1)
    losses = []
    for item in args.loss or ["all"]:
        losses.extend(OBJECTIVES if item == "all" else item.split(","))
    bad = sorted(set(losses) - set(OBJECTIVES))
    if bad:
        raise CliError(f"unknown objective(s) {bad}; choose from {OBJECTIVES} or all")
    mcfg = DenoiserConfig(**TINY_MODEL)
    weights = None
    if args.config:
        cfg = load_config(Path(args.config))
        mcfg = cfg.model_config()
        weights = cfg.weights
    probe = tiny_probe(mcfg, seed=args.seed, weights=weights)

    def objectives():
        vals = probe.objectives()
        return {k: vals[k] for k in losses}

    reports = gradcheck(objectives, probe.params, step=args.step, max_entries=args.max_entries,
                        tolerance=args.tolerance, seed=args.seed)
    doc = {"passed": all(r.passed for r in reports.values()),
           "objectives": {k: r.summary() for k, r in reports.items()},
           "settings": {"tolerance": args.tolerance, "step": args.step, "max_entries": args.max_entries,
                        "seed": args.seed, "model": mcfg.to_dict()}}
    if args.out:
        _write_json(Path(args.out) / "gradcheck.json", doc)
    if not doc["passed"]:
        worst = max(reports.values(), key=lambda r: r.max_rel_error)
        f = worst.failures[0]
        raise CliError(f"gradient check failed for {worst.objective}: tensor {f.tensor} index {list(f.index)} "
                       f"relative error {f.rel_error:.3g}")
    return {k: r.max_rel_error for k, r in reports.items()}


def displacement_hue(field: torch.Tensor) -> np.ndarray:
    """Motion field [H, W, H, W] -> [H, W, 3] image: hue = argmax direction, value = displacement length."""
    H, W = field.shape[:2]
    idx = field.reshape(H, W, -1).argmax(-1)
    ty, tx = (idx // W).numpy(), (idx % W).numpy()
    yy, xx = np.mgrid[0:H, 0:W]
    dy, dx = ty - yy, tx - xx
    mag = np.hypot(dx, dy)
    hue = (np.arctan2(dy, dx) / (2 * np.pi)) % 1.0
    val = mag / max(mag.max(), 1e-12)
    rgb = np.array([colorsys.hsv_to_rgb(h, 1.0, v) for h, v in zip(hue.ravel(), val.ravel())])
    return rgb.reshape(H, W, 3)


def cmd_inspect_motion(args) -> dict:
    from .evaluate import model_from_checkpoint
    from .losses import _motion_fields, default_temperature
    from .schedule import forward_diffuse
    from .train import encode_image, scene_batch

    lm = model_from_checkpoint(Path(args.ckpt))
    scene = _scene_from_arg(args.sample, args.data)
    batch = scene_batch([scene])
    t = lm.schedule.T // 2 if args.t is None else args.t
    if not 0 <= t < lm.schedule.T:
        raise CliError(f"--t must be in [0, {lm.schedule.T})")
    g = torch.Generator().manual_seed(args.seed)
    z_v, z_d = encode_image(batch.video), encode_image(batch.depth_rgb)
    eps = torch.randn(z_v.shape, generator=g)
    with torch.no_grad():
        _, _, tv, td = lm.model.joint_forward(forward_diffuse(z_v, t, eps, lm.schedule),
                                              forward_diffuse(z_d, t, eps, lm.schedule), t,
                                              batch.condition(), capture_taps=True)
    blocks = range(len(tv.features)) if args.block is None else [args.block]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for n in blocks:
        if not 0 <= n < len(tv.features):
            raise CliError(f"--block must be in [0, {len(tv.features)})")
        tau = default_temperature(tv.features[n].shape[-3])
        u_v = _motion_fields(tv.features[n][0], tau)
        u_d = _motion_fields(td.features[n][0], tau)
        for l in range(u_v.shape[0]):
            img = np.concatenate([displacement_hue(u_v[l]), displacement_hue(u_d[l])], axis=1)
            p = out / f"motion_block{n}_pair{l:02d}.png"
            _save_png(img, p)
            written.append(p.name)
    _write_json(out / "inspect_motion.json", {"ckpt": str(args.ckpt), "sample": args.sample, "t": t,
                                              "seed": args.seed, "blocks": list(blocks), "files": written})
    return {"out": str(out), "files": len(written)}


# -- entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dualdiff", description=__doc__.splitlines()[0])
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", help="generate the synthetic scene dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--scenes", type=int, default=80)
    s.add_argument("--frames", type=int, default=8)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--colormap", choices=("hot", "grayscale"), default="hot")

    s = sub.add_parser("train", help="train one stage; any config key can be set as --key=value")
    s.add_argument("--config")
    s.add_argument("--stage", choices=("haop", "joint"))
    s.add_argument("--resume")
    s.add_argument("--out", required=True)
    s.add_argument("--data")
    s.add_argument("--seed", type=int)

    s = sub.add_parser("sample", help="sample a video/depth pair for one condition")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--cond", required=True, help="scene directory or eval scene index into --data")
    s.add_argument("--data")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--modality", choices=("joint", "video", "depth"), default="joint")

    s = sub.add_parser("eval", help="sample the eval split and write metric reports")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--metrics", action="append", help="depth_l2, iou, motion_div or all (repeatable)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--limit", type=int, default=0, help="evaluate only the first N eval scenes")
    s.add_argument("--t", type=int, default=None)

    s = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    s.add_argument("--config")
    s.add_argument("--loss", action="append", help="denoise, mo, xattn, total or all (repeatable)")
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.add_argument("--step", type=float, default=1e-5)
    s.add_argument("--max-entries", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")

    s = sub.add_parser("inspect-motion", help="render motion fields as direction-hue images")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--sample", required=True, help="scene directory or eval scene index into --data")
    s.add_argument("--data")
    s.add_argument("--block", type=int)
    s.add_argument("--t", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    return p


COMMANDS = {"gen-data": cmd_gen_data, "sample": cmd_sample, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
            "inspect-motion": cmd_inspect_motion}


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    if extra and args.command != "train":
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    try:
        if args.command == "train":
            result = cmd_train(args, extra)
        else:
            result = COMMANDS[args.command](args)
    except SystemExit:
        raise
    except Exception as exc:  # noqa: BLE001 - report every failure as one machine-readable line
        _fail(type(exc).__name__, str(exc).replace("\n", " "))
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
