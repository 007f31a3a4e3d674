"""Command-line entry point: ``splitgs <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._validation import check_dataset, check_time, check_which
from .camera import Camera
from .dataio import atomic_write_bytes, load_checkpoint, save_checkpoint, write_png
from .errors import InvalidParameterError, SplitGSError
from .lifecycle import VisibilityStats, accumulate_visibility, prune_mask
from .pipeline import (
    TrainConfig,
    Trainer,
    evaluate,
    initialize_scene,
    load_config,
    scene_from_arrays,
)
from .scene import STATIC_ONLY, ResolveOptions, render_scene, static_visibility
from .synth import SynthSpec, synth_scene

log = logging.getLogger("splitgs")

CHECKPOINT_NAME = "checkpoint.ckpt"


def _resolution(text):
    try:
        w, h = text.lower().split("x")
        w, h = int(w), int(h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None
    if w <= 0 or h <= 0:
        raise argparse.ArgumentTypeError("resolution must be positive")
    return w, h


def build_parser():
    p = argparse.ArgumentParser(prog="splitgs", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate the synthetic dataset")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--frames", type=int, default=60)
    s.add_argument("--res", type=_resolution, default=(64, 64), metavar="WxH")

    for name, helptext in (("pretrain", "run depth-aware pretraining"),
                           ("train", "run every remaining training phase")):
        t = sub.add_parser(name, help=helptext)
        t.add_argument("--data", required=True, type=Path)
        t.add_argument("--out", required=True, type=Path)
        t.add_argument("--config", type=Path)
        t.add_argument("--resume", type=Path)
        t.add_argument("--seed", type=int)
        t.add_argument("--precision", choices=("single", "double"))
        t.add_argument("--dap-iters", type=int)
        t.add_argument("--stage1-iters", type=int)
        t.add_argument("--stage2-iters", type=int)

    r = sub.add_parser("render", help="render one image from a checkpoint")
    r.add_argument("--ckpt", required=True, type=Path)
    r.add_argument("--time", required=True, type=float)
    r.add_argument("--which", default="both", choices=("both", "static", "dynamic"))
    r.add_argument("--out", required=True, type=Path)
    r.add_argument("--camera", type=Path, help="camera JSON (default: nearest training view)")

    e = sub.add_parser("eval", help="per-frame PSNR/SSIM of a checkpoint")
    e.add_argument("--ckpt", required=True, type=Path)
    e.add_argument("--data", required=True, type=Path)
    e.add_argument("--out", required=True, type=Path)

    pr = sub.add_parser("prune-report", help="visibility scores of the static Gaussians")
    pr.add_argument("--ckpt", required=True, type=Path)
    pr.add_argument("--data", required=True, type=Path)
    pr.add_argument("--out", required=True, type=Path)
    return p


def _write_json(path, obj):
    atomic_write_bytes(path, (json.dumps(obj, indent=1) + "\n").encode())


def _config_for(args) -> TrainConfig:
    overrides = {k: v for k, v in (("seed", args.seed), ("precision", args.precision),
                                   ("dap_iters", args.dap_iters),
                                   ("stage1_iters", args.stage1_iters),
                                   ("stage2_iters", args.stage2_iters)) if v is not None}
    if args.config:
        return load_config(args.config, overrides)
    return TrainConfig.from_dict(overrides)


def _cmd_synth(args):
    w, h = args.res
    root = synth_scene(args.out, SynthSpec(width=w, height=h, frames=args.frames), args.seed)
    print(root)
    return 0


def _cmd_train(args, phases):
    dataset = check_dataset(args.data)
    args.out.mkdir(parents=True, exist_ok=True)
    log_file = args.out / "log.jsonl"
    if args.resume:
        trainer = Trainer.from_checkpoint(args.resume, dataset, args.out, log_file)
        if args.config or any(v is not None for v in (args.seed, args.precision, args.dap_iters,
                                                      args.stage1_iters, args.stage2_iters)):
            log.warning("--resume uses the checkpoint's configuration; other options ignored")
    else:
        cfg = _config_for(args)
        trainer = Trainer(initialize_scene(dataset, cfg), dataset, cfg, args.out, log_file)
    for phase in phases:
        trainer.run_phase(phase)
    ck = trainer.checkpoint()
    ck.meta["frames"] = [{"t": f.t, "camera": f.camera.to_dict()} for f in dataset.frames]
    save_checkpoint(args.out / CHECKPOINT_NAME, ck)
    metrics = evaluate(trainer.scene, dataset)
    rep = trainer.report
    _write_json(args.out / "report.json", {"events": rep.events, "wall_clock": rep.wall_clock,
                                           "mean_psnr": metrics["mean_psnr"],
                                           "mean_ssim": metrics["mean_ssim"],
                                           "counts": {"static": len(trainer.scene.static),
                                                      "dynamic": len(trainer.scene.dynamic)}})
    print(args.out / CHECKPOINT_NAME)
    return 0


def _load_scene(path):
    ck = load_checkpoint(path)
    return scene_from_arrays(ck.arrays, ck.meta["scene"]), ck


def _cmd_render(args):
    t = check_time(args.time)
    which = check_which(args.which)
    scene, ck = _load_scene(args.ckpt)
    if args.camera:
        cam = Camera.from_dict(json.loads(args.camera.read_text()))
    else:
        frames = ck.meta.get("frames")
        if not frames:
            raise InvalidParameterError("checkpoint stores no cameras; pass --camera")
        nearest = min(frames, key=lambda f: abs(f["t"] - t))
        cam = Camera.from_dict(nearest["camera"])
    out, _ = render_scene(scene, t, cam, which, ResolveOptions())
    write_png(args.out, np.clip(out.color, 0.0, 1.0))
    print(args.out)
    return 0


def _cmd_eval(args):
    scene, _ = _load_scene(args.ckpt)
    dataset = check_dataset(args.data, require_masks=False)
    metrics = evaluate(scene, dataset)
    _write_json(args.out, metrics)
    print(json.dumps({"mean_psnr": metrics["mean_psnr"], "mean_ssim": metrics["mean_ssim"]}))
    return 0


def _cmd_prune_report(args):
    scene, ck = _load_scene(args.ckpt)
    cfg = TrainConfig.from_dict(ck.meta["config"])
    dataset = check_dataset(args.data)
    stats = VisibilityStats.zeros(len(scene.static))
    for f in dataset.frames:
        out, tape = render_scene(scene, f.t, f.camera, STATIC_ONLY, ResolveOptions())
        accumulate_visibility(stats, *static_visibility(tape, out))
    remove, vbar, freq = prune_mask(stats, cfg.prune)
    lines = [json.dumps({"index": i, "vbar": float(vbar[i]), "freq": float(freq[i]),
                         "pruned": bool(remove[i])}) for i in range(len(vbar))]
    atomic_write_bytes(args.out, ("\n".join(lines) + ("\n" if lines else "")).encode())
    print(json.dumps({"static": len(vbar), "would_prune": int(remove.sum())}))
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        if args.command == "synth":
            return _cmd_synth(args)
        if args.command == "pretrain":
            return _cmd_train(args, ("dap",))
        if args.command == "train":
            return _cmd_train(args, ("dap", "stage1", "stage2"))
        if args.command == "render":
            return _cmd_render(args)
        if args.command == "eval":
            return _cmd_eval(args)
        return _cmd_prune_report(args)
    except (SplitGSError, OSError) as exc:
        print(f"splitgs {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
