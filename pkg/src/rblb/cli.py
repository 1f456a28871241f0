"""``rblb`` command line: blur, train, deblur, eval, gradcheck.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .blur_synth import CrfParams, average_blur, gen_linear_kernel, kernel_blur
from .checkpoint import CheckpointError, load_checkpoint
from .imageio import list_pngs, load_image, save_image
from .losses import LossWeights
from .metrics import evaluate_dirs
from .models import dbgan_generator_forward
from .training import ConfigMismatchError, TrainConfig, run_training

log = logging.getLogger("rblb")


def _sequences(root: Path) -> list[tuple[str, list[Path]]]:
    """PNGs directly in ``root`` form one sequence; otherwise each subdirectory does."""
    direct = list_pngs(root)
    if direct:
        return [(root.name, direct)]
    seqs = [(d.name, list_pngs(d)) for d in sorted(p for p in root.iterdir() if p.is_dir())]
    seqs = [(n, f) for n, f in seqs if f]
    if not seqs:
        raise FileNotFoundError(f"no PNG frames under {root}")
    return seqs


def cmd_blur(args) -> int:
    out = Path(args.output)
    (out / "blurry").mkdir(parents=True, exist_ok=True)
    (out / "sharp").mkdir(parents=True, exist_ok=True)
    crf = CrfParams(args.gamma)
    entries = []
    if args.mode == "average":
        stride = args.stride or args.window
        for name, frames in _sequences(Path(args.input)):
            for k, start in enumerate(range(0, len(frames) - args.window + 1, stride)):
                window = [load_image(p) for p in frames[start : start + args.window]]
                stem = f"{name}_{k:04d}.png"
                save_image(average_blur(window, crf), out / "blurry" / stem)
                save_image(window[args.window // 2], out / "sharp" / stem)
                entries.append({
                    "blurry": f"blurry/{stem}",
                    "sharp": f"sharp/{stem}",
                    "sequence": name,
                    "window": args.window,
                    "gamma": args.gamma,
                    "frames": [p.name for p in frames[start : start + args.window]],
                })
    else:
        rng = np.random.default_rng(args.seed)
        for i, path in enumerate(list_pngs(args.input)):
            angle = args.angle if args.angle is not None else float(rng.uniform(0, 180))
            spec = gen_linear_kernel(args.length, angle, args.noise_std)
            image = load_image(path)
            save_image(kernel_blur(image, spec, rng_seed=args.seed + i), out / "blurry" / path.name)
            save_image(image, out / "sharp" / path.name)
            entries.append({
                "blurry": f"blurry/{path.name}",
                "sharp": f"sharp/{path.name}",
                "length": args.length,
                "angle": angle,
            })
    if not entries:
        raise ValueError(f"no blurry images produced (fewer than {args.window} frames?)")
    manifest = {"mode": args.mode, "gamma": args.gamma, "window": args.window, "entries": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"wrote {len(entries)} pairs to {out}")
    return 0


_TRAIN_FLAGS = {
    "max_steps": "max_steps",
    "batch_size": "batch_size",
    "crop": "crop",
    "lr_start": "lr_start",
    "lr_end": "lr_end",
    "anneal_window": "anneal_window",
    "anneal_patience": "anneal_patience",
    "mix_ratio": "mix_ratio",
    "sharp_dir": "sharp_dir",
    "blurry_dir": "blurry_dir",
    "manifest": "paired_manifest",
    "bgan_checkpoint": "bgan_checkpoint",
    "init_checkpoint": "init_checkpoint",
    "checkpoint_every": "checkpoint_every",
    "content_mode": "content_mode",
    "seed": "seed",
}


def train_config_from_args(args) -> TrainConfig:
    """JSON config file (if any), then command-line overrides."""
    base = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.scale:
        base["desk_scale"] = args.scale == "desk"
    if base.get("desk_scale", True) and not args.config:
        base.setdefault("crop", 32)
    for flag, key in _TRAIN_FLAGS.items():
        value = getattr(args, flag)
        if value is not None:
            base[key] = value
    if args.stage:
        base["stage"] = args.stage.replace("-", "_")
    if args.ablation:
        base["ablation"] = args.ablation.replace("-", "_")
        if not args.stage:
            base["stage"] = "dbgan_plus" if base["ablation"] == "dbgan_plus" else "dbgan"
    elif base.get("stage") == "dbgan_plus":
        base["ablation"] = "dbgan_plus"
    weights = dict(base.get("weights") or {})
    for name in ("alpha", "beta"):
        if getattr(args, name) is not None:
            weights[name] = getattr(args, name)
    base["weights"] = LossWeights(**weights)
    return TrainConfig.from_dict(base)


def cmd_train(args) -> int:
    config = train_config_from_args(args)
    result = run_training(config, args.out, resume=args.resume)
    print(f"trained {result.steps} steps, lr {result.final_lr:.3g}; checkpoint {result.checkpoint}")
    return 0


def cmd_deblur(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    if "dbgan_g" not in ck.stores:
        raise ValueError(f"{args.checkpoint} holds no deblur generator")
    g = ck.stores["dbgan_g"]
    paths = list_pngs(args.input)
    if not paths:
        raise FileNotFoundError(f"no PNG images in {args.input}")
    out = Path(args.output)
    with g.frozen():
        for p in paths:
            save_image(dbgan_generator_forward(load_image(p), g), out / p.name)
    print(f"deblurred {len(paths)} images into {out}")
    return 0


def cmd_eval(args) -> int:
    result = evaluate_dirs(args.pred, args.target, peak_255=args.peak_255)
    result.write_csv(args.csv)
    print(f"PSNR {result.psnr_db:.4f} dB  SSIM {result.ssim:.4f}  ({len(result.rows)} images) -> {args.csv}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    groups = ("primitive", "composite") if args.group == "all" else (args.group,)
    results = run_suite(instances=args.instances, seed=args.seed, groups=groups)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rblb", description="Learn to blur, then to deblur.")
    p.add_argument("--seed", type=int, default=None, help="seed for all randomness")
    p.add_argument("-v", "--verbose", action="store_true")
    # --seed is accepted before or after the subcommand name
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("blur", parents=[common], help="synthesize blurry/sharp pairs")
    b.add_argument("--mode", choices=("average", "kernel"), default="average")
    b.add_argument("--input", required=True, help="frame sequence dir (average) or image dir (kernel)")
    b.add_argument("--output", required=True)
    b.add_argument("--window", type=int, default=7, help="frames averaged per blurry image")
    b.add_argument("--stride", type=int, default=None, help="frame step between windows")
    b.add_argument("--gamma", type=float, default=2.2)
    b.add_argument("--length", type=int, default=9, help="linear kernel length (kernel mode)")
    b.add_argument("--angle", type=float, default=None, help="kernel angle in degrees; random if unset")
    b.add_argument("--noise-std", type=float, default=0.0)
    b.set_defaults(func=cmd_blur)

    t = sub.add_parser("train", parents=[common], help="train one stage")
    t.add_argument("--stage", choices=("bgan", "dbgan", "dbgan-plus"))
    t.add_argument("--ablation", choices=("dbgan-minus", "dbgan", "dbgan-plus"))
    t.add_argument("--config", help="JSON file with TrainConfig fields")
    t.add_argument("--out", required=True, help="directory for checkpoints and metrics.csv")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--scale", choices=("desk", "paper"))
    t.add_argument("--max-steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--crop", type=int)
    t.add_argument("--lr-start", type=float)
    t.add_argument("--lr-end", type=float)
    t.add_argument("--anneal-window", type=int)
    t.add_argument("--anneal-patience", type=int)
    t.add_argument("--alpha", type=float)
    t.add_argument("--beta", type=float)
    t.add_argument("--mix-ratio", type=float)
    t.add_argument("--content-mode", choices=("mse", "l1"))
    t.add_argument("--sharp-dir")
    t.add_argument("--blurry-dir")
    t.add_argument("--manifest", help="paired manifest written by `rblb blur`")
    t.add_argument("--bgan-checkpoint")
    t.add_argument("--init-checkpoint")
    t.add_argument("--checkpoint-every", type=int)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("deblur", parents=[common], help="run a trained deblur generator over a directory")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--input", required=True)
    d.add_argument("--output", required=True)
    d.set_defaults(func=cmd_deblur)

    e = sub.add_parser("eval", parents=[common], help="PSNR/SSIM between same-named PNGs")
    e.add_argument("--pred", required=True)
    e.add_argument("--target", required=True)
    e.add_argument("--csv", required=True)
    e.add_argument("--peak-255", action="store_true", help="compute on the 0-255 scale")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suites")
    g.add_argument("--instances", type=int, default=20)
    g.add_argument("--group", choices=("all", "primitive", "composite"), default="all")
    g.set_defaults(func=cmd_gradcheck)
    return p


def _thread_limit():
    """RBLB_THREADS caps BLAS threads; 0 means single-threaded."""
    raw = os.environ.get("RBLB_THREADS")
    if raw is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(raw)))


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    # train leaves an unset seed to the config file; elsewhere it means 0
    if args.seed is None and args.command != "train":
        args.seed = 0
    try:
        with _thread_limit():
            return args.func(args)
    except (OSError, ValueError, CheckpointError, ConfigMismatchError) as exc:
        print(f"rblb {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
