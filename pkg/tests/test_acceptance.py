"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

The lines are repeated in the terminal summary under "acceptance criteria".
"""

import csv
import json
import math
import time

import numpy as np
import pytest
from PIL import Image

from rblb.blur_synth import CrfParams, apply_crf, average_blur, gen_linear_kernel, invert_crf, kernel_blur
from rblb.checkpoint import load_checkpoint, save_checkpoint
from rblb.cli import main
from rblb.datasets import Dataset, motion_frames, synthetic_pairs, synthetic_scene
from rblb.gradsuite import run_suite
from rblb.imageio import save_image
from rblb.losses import LossWeights, relativistic_loss
from rblb.metrics import psnr
from rblb.models import bgan_generator_forward, dbgan_generator_forward
from rblb.blur_synth import make_noise_map
from rblb.numerics import Tensor
from rblb.training import TrainConfig, Trainer, ablation_config, run_training

import oracles

pytestmark = pytest.mark.slow


def test_criterion_1_gradient_suite(acceptance):
    start = time.perf_counter()
    results = run_suite(instances=20, seed=0)
    elapsed = time.perf_counter() - start
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    worst_p = max(r.max_error for r in results if r.group == "primitive")
    worst_c = max(r.max_error for r in results if r.group == "composite")
    acceptance(
        1, "gradient suite",
        not failed and elapsed < 120 and all(r.instances >= 20 for r in results),
        f"{len(results) - len(failed)}/{len(results)} checks, worst primitive {worst_p:.1e}, "
        f"worst composite {worst_c:.1e}, {elapsed:.0f}s",
    )


def test_criterion_2_relativistic_closed_forms(acceptance):
    two_ln2 = 2 * math.log(2)
    rng = np.random.default_rng(2)
    errs = []
    for role in ("generator", "discriminator"):
        for c in (-3.0, 0.0, 0.7, 12.0):
            x = Tensor(np.full(5, c, np.float32))
            errs.append(abs(relativistic_loss(x, x, role).item() - two_ln2))
    equal = max(errs)
    shift = 0.0
    for _ in range(20):
        real, fake = rng.normal(size=6), rng.normal(size=6)
        c = rng.uniform(-10, 10)
        for role in ("generator", "discriminator"):
            base = relativistic_loss(Tensor(real), Tensor(fake), role).item()
            shift = max(shift, abs(relativistic_loss(Tensor(real + c), Tensor(fake + c), role).item() - base))
    want = oracles.relativistic_generator([2.0, 0.0], [-1.0, 1.0])
    two_item = abs(relativistic_loss(Tensor(np.float32([2, 0])), Tensor(np.float32([-1, 1]))).item() - want)
    acceptance(
        2, "relativistic closed forms",
        max(equal, shift, two_item) <= 1e-6,
        f"equal logits {equal:.1e}, shift {shift:.1e}, two-item {two_item:.1e}",
    )


def test_criterion_3_blur_oracles(acceptance):
    rng = np.random.default_rng(3)
    crf = CrfParams(2.2)
    x = Tensor(rng.uniform(0, 1, (2, 3, 8, 8)))
    round_trip = float(np.max(np.abs(invert_crf(apply_crf(x, crf), crf).data - x.data)))

    const_err = 0.0
    for values in ([0.2, 0.8], [0.0, 1.0], [0.1, 0.4, 0.9, 0.3, 0.5, 0.6, 0.7]):
        frames = [Tensor(np.full((1, 3, 4, 4), v)) for v in values]
        out = average_blur(frames, crf).data
        const_err = max(const_err, float(np.max(np.abs(out - oracles.average_blur_scalar(values, 2.2)))))

    img = rng.uniform(0, 1, (1, 3, 9, 10))
    kern_err = 0.0
    for length, angle in ((3, 0.0), (5, 30.0), (7, 90.0), (9, 135.0)):
        spec = gen_linear_kernel(length, angle)
        want = np.concatenate([oracles.naive_conv2d(img[:, c : c + 1], spec.kernel[None, None]) for c in range(3)], 1)
        got = kernel_blur(Tensor(img), spec).data
        kern_err = max(kern_err, float(np.max(np.abs(got - np.clip(want, 0, 1)))))
    acceptance(
        3, "blur-synthesis oracles",
        round_trip <= 1e-6 and const_err <= 1e-6 and kern_err <= 1e-5,
        f"CRF round trip {round_trip:.1e}, average_blur {const_err:.1e}, kernel_blur {kern_err:.1e}",
    )


# Content-only overfit on 8 fixed pairs blurred over 5 frames.
OVERFIT = dict(
    stage="dbgan", batch_size=8, lr_start=1e-3, anneal_window=50, anneal_patience=2,
    max_steps=2000, flip=False, sampling="cycle",
    weights=LossWeights(alpha=1.0, beta=0.0, perceptual=0.0),
)


def test_criterion_4_overfit(acceptance):
    pairs = synthetic_pairs(8, 32, 5, seed=1)
    blurry = Tensor(np.stack([b for b, _ in pairs]))
    sharp = np.stack([s for _, s in pairs])
    config = TrainConfig.desk(**OVERFIT)
    spec = config.network_spec("dbgan_generator")
    assert (spec.num_resblocks, spec.channels) == (4, 16)
    trainer = Trainer(config, Dataset(pairs=pairs))
    start = time.perf_counter()
    best = psnr(blurry.data, sharp)
    print(f"input PSNR {best:.2f} dB")
    while not trainer.finished:
        trainer.observe(trainer.train_step()[1].total)
        if trainer.step % 250 == 0 or trainer.finished:
            with trainer.g.frozen():
                best = psnr(dbgan_generator_forward(blurry, trainer.g).data, sharp)
            print(f"step {trainer.step}: train PSNR {best:.2f} dB")
            if best >= 35.0:
                break
    elapsed = time.perf_counter() - start
    acceptance(
        4, "overfit sanity",
        best >= 35.0 and trainer.step <= 2000 and elapsed <= 600,
        f"train PSNR {best:.2f} dB after {trainer.step} steps, {elapsed:.0f}s",
    )


# 16 sharp patches; the real-blurry pool is those scenes blurred over 7 frames.
# Plateau annealing is off; lr steps down once at BGAN_DROP_AT instead.
BGAN = dict(
    stage="bgan", batch_size=8, lr_start=1e-4, lr_end=1e-7, d_lr_scale=3.0,
    anneal_patience=100000, max_steps=2000, weights=LossWeights(beta=0.002),
)
BGAN_DROP_AT, BGAN_DROP_LR = 1250, 1e-5


def test_criterion_5_bgan_conditioning(acceptance):
    pairs = synthetic_pairs(16, 32, 7, seed=10)
    sharp = np.stack([s for _, s in pairs])
    blurred = np.stack([b for b, _ in pairs])
    trainer = Trainer(TrainConfig.desk(**BGAN), Dataset(sharp=list(sharp), blurry=list(blurred)))
    while not trainer.finished:
        if trainer.step == BGAN_DROP_AT:
            trainer.lr = BGAN_DROP_LR
        trainer.train_step()

    def render(seed):
        noise = [make_noise_map(seed * 100 + i, 4, 32, 32) for i in range(len(sharp))]
        with trainer.g.frozen():
            return bgan_generator_forward(Tensor(sharp), noise, trainer.g).data

    first, second = render(1), render(2)
    mse_g = float(np.mean((first - blurred) ** 2))
    mse_s = float(np.mean((sharp - blurred) ** 2))
    spread = float(np.mean(np.abs(first - second)))
    acceptance(
        5, "BGAN conditioning",
        mse_g < mse_s and spread > 1e-4,
        f"MSE(G, blurred) {mse_g:.5f} vs MSE(sharp, blurred) {mse_s:.5f}, "
        f"noise spread {spread:.1e}, {trainer.step} steps",
    )


def test_criterion_6_ablation_harness(acceptance, tmp_path):
    base = TrainConfig.desk(batch_size=2, max_steps=3, seed=6)
    configs = {v: ablation_config(base, v) for v in ("dbgan_minus", "dbgan", "dbgan_plus")}
    dicts = {v: c.to_dict() for v, c in configs.items()}
    diff = {k for a in dicts.values() for b in dicts.values() for k in a if a[k] != b[k]}

    pairs = synthetic_pairs(4, 32, 5, seed=6)
    paired = Dataset(pairs=pairs)
    unpaired = Dataset(sharp=[s for _, s in pairs], blurry=[b for b, _ in pairs])
    bgan = run_training(TrainConfig.desk(stage="bgan", batch_size=2, max_steps=3, seed=6),
                        tmp_path / "bgan", dataset=unpaired)
    kinds, finite = {}, True
    for variant, config in configs.items():
        if variant == "dbgan_plus":
            from dataclasses import replace

            config = replace(config, bgan_checkpoint=str(bgan.checkpoint))
        trainer = Trainer(config, paired)
        d_rep, g_rep = trainer.train_step()
        kinds[variant] = g_rep.adversarial_kind
        res = run_training(config, tmp_path / variant, dataset=paired)
        finite &= res.steps == 3 and all(math.isfinite(v) for v in (d_rep.total, g_rep.total))
    ok = (
        diff == {"stage", "ablation"}
        and kinds == {"dbgan_minus": "standard", "dbgan": "relativistic", "dbgan_plus": "relativistic"}
        and finite
    )
    acceptance(6, "ablation harness", ok, f"differing fields {sorted(diff)}, adversarial {kinds}")


def test_criterion_7_determinism_and_persistence(acceptance, tmp_path):
    pairs = synthetic_pairs(4, 32, 5, seed=7)
    ds = Dataset(pairs=pairs)
    config = TrainConfig.desk(batch_size=2, max_steps=6, checkpoint_every=3, seed=7)
    a = run_training(config, tmp_path / "a", dataset=ds)
    b = run_training(config, tmp_path / "b", dataset=ds)
    identical = a.checkpoint.read_bytes() == b.checkpoint.read_bytes()
    resumed = run_training(config, tmp_path / "c", dataset=ds, resume=tmp_path / "a" / "ckpt_dbgan_3.rblb")
    resume_ok = resumed.checkpoint.read_bytes() == a.checkpoint.read_bytes()
    ck = load_checkpoint(a.checkpoint)
    again = save_checkpoint(tmp_path / "again.rblb", ck.stores, ck.metadata, ck.arrays)
    round_trip = again.read_bytes() == a.checkpoint.read_bytes() and all(
        ck.stores[s][k].data.tobytes() == a.trainer.g[k].data.tobytes()
        for s in ("dbgan_g",) for k in ck.stores[s]
    )
    acceptance(
        7, "determinism and persistence",
        identical and resume_ok and round_trip,
        f"same seed identical={identical}, 3+3 resume identical={resume_ok}, round trip={round_trip}",
    )


def _corpus(root, n=8, frames=7, size=32):
    for i in range(n):
        scene = synthetic_scene(800 + i, size, size + frames)
        for t, frame in enumerate(motion_frames(scene, frames, (size, size))):
            save_image(frame, root / f"seq{i}" / f"f{t:02d}.png")
    return root


def test_criterion_8_cli_end_to_end(acceptance, tmp_path):
    start = time.perf_counter()
    frames = _corpus(tmp_path / "frames")
    pairs, run, out = tmp_path / "pairs", tmp_path / "run", tmp_path / "deblurred"
    codes = [
        main(["--seed", "8", "blur", "--input", str(frames), "--output", str(pairs)]),
        main(["--seed", "8", "train", "--stage", "dbgan", "--manifest", str(pairs / "manifest.json"),
              "--out", str(run), "--max-steps", "50", "--batch-size", "4"]),
        main(["deblur", "--checkpoint", str(run / "ckpt_dbgan_50.rblb"),
              "--input", str(pairs / "blurry"), "--output", str(out)]),
        main(["eval", "--pred", str(out), "--target", str(pairs / "sharp"), "--csv", str(tmp_path / "m.csv")]),
    ]
    elapsed = time.perf_counter() - start
    pngs = sorted(out.glob("*.png"))
    valid = len(pngs) == 8 and all(
        Image.open(p).format == "PNG" and Image.open(p).mode == "RGB" and Image.open(p).size == (32, 32)
        for p in pngs
    )
    rows = list(csv.reader((tmp_path / "m.csv").open()))
    body = np.array([[float(v) for v in r[1:]] for r in rows[1:-1]])
    mean = np.array([float(v) for v in rows[-1][1:]])
    csv_ok = rows[-1][0] == "mean" and len(body) == 8 and np.allclose(mean, body.mean(0), atol=1e-9, rtol=0)
    entries = len(json.loads((pairs / "manifest.json").read_text())["entries"])
    acceptance(
        8, "CLI end-to-end",
        codes == [0, 0, 0, 0] and valid and csv_ok and entries == 8 and elapsed < 300,
        f"exit codes {codes}, {len(pngs)} PNGs, mean PSNR {mean[0]:.2f} dB, {elapsed:.0f}s",
    )
