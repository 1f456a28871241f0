"""Image pools for training and a procedural scene generator for demos and tests."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .blur_synth import CrfParams, average_blur
from .numerics import Tensor


@dataclass
class Dataset:
    """Images as float32 arrays of shape 3 x H x W in [0, 1].

    ``sharp`` and ``blurry`` are unpaired pools; ``pairs`` holds
    (blurry, sharp) tuples.
    """

    sharp: list[np.ndarray] = field(default_factory=list)
    blurry: list[np.ndarray] = field(default_factory=list)
    pairs: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)


def synthetic_scene(seed: int, h: int, w: int) -> np.ndarray:
    """Piecewise-smooth RGB scene: a colour gradient, rectangles, discs and stripes."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.empty((3, h, w))
    base = rng.uniform(0.2, 0.8, size=3)
    tilt = rng.uniform(-0.3, 0.3, size=(3, 2))
    for ch in range(3):
        img[ch] = base[ch] + tilt[ch, 0] * yy / h + tilt[ch, 1] * xx / w
    for _ in range(rng.integers(3, 7)):
        color = rng.uniform(0, 1, size=3)
        if rng.random() < 0.5:
            y0, x0 = rng.integers(0, h), rng.integers(0, w)
            y1, x1 = y0 + rng.integers(h // 8, h // 2), x0 + rng.integers(w // 8, w // 2)
            mask = (yy >= y0) & (yy < y1) & (xx >= x0) & (xx < x1)
        else:
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            r = rng.uniform(min(h, w) / 10, min(h, w) / 3)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        img[:, mask] = color[:, None]
    period = rng.uniform(4, 12)
    angle = rng.uniform(0, np.pi)
    stripes = 0.5 + 0.5 * np.sin((xx * np.cos(angle) + yy * np.sin(angle)) * 2 * np.pi / period)
    img = 0.8 * img + 0.2 * stripes[None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def motion_frames(
    scene: np.ndarray, n_frames: int, size: tuple[int, int], step: tuple[int, int] = (0, 1)
) -> list[np.ndarray]:
    """Crops of ``scene`` translated by ``step`` pixels per frame (camera pan)."""
    h, w = size
    dy, dx = step
    frames = []
    for t in range(n_frames):
        y, x = t * dy, t * dx
        if y + h > scene.shape[1] or x + w > scene.shape[2] or y < 0 or x < 0:
            raise ValueError("scene too small for the requested motion")
        frames.append(scene[:, y : y + h, x : x + w].copy())
    return frames


def blurred_pair(
    frames: Sequence[np.ndarray], crf: CrfParams
) -> tuple[np.ndarray, np.ndarray]:
    """(blurry, sharp) with the middle frame as the sharp target."""
    blurry = average_blur([Tensor(f[None]) for f in frames], crf).data[0]
    return blurry, frames[len(frames) // 2]


def synthetic_pairs(
    n: int, size: int = 32, window: int = 7, gamma: float = 2.2, seed: int = 0
) -> list[tuple[np.ndarray, np.ndarray]]:
    crf = CrfParams(gamma)
    out = []
    for i in range(n):
        scene = synthetic_scene(seed * 100_003 + i, size, size + window - 1)
        out.append(blurred_pair(motion_frames(scene, window, (size, size)), crf))
    return out


def load_dataset(
    sharp_dir: str | Path | None = None,
    blurry_dir: str | Path | None = None,
    paired_manifest: str | Path | None = None,
) -> Dataset:
    from .imageio import list_pngs, load_image

    ds = Dataset()
    if sharp_dir:
        ds.sharp = [load_image(p).data[0] for p in list_pngs(sharp_dir)]
    if blurry_dir:
        ds.blurry = [load_image(p).data[0] for p in list_pngs(blurry_dir)]
    if paired_manifest:
        manifest_path = Path(paired_manifest)
        entries = json.loads(manifest_path.read_text())["entries"]
        root = manifest_path.parent
        for e in entries:
            b = load_image(root / e["blurry"]).data[0]
            s = load_image(root / e["sharp"]).data[0]
            ds.pairs.append((b, s))
    return ds
