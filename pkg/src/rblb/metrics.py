"""PSNR and block SSIM, plus directory-level evaluation with a CSV report."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import Tensor

PSNR_CAP = 100.0


def _arr(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def psnr(a, b, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)``; identical inputs give 100."""
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes {a.shape} and {b.shape} differ")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def ssim(a, b, peak: float = 1.0, window: int = 8) -> float:
    """Mean SSIM over non-overlapping ``window`` x ``window`` blocks and channels.

    Accepts H x W, C x H x W or N x C x H x W. Trailing rows/columns that
    do not fill a block are ignored.
    """
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shapes {a.shape} and {b.shape} differ")
    h, w = a.shape[-2:]
    if h < window or w < window:
        raise ValueError(f"ssim: image {h}x{w} smaller than window {window}")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    hb, wb = h // window, w // window
    lead = a.shape[:-2]

    def blocks(x):
        x = x[..., : hb * window, : wb * window]
        x = x.reshape(lead + (hb, window, wb, window))
        return np.moveaxis(x, -3, -2).reshape(lead + (hb, wb, window * window))

    ba, bb = blocks(a), blocks(b)
    mu_a, mu_b = ba.mean(-1), bb.mean(-1)
    var_a = ba.var(-1)
    var_b = bb.var(-1)
    cov = ((ba - mu_a[..., None]) * (bb - mu_b[..., None])).mean(-1)
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class MetricResult:
    rows: list[tuple[str, float, float]] = field(default_factory=list)

    @property
    def psnr_db(self) -> float:
        return float(np.mean([r[1] for r in self.rows])) if self.rows else float("nan")

    @property
    def ssim(self) -> float:
        return float(np.mean([r[2] for r in self.rows])) if self.rows else float("nan")

    def write_csv(self, path: str | Path) -> Path:
        """Per-image rows sorted by name, then a ``mean`` row."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image", "psnr_db", "ssim"])
            for name, p, s in sorted(self.rows):
                w.writerow([name, repr(p), repr(s)])
            w.writerow(["mean", repr(self.psnr_db), repr(self.ssim)])
        return path


def evaluate_dirs(pred_dir, target_dir, peak_255: bool = False) -> MetricResult:
    """Compare same-named PNGs in two directories."""
    from .imageio import list_pngs, load_image

    preds = {p.name: p for p in list_pngs(pred_dir)}
    targets = {p.name: p for p in list_pngs(target_dir)}
    missing = sorted(set(preds) ^ set(targets))
    if missing:
        raise ValueError(f"unmatched images between directories: {missing}")
    if not preds:
        raise ValueError(f"no PNG images in {pred_dir}")
    scale, peak = (255.0, 255.0) if peak_255 else (1.0, 1.0)
    result = MetricResult()
    for name in sorted(preds):
        a = load_image(preds[name]).data.astype(np.float64) * scale
        b = load_image(targets[name]).data.astype(np.float64) * scale
        result.rows.append((name, psnr(a, b, peak), ssim(a, b, peak)))
    return result
