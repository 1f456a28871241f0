"""8-bit RGB PNG <-> 1 x 3 x H x W float tensors."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .numerics import Tensor


class ImageFormatError(ValueError):
    pass


def load_image(path: str | Path) -> Tensor:
    """Bytes ``v`` map to exactly ``v / 255`` (float32)."""
    with Image.open(path) as im:
        if im.format != "PNG":
            raise ImageFormatError(f"{path}: expected PNG, got {im.format}")
        if im.mode != "RGB":
            raise ImageFormatError(f"{path}: expected 8-bit RGB, got mode {im.mode}")
        arr = np.asarray(im, dtype=np.uint8)
    return Tensor((arr.astype(np.float32) / np.float32(255.0)).transpose(2, 0, 1)[None].copy())


def to_bytes(values: np.ndarray) -> np.ndarray:
    """Round half away from zero on the 0-255 scale, after clipping to [0, 1]."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(v + 0.5).astype(np.uint8)


def save_image(t: Tensor | np.ndarray, path: str | Path) -> Path:
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if data.ndim == 4:
        if data.shape[0] != 1:
            raise ValueError(f"save_image takes one image, got batch of {data.shape[0]}")
        data = data[0]
    if data.ndim != 3 or data.shape[0] != 3:
        raise ValueError(f"save_image expects 3 x H x W, got {data.shape}")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(to_bytes(data).transpose(1, 2, 0), mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def list_pngs(directory: str | Path) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"not a directory: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() == ".png")
