"""Physically motivated blur synthesis.

Frames observed through a gamma camera response are linearised, averaged
and re-encoded; alternatively a sharp image is convolved with a point
spread function and corrupted with Gaussian noise. The noise map that
conditions the blur generator also lives here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numerics import Tensor, conv2d, pow_scalar

RANGE_TOL = 1e-6
KERNEL_SUM_TOL = 1e-6


@dataclass(frozen=True)
class CrfParams:
    gamma: float = 2.2

    def __post_init__(self):
        if not 1.0 <= self.gamma <= 4.0:
            raise ValueError(f"gamma must lie in [1, 4], got {self.gamma}")


@dataclass(frozen=True)
class BlurKernelSpec:
    kernel: np.ndarray
    noise_std: float = 0.0

    def __post_init__(self):
        k = np.asarray(self.kernel, dtype=np.float64)
        if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
            raise ValueError(f"kernel must be square with odd size, got shape {k.shape}")
        if np.any(k < 0):
            raise ValueError("kernel has negative weights")
        if abs(k.sum() - 1.0) > KERNEL_SUM_TOL:
            raise ValueError(f"kernel must sum to 1, sums to {k.sum():.8f}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        object.__setattr__(self, "kernel", k)


@dataclass(frozen=True)
class NoiseMap:
    values: np.ndarray = field(repr=False)
    source_vector: np.ndarray
    seed: int

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape


def _check_unit_range(t: Tensor, what: str) -> None:
    lo, hi = float(t.data.min()), float(t.data.max())
    if lo < -RANGE_TOL or hi > 1.0 + RANGE_TOL:
        raise ValueError(f"{what} must lie in [0, 1], got range [{lo:.6g}, {hi:.6g}]")


def _clip_unit(t: Tensor) -> Tensor:
    # tolerance-level excursions only; differentiable passthrough is unnecessary here
    if float(t.data.min()) >= 0.0 and float(t.data.max()) <= 1.0:
        return t
    return Tensor(np.clip(t.data, 0.0, 1.0), requires_grad=t.requires_grad)


def apply_crf(linear: Tensor, crf: CrfParams) -> Tensor:
    """Linear irradiance to observed intensity: ``x ** (1 / gamma)``."""
    _check_unit_range(linear, "apply_crf input")
    return pow_scalar(_clip_unit(linear), 1.0 / crf.gamma)


def invert_crf(observed: Tensor, crf: CrfParams) -> Tensor:
    """Observed intensity back to linear irradiance: ``x ** gamma``."""
    _check_unit_range(observed, "invert_crf input")
    return pow_scalar(_clip_unit(observed), crf.gamma)


def average_blur(frames: Sequence[Tensor], crf: CrfParams) -> Tensor:
    """Blur by averaging frames in linear space, then re-encoding.

    Per-pixel linear values are sorted before summation so the result is
    bit-identical under any reordering of ``frames``.
    """
    if not frames:
        raise ValueError("average_blur needs at least one frame")
    shape = frames[0].shape
    for i, f in enumerate(frames):
        if f.shape != shape:
            raise ValueError(f"frame {i} has shape {f.shape}, expected {shape}")
    lin = np.stack([invert_crf(Tensor(f.data.astype(np.float64)), crf).data for f in frames])
    lin.sort(axis=0)
    mean = np.clip(lin.sum(axis=0) / len(frames), 0.0, 1.0)
    return Tensor(apply_crf(Tensor(mean), crf).data.astype(frames[0].dtype))


def kernel_blur(image: Tensor, spec: BlurKernelSpec, rng_seed: int = 0) -> Tensor:
    """``clip(K * I + N)`` with the kernel applied to each channel separately."""
    _check_unit_range(image, "kernel_blur input")
    n, c, h, w = image.shape
    k = spec.kernel.shape[0]
    flat = Tensor(image.data.reshape(n * c, 1, h, w))
    kern = Tensor(spec.kernel.astype(image.dtype).reshape(1, 1, k, k))
    out = conv2d(flat, kern, padding="reflect").data.reshape(n, c, h, w)
    if spec.noise_std > 0:
        rng = np.random.default_rng(rng_seed)
        out = out + rng.normal(0.0, spec.noise_std, size=out.shape)
    return Tensor(np.clip(out, 0.0, 1.0).astype(image.dtype))


def gen_linear_kernel(length: int, angle_deg: float, noise_std: float = 0.0) -> BlurKernelSpec:
    """Line-segment PSF of odd ``length`` pixels through the kernel centre.

    The segment spans ``length`` pixel widths; it is sampled at ``8 * length``
    evenly spaced points and each sample lands on its nearest pixel.
    ``angle_deg`` is counter-clockwise from the +x axis (rows grow downward),
    so 45 degrees fills the anti-diagonal.
    """
    if length < 1 or length % 2 == 0:
        raise ValueError(f"kernel length must be a positive odd integer, got {length}")
    c = length // 2
    theta = math.radians(angle_deg)
    dx, dy = math.cos(theta), -math.sin(theta)
    n = 8 * length
    t = -length / 2.0 + (np.arange(n) + 0.5) * (length / n)
    cols = np.floor(c + t * dx + 0.5).astype(int)
    rows = np.floor(c + t * dy + 0.5).astype(int)
    kern = np.zeros((length, length))
    np.add.at(kern, (rows, cols), 1.0)
    return BlurKernelSpec(kern / kern.sum(), noise_std)


def make_noise_map(seed: int, channels: int = 4, h: int = 128, w: int = 128) -> NoiseMap:
    """Standard-normal vector of length ``channels`` repeated over H x W."""
    if channels < 1 or h < 1 or w < 1:
        raise ValueError(f"noise map dimensions must be positive, got {channels}x{h}x{w}")
    vec = np.random.default_rng(seed).standard_normal(channels).astype(np.float32)
    values = np.broadcast_to(vec[:, None, None], (channels, h, w)).copy()
    return NoiseMap(values=values, source_vector=vec, seed=seed)


def stack_noise(maps: Sequence[NoiseMap]) -> Tensor:
    """Batch noise maps into an N x C_n x H x W tensor."""
    return Tensor(np.stack([m.values for m in maps]))
