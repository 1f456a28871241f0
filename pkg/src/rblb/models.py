"""Generators, discriminator and the frozen perceptual feature stack."""

from __future__ import annotations

import hashlib
import json
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator, Mapping

import numpy as np

from .blur_synth import NoiseMap
from .numerics import (
    Tensor,
    concat_channels,
    conv2d,
    logit,
    reduce_mean,
    relu,
    reshape,
    sigmoid,
)

KINDS = ("bgan_generator", "dbgan_generator", "discriminator", "feature_extractor")
INIT_STD = 0.01
# generator inputs are clipped to [SKIP_EPS, 1 - SKIP_EPS] before the logit-space skip
SKIP_EPS = 1e-3
IMAGE_CHANNELS = 3

# (out_channels, stride) per stage of the perceptual feature stack
FEATURE_LAYOUT = ((8, 1), (16, 2), (16, 2), (16, 1))


@dataclass(frozen=True)
class NetworkSpec:
    kind: str
    num_resblocks: int = 4
    channels: int = 16
    convs_per_resblock: int = 5
    noise_channels: int = 4
    disc_depth: int = 3
    scale_preset: str = "desk"
    padding: str = "reflect"
    image_skip: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown network kind {self.kind!r}")
        if self.scale_preset not in ("paper", "desk", "custom"):
            raise ValueError(f"unknown scale preset {self.scale_preset!r}")
        if self.channels < 1 or self.num_resblocks < 0 or self.convs_per_resblock < 1:
            raise ValueError(f"invalid network dimensions in {self}")

    @classmethod
    def preset(cls, kind: str, scale: str = "desk") -> "NetworkSpec":
        if scale == "paper":
            blocks = {"bgan_generator": 9, "dbgan_generator": 16}.get(kind, 0)
            return cls(kind, num_resblocks=blocks, channels=64, disc_depth=5, scale_preset="paper")
        if scale == "desk":
            blocks = 4 if kind in ("bgan_generator", "dbgan_generator") else 0
            return cls(kind, num_resblocks=blocks, channels=16, disc_depth=3, scale_preset="desk")
        raise ValueError(f"unknown scale preset {scale!r}")

    @property
    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetworkSpec":
        return cls(**d)


@dataclass
class ParamStore:
    """Named weights of one network; iteration is sorted by name."""

    spec: NetworkSpec
    seed: int
    params: dict[str, Tensor] = field(default_factory=dict)

    @property
    def spec_hash(self) -> str:
        return self.spec.hash

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self.params))

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return [(k, self.params[k]) for k in sorted(self.params)]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    @contextmanager
    def frozen(self):
        """Temporarily exclude these parameters from gradient recording."""
        flags = {k: t.requires_grad for k, t in self.params.items()}
        for t in self.params.values():
            t.requires_grad = False
        try:
            yield self
        finally:
            for k, t in self.params.items():
                t.requires_grad = flags[k]

    def block(self, prefix: str) -> dict[str, Tensor]:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    def copy(self) -> "ParamStore":
        return ParamStore(
            self.spec,
            self.seed,
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()},
        )

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())


def _layer_shapes(spec: NetworkSpec) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(name, cout, cin, k=3):
        shapes[f"{name}.weight"] = (cout, cin, k, k)
        shapes[f"{name}.bias"] = (cout,)

    c = spec.channels
    if spec.kind in ("bgan_generator", "dbgan_generator"):
        cin = IMAGE_CHANNELS + (spec.noise_channels if spec.kind == "bgan_generator" else 0)
        conv("head", c, cin)
        for b in range(spec.num_resblocks):
            for j in range(spec.convs_per_resblock):
                conv(f"res{b:02d}.conv{j}", c, c)
        conv("tail1", c, c)
        conv("tail2", IMAGE_CHANNELS, c)
    elif spec.kind == "discriminator":
        cin = IMAGE_CHANNELS
        for i in range(spec.disc_depth):
            cout = c * 2 ** min(i, 3)
            conv(f"stage{i}", cout, cin)
            cin = cout
        conv("fc", 1, cin, k=1)
    else:
        cin = IMAGE_CHANNELS
        for i, (cout, _) in enumerate(FEATURE_LAYOUT):
            conv(f"stage{i}", cout, cin)
            cin = cout
    return shapes


def init_params(spec: NetworkSpec, seed: int) -> ParamStore:
    """Weights from N(0, 0.01^2), zero biases; deterministic in ``seed``.

    The frozen feature extractor instead uses He-scaled weights so its
    activations keep the input's magnitude.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in sorted(_layer_shapes(spec).items()):
        if name.endswith(".bias"):
            arr = np.zeros(shape, dtype=np.float32)
        else:
            std = INIT_STD
            if spec.kind == "feature_extractor":
                std = float(np.sqrt(2.0 / np.prod(shape[1:])))
            arr = rng.normal(0.0, std, size=shape).astype(np.float32)
        params[name] = Tensor(arr, requires_grad=spec.kind != "feature_extractor", name=name)
    return ParamStore(spec, seed, params)


def _conv(x: Tensor, p: Mapping[str, Tensor], name: str, padding: str, stride: int = 1) -> Tensor:
    return conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], padding=padding, stride=stride)


def resblock_forward(x: Tensor, block: Mapping[str, Tensor], padding: str = "reflect") -> Tensor:
    """``x + F(x)``, F being convs with a ReLU between consecutive pairs."""
    n_convs = sum(1 for k in block if k.endswith(".weight"))
    want = block["conv0.weight"].shape[1]
    if x.shape[1] != want:
        raise ValueError(f"resblock expects {want} channels, got {x.shape[1]}")
    h = x
    for j in range(n_convs):
        h = _conv(h, block, f"conv{j}", padding)
        if j < n_convs - 1:
            h = relu(h)
    return x + h


def _generator_body(x: Tensor, image: Tensor, params: ParamStore, long_skip: bool) -> Tensor:
    spec = params.spec
    pad = spec.padding
    h = _conv(x, params.params, "head", pad)
    skip = h
    for b in range(spec.num_resblocks):
        h = resblock_forward(h, params.block(f"res{b:02d}"), pad)
    if long_skip:
        h = h + skip
    h = relu(_conv(h, params.params, "tail1", pad))
    r = _conv(h, params.params, "tail2", pad)
    if spec.image_skip:
        r = r + logit(image, SKIP_EPS)
    return sigmoid(r)


def _check_image(t: Tensor, what: str) -> None:
    if t.data.ndim != 4 or t.shape[1] != IMAGE_CHANNELS:
        raise ValueError(f"{what} expects N x 3 x H x W, got {t.shape}")


def noise_tensor(noise, n: int) -> Tensor:
    """Accept one NoiseMap (shared by the batch), a list of them, or a tensor."""
    if isinstance(noise, Tensor):
        return noise
    if isinstance(noise, NoiseMap):
        return Tensor(np.broadcast_to(noise.values, (n,) + noise.shape).copy())
    return Tensor(np.stack([m.values for m in noise]))


def bgan_generator_forward(sharp: Tensor, noise, params: ParamStore) -> Tensor:
    """Blurry rendition of ``sharp`` conditioned on a spatially constant noise map."""
    if params.spec.kind != "bgan_generator":
        raise ValueError(f"expected bgan_generator params, got {params.spec.kind}")
    _check_image(sharp, "bgan generator")
    nz = noise_tensor(noise, sharp.shape[0])
    if nz.shape[0] != sharp.shape[0] or nz.shape[2:] != sharp.shape[2:]:
        raise ValueError(f"noise map {nz.shape} does not match image {sharp.shape}")
    if nz.shape[1] != params.spec.noise_channels:
        raise ValueError(
            f"noise map has {nz.shape[1]} channels, generator expects {params.spec.noise_channels}"
        )
    return _generator_body(concat_channels(sharp, nz), sharp, params, long_skip=False)


def dbgan_generator_forward(blurry: Tensor, params: ParamStore) -> Tensor:
    if params.spec.kind != "dbgan_generator":
        raise ValueError(f"expected dbgan_generator params, got {params.spec.kind}")
    _check_image(blurry, "dbgan generator")
    return _generator_body(blurry, blurry, params, long_skip=True)


@dataclass
class DiscriminatorOutput:
    logit: Tensor
    probability: Tensor


def discriminator_forward(image: Tensor, params: ParamStore) -> DiscriminatorOutput:
    spec = params.spec
    if spec.kind != "discriminator":
        raise ValueError(f"expected discriminator params, got {spec.kind}")
    _check_image(image, "discriminator")
    need = 2**spec.disc_depth
    if min(image.shape[2:]) < need:
        raise ValueError(
            f"discriminator of depth {spec.disc_depth} needs H, W >= {need}, got {image.shape[2:]}"
        )
    h = image
    for i in range(spec.disc_depth):
        h = relu(_conv(h, params.params, f"stage{i}", spec.padding, stride=2))
    pooled = reduce_mean(h, over="spatial")
    logit = reshape(_conv(pooled, params.params, "fc", spec.padding), (image.shape[0],))
    return DiscriminatorOutput(logit=logit, probability=sigmoid(logit))


def feature_forward(image: Tensor, params: ParamStore) -> Tensor:
    """Pre-activation output of the last feature stage."""
    h = image
    last = len(FEATURE_LAYOUT) - 1
    for i, (_, stride) in enumerate(FEATURE_LAYOUT):
        h = _conv(h, params.params, f"stage{i}", params.spec.padding, stride=stride)
        if i < last:
            h = relu(h)
    return h


def feature_extractor(seed: int = 0) -> ParamStore:
    return init_params(NetworkSpec("feature_extractor", num_resblocks=0, scale_preset="custom"), seed)


def with_zeroed_residuals(params: ParamStore) -> ParamStore:
    """Copy of a generator store with every ResBlock parameter set to zero."""
    out = params.copy()
    for name, t in out.params.items():
        if name.startswith("res"):
            t.data[...] = 0
    return out


def desk_spec(kind: str, **overrides) -> NetworkSpec:
    return replace(NetworkSpec.preset(kind, "desk"), **overrides)
