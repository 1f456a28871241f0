"""Three-stage training: BGAN on unpaired data, DBGAN on pairs, DBGAN(+) on a mix.

Everything random is derived from ``config.seed`` and the step counter, so
a run restarted from a checkpoint replays exactly the batches it would
have seen without the interruption.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .blur_synth import make_noise_map
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .datasets import Dataset, load_dataset
from .losses import (
    LossReport,
    LossWeights,
    combined_bgan_loss,
    combined_dbgan_loss,
    content_loss,
    discriminator_report,
    perceptual_loss,
    relativistic_loss,
    standard_adv_loss,
)
from .models import (
    NetworkSpec,
    ParamStore,
    bgan_generator_forward,
    dbgan_generator_forward,
    discriminator_forward,
    feature_extractor,
    init_params,
)
from .numerics import Tape, Tensor, new_optimizer_state, optimizer_step

log = logging.getLogger(__name__)

STAGES = ("bgan", "dbgan", "dbgan_plus")
ABLATIONS = ("dbgan_minus", "dbgan", "dbgan_plus")
METRICS_HEADER = ("step", "stage", "lr", "perceptual", "content", "adversarial", "total")
# fields that may change between a run and its resumption
_UNHASHED = {"max_steps", "checkpoint_every", "sharp_dir", "blurry_dir", "paired_manifest",
             "bgan_checkpoint", "init_checkpoint"}


class ConfigMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "dbgan"
    ablation: str = "dbgan"
    batch_size: int = 4
    crop: int = 128
    lr_start: float = 1e-4
    lr_end: float = 1e-6
    # discriminator lr = d_lr_scale * generator lr
    d_lr_scale: float = 1.0
    anneal_window: int = 50
    anneal_patience: int = 3
    max_steps: int = 1000
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    mix_ratio: float = 0.5
    sharp_dir: str | None = None
    blurry_dir: str | None = None
    paired_manifest: str | None = None
    bgan_checkpoint: str | None = None
    init_checkpoint: str | None = None
    desk_scale: bool = True
    num_resblocks: int | None = None
    channels: int | None = None
    content_mode: str = "mse"
    optimizer: str = "adam"
    flip: bool = True
    sampling: str = "random"
    feature_seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}")
        if self.stage == "dbgan_plus" and self.ablation != "dbgan_plus":
            raise ValueError("stage dbgan_plus requires ablation dbgan_plus")
        if self.stage == "dbgan" and self.ablation == "dbgan_plus":
            raise ValueError("ablation dbgan_plus runs in stage dbgan_plus")
        if self.lr_end > self.lr_start:
            raise ValueError("lr_end must not exceed lr_start")
        if self.d_lr_scale <= 0:
            raise ValueError("d_lr_scale must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.crop < 32:
            raise ValueError("crop must be >= 32")
        if not 0.0 <= self.mix_ratio <= 1.0:
            raise ValueError("mix_ratio must lie in [0, 1]")
        if self.sampling not in ("random", "cycle"):
            raise ValueError(f"unknown sampling {self.sampling!r}")
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Desk-scale recipe: 32 x 32 crops and a short run."""
        base = dict(crop=32, max_steps=2000, desk_scale=True)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @property
    def hash(self) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in _UNHASHED}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def network_spec(self, kind: str) -> NetworkSpec:
        spec = NetworkSpec.preset(kind, "desk" if self.desk_scale else "paper")
        over = {}
        if self.num_resblocks is not None and kind.endswith("generator"):
            over["num_resblocks"] = self.num_resblocks
        if self.channels is not None:
            over["channels"] = self.channels
        if over:
            spec = replace(spec, scale_preset="custom", **over)
        return spec


def ablation_config(base: TrainConfig, variant: str) -> TrainConfig:
    """DBGAN(-), DBGAN and DBGAN(+) differ only in ``stage`` and ``ablation``."""
    if variant == "dbgan_minus":
        return replace(base, stage="dbgan", ablation="dbgan_minus")
    if variant == "dbgan":
        return replace(base, stage="dbgan", ablation="dbgan")
    if variant == "dbgan_plus":
        return replace(base, stage="dbgan_plus", ablation="dbgan_plus")
    raise ValueError(f"unknown ablation variant {variant!r}")


# --------------------------------------------------------------------------
# Batches


@dataclass
class Batch:
    inputs: np.ndarray
    targets: np.ndarray | None = None
    noise: np.ndarray | None = None
    real_blurry: np.ndarray | None = None
    provenance: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.inputs.shape[0]


def _augment(images: list[np.ndarray], crop: int, rng: np.random.Generator, flip: bool):
    """Same random crop and flips applied to every array in ``images``."""
    _, h, w = images[0].shape
    if h < crop or w < crop:
        raise ValueError(f"image {h}x{w} is smaller than crop {crop}")
    y = int(rng.integers(0, h - crop + 1))
    x = int(rng.integers(0, w - crop + 1))
    hflip = bool(rng.random() < 0.5)
    vflip = bool(rng.random() < 0.5)
    out = []
    for im in images:
        p = im[:, y : y + crop, x : x + crop]
        if flip and hflip:
            p = p[:, :, ::-1]
        if flip and vflip:
            p = p[:, ::-1, :]
        out.append(np.ascontiguousarray(p))
    return out, (hflip, vflip)


def _indices(n_pool: int, config: TrainConfig, step_seed: int, rng) -> np.ndarray:
    if config.sampling == "cycle":
        return (step_seed * config.batch_size + np.arange(config.batch_size)) % n_pool
    return rng.integers(0, n_pool, size=config.batch_size)


def batch_rng(config: TrainConfig, step_seed: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([config.seed, step_seed, stream])


def make_batch(dataset: Dataset, config: TrainConfig, step_seed: int) -> Batch:
    """Random crops with independent horizontal/vertical flips per item.

    The bgan stage draws sharp crops, an independent real-blurry batch and a
    fresh noise map per item; the other stages draw (blurry, sharp) pairs.
    """
    rng = batch_rng(config, step_seed)
    crop = config.crop
    if config.stage == "bgan":
        if not dataset.sharp:
            raise ValueError("bgan stage needs a non-empty sharp pool")
        sharp = []
        for i in _indices(len(dataset.sharp), config, step_seed, rng):
            (p,), _ = _augment([dataset.sharp[i]], crop, rng, config.flip)
            sharp.append(p)
        real = None
        if dataset.blurry:
            real = []
            for i in rng.integers(0, len(dataset.blurry), size=config.batch_size):
                (p,), _ = _augment([dataset.blurry[i]], crop, rng, config.flip)
                real.append(p)
            real = np.stack(real)
        noise_seeds = rng.integers(0, 2**63 - 1, size=config.batch_size)
        noise = np.stack(
            [make_noise_map(int(s), 4, crop, crop).values for s in noise_seeds]
        )
        return Batch(
            inputs=np.stack(sharp),
            noise=noise,
            real_blurry=real,
            provenance=["unpaired"] * config.batch_size,
        )
    if not dataset.pairs:
        raise ValueError(f"{config.stage} stage needs a non-empty paired pool")
    blurry, sharp = [], []
    for i in _indices(len(dataset.pairs), config, step_seed, rng):
        (b, s), _ = _augment(list(dataset.pairs[i]), crop, rng, config.flip)
        blurry.append(b)
        sharp.append(s)
    return Batch(
        inputs=np.stack(blurry),
        targets=np.stack(sharp),
        provenance=["real_pair"] * config.batch_size,
    )


def mix_synthetic_batch(
    dataset: Dataset, bgan_g: ParamStore | None, config: TrainConfig, step_seed: int
) -> Batch:
    """Replace each real pair, with probability ``mix_ratio``, by (BGAN(sharp), sharp)."""
    if bgan_g is None:
        raise ValueError("dbgan_plus needs a trained BGAN generator (bgan_checkpoint)")
    batch = make_batch(dataset, config, step_seed)
    rng = batch_rng(config, step_seed, stream=1)
    pick = rng.random(len(batch)) < config.mix_ratio
    seeds = rng.integers(0, 2**63 - 1, size=len(batch))
    idx = np.flatnonzero(pick)
    if idx.size:
        _, _, h, w = batch.targets.shape
        noise = np.stack(
            [make_noise_map(int(seeds[i]), bgan_g.spec.noise_channels, h, w).values for i in idx]
        )
        fake = bgan_generator_forward(Tensor(batch.targets[idx]), Tensor(noise), bgan_g)
        batch.inputs = batch.inputs.copy()
        batch.inputs[idx] = fake.data.astype(batch.inputs.dtype)
    batch.provenance = ["bgan_generated" if p else "real_pair" for p in pick]
    return batch


# --------------------------------------------------------------------------
# Steps


@dataclass
class Optimizers:
    g: dict = field(default_factory=new_optimizer_state)
    d: dict = field(default_factory=new_optimizer_state)


def _update(store: ParamStore, loss: Tensor, tape: Tape, config: TrainConfig, lr: float, state) -> None:
    store.zero_grad()
    tape.backward(loss)
    optimizer_step(store.params, config.optimizer, lr, state)
    store.zero_grad()


def train_bgan_step(
    g: ParamStore,
    d: ParamStore,
    batch: Batch,
    config: TrainConfig,
    *,
    features: ParamStore,
    opt: Optimizers,
    lr: float,
) -> tuple[LossReport, LossReport]:
    """One relativistic discriminator update, then one generator update."""
    if batch.real_blurry is None:
        raise ValueError("bgan step needs a real-blurry pool")
    sharp = Tensor(batch.inputs)
    noise = Tensor(batch.noise)
    real = Tensor(batch.real_blurry)

    # the D update leaves G untouched, so one taped G forward serves both updates
    with Tape() as tape:
        fake = bgan_generator_forward(sharp, noise, g)
    with Tape() as d_tape:
        d_loss = relativistic_loss(
            discriminator_forward(real, d).logit,
            discriminator_forward(fake.detach(), d).logit,
            role="discriminator",
        )
    _update(d, d_loss, d_tape, config, lr * config.d_lr_scale, opt.d)
    d_report = discriminator_report(d_loss)

    with d.frozen():
        real_logits = discriminator_forward(real, d).logit
        with tape:
            perc = perceptual_loss(fake, sharp, features)
            rbl = relativistic_loss(real_logits, discriminator_forward(fake, d).logit, "generator")
            g_report = combined_bgan_loss(perc, rbl, config.weights)
    _update(g, g_report.objective, tape, config, lr, opt.g)
    return d_report, g_report


def train_dbgan_step(
    g: ParamStore,
    d: ParamStore,
    batch: Batch,
    config: TrainConfig,
    *,
    features: ParamStore,
    opt: Optimizers,
    lr: float,
) -> tuple[LossReport, LossReport]:
    """Discriminator then generator update on paired data.

    ``ablation == "dbgan_minus"`` swaps the relativistic terms for the
    standard adversarial loss.
    """
    if batch.targets is None:
        raise ValueError("dbgan step needs paired targets")
    kind = "standard" if config.ablation == "dbgan_minus" else "relativistic"
    blurry = Tensor(batch.inputs)
    sharp = Tensor(batch.targets)

    def adversarial(real_logits, fake_logits, role):
        if kind == "standard":
            return standard_adv_loss(role, real_logits, fake_logits)
        return relativistic_loss(real_logits, fake_logits, role)

    with Tape() as tape:
        fake = dbgan_generator_forward(blurry, g)
    with Tape() as d_tape:
        d_loss = adversarial(
            discriminator_forward(sharp, d).logit,
            discriminator_forward(fake.detach(), d).logit,
            "discriminator",
        )
    _update(d, d_loss, d_tape, config, lr * config.d_lr_scale, opt.d)
    d_report = discriminator_report(d_loss, kind)

    with d.frozen():
        real_logits = discriminator_forward(sharp, d).logit
        with tape:
            perc = perceptual_loss(fake, sharp, features)
            cont = content_loss(fake, sharp, config.content_mode)
            adv = adversarial(real_logits, discriminator_forward(fake, d).logit, "generator")
            g_report = combined_dbgan_loss(perc, cont, adv, config.weights, kind)
    _update(g, g_report.objective, tape, config, lr, opt.g)
    return d_report, g_report


# --------------------------------------------------------------------------
# Loop


def _store_names(stage: str) -> tuple[str, str]:
    return ("bgan_g", "bgan_d") if stage == "bgan" else ("dbgan_g", "dbgan_d")


def _derived_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, stream]).generate_state(1, dtype=np.uint64)[0] >> 1)


@dataclass
class AnnealState:
    """Plateau detection on windowed means of the generator's total loss."""

    window: list[float] = field(default_factory=list)
    best: float | None = None
    bad_windows: int = 0
    exhausted: bool = False


class Trainer:
    def __init__(self, config: TrainConfig, dataset: Dataset):
        self.config = config
        self.dataset = dataset
        g_kind = "bgan_generator" if config.stage == "bgan" else "dbgan_generator"
        self.g = init_params(config.network_spec(g_kind), _derived_seed(config.seed, 1))
        self.d = init_params(config.network_spec("discriminator"), _derived_seed(config.seed, 2))
        self.features = feature_extractor(config.feature_seed)
        self.opt = Optimizers()
        self.step = 0
        self.lr = config.lr_start
        self.anneal = AnnealState()
        self.bgan_g: ParamStore | None = None
        if config.stage == "dbgan_plus":
            if not config.bgan_checkpoint:
                raise ValueError("stage dbgan_plus needs bgan_checkpoint")
            ck = load_checkpoint(config.bgan_checkpoint)
            if "bgan_g" not in ck.stores:
                raise ValueError(f"{config.bgan_checkpoint} holds no BGAN generator")
            self.bgan_g = ck.stores["bgan_g"]
        if config.init_checkpoint:
            gname, dname = _store_names(config.stage)
            ck = load_checkpoint(
                config.init_checkpoint, {gname: self.g.spec, dname: self.d.spec}
            )
            self.g, self.d = ck.stores[gname], ck.stores[dname]

    @property
    def finished(self) -> bool:
        return self.anneal.exhausted or self.step >= self.config.max_steps

    def next_batch(self) -> Batch:
        if self.config.stage == "dbgan_plus":
            return mix_synthetic_batch(self.dataset, self.bgan_g, self.config, self.step)
        return make_batch(self.dataset, self.config, self.step)

    def train_step(self) -> tuple[LossReport, LossReport]:
        batch = self.next_batch()
        step_fn = train_bgan_step if self.config.stage == "bgan" else train_dbgan_step
        reports = step_fn(
            self.g, self.d, batch, self.config, features=self.features, opt=self.opt, lr=self.lr
        )
        self.step += 1
        return reports

    def observe(self, total: float) -> None:
        """Feed one generator loss; anneal lr by 10x after ``patience`` stale windows."""
        cfg, a = self.config, self.anneal
        a.window.append(float(total))
        if len(a.window) < cfg.anneal_window:
            return
        mean = float(np.mean(a.window))
        a.window = []
        if a.best is None or mean < a.best:
            a.best, a.bad_windows = mean, 0
            return
        a.bad_windows += 1
        if a.bad_windows < cfg.anneal_patience:
            return
        a.bad_windows = 0
        if self.lr <= cfg.lr_end:
            a.exhausted = True
            return
        self.lr = max(self.lr * 0.1, cfg.lr_end)
        log.info("step %d: annealing lr to %.3g", self.step, self.lr)

    # ---- persistence

    def checkpoint_path(self, out_dir: Path) -> Path:
        return Path(out_dir) / f"ckpt_{self.config.stage}_{self.step}.rblb"

    def save(self, path: Path) -> Path:
        gname, dname = _store_names(self.config.stage)
        arrays = {}
        for who, state in (("g", self.opt.g), ("d", self.opt.d)):
            for moment in ("m", "v"):
                for name, arr in state[moment].items():
                    arrays[f"opt/{who}/{moment}/{name}"] = arr
        meta = {
            "stage": self.config.stage,
            "ablation": self.config.ablation,
            "step": self.step,
            "lr": self.lr,
            "config": self.config.to_dict(),
            "config_hash": self.config.hash,
            "weights": asdict(self.config.weights),
            "optimizer": {"g_t": self.opt.g["t"], "d_t": self.opt.d["t"]},
            "anneal": asdict(self.anneal),
        }
        return save_checkpoint(path, {gname: self.g, dname: self.d}, meta, arrays)

    @classmethod
    def resume(cls, path: str | Path, config: TrainConfig, dataset: Dataset) -> "Trainer":
        ck: Checkpoint = load_checkpoint(path)
        meta = ck.metadata
        if meta.get("config_hash") != config.hash:
            raise ConfigMismatchError(
                f"{path}: config hash {meta.get('config_hash')} does not match {config.hash}"
            )
        trainer = cls(replace(config, init_checkpoint=None), dataset)
        trainer.config = config
        gname, dname = _store_names(config.stage)
        for store, name in ((trainer.g, gname), (trainer.d, dname)):
            if ck.stores[name].spec_hash != store.spec_hash:
                raise ConfigMismatchError(f"{path}: network {name} differs from config")
        trainer.g, trainer.d = ck.stores[gname], ck.stores[dname]
        trainer.step = int(meta["step"])
        trainer.lr = float(meta["lr"])
        trainer.anneal = AnnealState(**meta["anneal"])
        trainer.opt = Optimizers(
            g={"t": meta["optimizer"]["g_t"], "m": {}, "v": {}},
            d={"t": meta["optimizer"]["d_t"], "m": {}, "v": {}},
        )
        for key, arr in ck.arrays.items():
            parts = key.split("/", 3)
            if parts[0] != "opt":
                continue
            _, who, moment, name = parts
            getattr(trainer.opt, who)[moment][name] = arr
        return trainer


@dataclass
class TrainResult:
    checkpoint: Path
    metrics: Path
    steps: int
    final_lr: float
    trainer: Trainer = field(repr=False)


def _open_metrics(path: Path):
    new = not path.exists() or path.stat().st_size == 0
    fh = path.open("a", newline="")
    writer = csv.writer(fh)
    if new:
        writer.writerow(METRICS_HEADER)
    return fh, writer


def _dataset_for(config: TrainConfig) -> Dataset:
    """Load only the pools the stage consumes."""
    for p in (config.sharp_dir, config.blurry_dir, config.paired_manifest):
        if p and not Path(p).exists():
            raise FileNotFoundError(f"data path missing: {p}")
    if config.stage == "bgan":
        return load_dataset(sharp_dir=config.sharp_dir, blurry_dir=config.blurry_dir)
    return load_dataset(paired_manifest=config.paired_manifest)


def run_training(
    config: TrainConfig,
    out_dir: str | Path,
    dataset: Dataset | None = None,
    resume: str | Path | None = None,
) -> TrainResult:
    """Train until ``max_steps`` or until the lr floor has stopped helping.

    Writes ``ckpt_<stage>_<step>.rblb`` files and appends to ``metrics.csv``
    in ``out_dir``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if dataset is None:
        dataset = _dataset_for(config)
    trainer = Trainer.resume(resume, config, dataset) if resume else Trainer(config, dataset)
    metrics_path = out_dir / "metrics.csv"
    fh, writer = _open_metrics(metrics_path)
    try:
        if trainer.step == 0 and config.max_steps == 0:
            trainer.save(trainer.checkpoint_path(out_dir))
        while not trainer.finished:
            lr = trainer.lr
            d_rep, g_rep = trainer.train_step()
            for rep in (d_rep, g_rep):
                row = rep.row()
                writer.writerow(
                    [trainer.step, row["stage"], repr(lr)]
                    + [repr(row[k]) for k in ("perceptual", "content", "adversarial", "total")]
                )
            trainer.observe(g_rep.total)
            if config.checkpoint_every and trainer.step % config.checkpoint_every == 0:
                trainer.save(trainer.checkpoint_path(out_dir))
    finally:
        fh.close()
    final = trainer.checkpoint_path(out_dir)
    if not final.exists():
        trainer.save(final)
    return TrainResult(final, metrics_path, trainer.step, trainer.lr, trainer)
