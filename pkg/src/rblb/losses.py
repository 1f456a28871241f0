"""Training objectives and their weighted fusion."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .models import ParamStore, feature_forward
from .numerics import LOG_FLOOR, Tensor, abs_, log, reduce_mean, sigmoid

STAGES = ("bgan", "dbgan_g", "d_update")


@dataclass(frozen=True)
class LossWeights:
    """Fusion weights. ``perceptual`` is 1 in the published recipe; setting it
    to zero gives content-only training."""

    alpha: float = 0.005
    beta: float = 0.01
    perceptual: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.perceptual < 0:
            raise ValueError(f"loss weights must be non-negative: {self}")


@dataclass
class LossReport:
    stage: str
    perceptual: float
    content: float
    adversarial: float
    total: float
    adversarial_kind: str = "relativistic"
    objective: Tensor | None = field(default=None, repr=False, compare=False)

    def row(self) -> dict:
        return {
            "stage": self.stage,
            "perceptual": self.perceptual,
            "content": self.content,
            "adversarial": self.adversarial,
            "total": self.total,
        }


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shapes {a.shape} and {b.shape} differ")


def perceptual_loss(generated: Tensor, reference: Tensor, feat_extractor: ParamStore) -> Tensor:
    """Mean squared distance between pre-activation features of both images."""
    _same_shape(generated, reference, "perceptual_loss")
    diff = feature_forward(generated, feat_extractor) - feature_forward(reference, feat_extractor)
    return reduce_mean(diff * diff)


def content_loss(generated: Tensor, target: Tensor, mode: str = "mse") -> Tensor:
    _same_shape(generated, target, "content_loss")
    diff = generated - target
    if mode == "mse":
        return reduce_mean(diff * diff)
    if mode == "l1":
        return reduce_mean(abs_(diff))
    raise ValueError(f"unknown content loss mode {mode!r}")


def _check_logits(*vecs: Tensor | None) -> None:
    for v in vecs:
        if v is not None and v.size == 0:
            raise ValueError("empty logit vector")


def _log_sigmoid(x: Tensor) -> Tensor:
    return log(sigmoid(x), floor=LOG_FLOOR)


def standard_adv_loss(role: str, real_logits: Tensor | None, fake_logits: Tensor) -> Tensor:
    """Non-saturating binary cross-entropy GAN loss on raw logits."""
    _check_logits(real_logits, fake_logits)
    if role == "generator":
        return -reduce_mean(_log_sigmoid(fake_logits))
    if role == "discriminator":
        if real_logits is None:
            raise ValueError("discriminator loss needs real logits")
        return -(reduce_mean(_log_sigmoid(real_logits)) + reduce_mean(_log_sigmoid(-fake_logits)))
    raise ValueError(f"unknown role {role!r}")


def relativistic_loss(real_logits: Tensor, fake_logits: Tensor, role: str = "generator") -> Tensor:
    """Relativistic average loss.

    generator:
        -[mean log s(real - E[fake]) + mean log(1 - s(fake - E[real]))]
    discriminator: the same expression with real and fake exchanged.

    E is the batch mean and s the sigmoid; log arguments are floored at 1e-12.
    """
    _check_logits(real_logits, fake_logits)
    if role == "discriminator":
        real_logits, fake_logits = fake_logits, real_logits
    elif role != "generator":
        raise ValueError(f"unknown role {role!r}")
    real_rel = real_logits - reduce_mean(fake_logits)
    fake_rel = fake_logits - reduce_mean(real_logits)
    one_minus = 1.0 - sigmoid(fake_rel)
    return -(reduce_mean(_log_sigmoid(real_rel)) + reduce_mean(log(one_minus, floor=LOG_FLOOR)))


def _value(x) -> float:
    v = x.item() if isinstance(x, Tensor) else float(x)
    if not math.isfinite(v):
        raise ValueError(f"non-finite loss term {v}")
    return v


def _weighted(terms) -> Tensor | None:
    """Differentiable weighted sum; zero-weight terms are left out of the graph."""
    if not all(isinstance(t, Tensor) for t, _ in terms):
        return None
    total = None
    for t, w in terms:
        if w == 0:
            continue
        piece = t * float(w)
        total = piece if total is None else total + piece
    return total if total is not None else terms[0][0] * 0.0


def combined_bgan_loss(perceptual, rbl, weights: LossWeights) -> LossReport:
    """``perceptual_weight * perceptual + beta * rbl``."""
    p, a = _value(perceptual), _value(rbl)
    total = weights.perceptual * p + weights.beta * a
    return LossReport(
        stage="bgan",
        perceptual=p,
        content=0.0,
        adversarial=a,
        total=total,
        objective=_weighted([(perceptual, weights.perceptual), (rbl, weights.beta)]),
    )


def combined_dbgan_loss(
    perceptual, content, rdbl, weights: LossWeights, adversarial_kind: str = "relativistic"
) -> LossReport:
    """``perceptual_weight * perceptual + alpha * content + beta * rdbl``."""
    p, c, a = _value(perceptual), _value(content), _value(rdbl)
    total = weights.perceptual * p + weights.alpha * c + weights.beta * a
    return LossReport(
        stage="dbgan_g",
        perceptual=p,
        content=c,
        adversarial=a,
        total=total,
        adversarial_kind=adversarial_kind,
        objective=_weighted(
            [(perceptual, weights.perceptual), (content, weights.alpha), (rdbl, weights.beta)]
        ),
    )


def discriminator_report(loss, adversarial_kind: str = "relativistic") -> LossReport:
    v = _value(loss)
    return LossReport(
        stage="d_update",
        perceptual=0.0,
        content=0.0,
        adversarial=v,
        total=v,
        adversarial_kind=adversarial_kind,
        objective=loss if isinstance(loss, Tensor) else None,
    )

