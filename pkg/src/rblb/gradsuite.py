"""Finite-difference gradient suites over every differentiable primitive and
the composite training objectives.

Each check draws fresh random inputs per instance and reports the worst
normwise relative error across instances. Used by the ``gradcheck`` CLI
command and by the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import numerics as nx
from .losses import (
    LossWeights,
    combined_bgan_loss,
    combined_dbgan_loss,
    content_loss,
    perceptual_loss,
    relativistic_loss,
    standard_adv_loss,
)
from .models import (
    ParamStore,
    bgan_generator_forward,
    dbgan_generator_forward,
    desk_spec,
    discriminator_forward,
    feature_extractor,
    init_params,
)
from .numerics import Tensor, finite_diff_check

PRIMITIVE_TOL = 1e-3
COMPOSITE_TOL = 1e-2
PRIMITIVE_EPS = 1e-3
# small enough that a probe rarely straddles a ReLU kink; the float64 oracle
# keeps roundoff far below tolerance at this step
COMPOSITE_EPS = 1e-6
COMPOSITE_COORDS = 24


@dataclass
class CheckResult:
    name: str
    group: str
    max_error: float
    tolerance: float
    instances: int

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} {self.group:9s} {self.name:28s} "
            f"max_rel_err={self.max_error:.2e} tol={self.tolerance:.0e} n={self.instances}"
        )


# A case maps an rng to (scalar function, point to differentiate at).
Case = Callable[[np.random.Generator], tuple[Callable[[Tensor], Tensor], Tensor]]


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float32))


def _shape(rng, min_hw=3, max_hw=6) -> tuple[int, int, int, int]:
    return (
        int(rng.integers(1, 3)),
        int(rng.integers(1, 4)),
        int(rng.integers(min_hw, max_hw + 1)),
        int(rng.integers(min_hw, max_hw + 1)),
    )


def _away_from(rng, shape, points=(0.0,), margin=0.05, low=-2.0, high=2.0) -> np.ndarray:
    """Uniform samples, resampled while any lies within ``margin`` of a kink."""
    x = rng.uniform(low, high, shape)
    for p in points:
        bad = np.abs(x - p) < margin
        while bad.any():
            x[bad] = rng.uniform(low, high, int(bad.sum()))
            bad = np.abs(x - p) < margin
    return x


def _weighted_sum(y: Tensor, r: np.ndarray) -> Tensor:
    # random projection so that a plain sum does not hide per-element errors
    return nx.reduce_sum(y * Tensor(r.astype(y.dtype)))


def _unary(op, sampler) -> Case:
    def case(rng):
        x = sampler(rng)
        r = rng.normal(size=x.shape)
        return (lambda t: _weighted_sum(op(t), r)), _t(x)

    return case


def _binary(kind: str, wrt: int) -> Case:
    def case(rng):
        shape = _shape(rng)
        a, b = rng.normal(size=shape), rng.normal(size=shape)
        r = rng.normal(size=shape)
        if wrt == 0:
            other = _t(b)
            return (lambda t: _weighted_sum(nx.elementwise(kind, t, other), r)), _t(a)
        other = _t(a)
        return (lambda t: _weighted_sum(nx.elementwise(kind, other, t), r)), _t(b)

    return case


def _scalar_mul(rng):
    x = rng.normal(size=_shape(rng))
    c = float(rng.normal())
    r = rng.normal(size=x.shape)
    return (lambda t: _weighted_sum(t * c, r)), _t(x)


def _pow(exponent: float) -> Case:
    return _unary(lambda t: nx.pow_scalar(t, exponent), lambda rng: rng.uniform(0.2, 1.0, _shape(rng)))


def _reduce(over: str) -> Case:
    def case(rng):
        x = rng.normal(size=_shape(rng))
        probe = nx.reduce_mean(_t(x), over=over)
        r = rng.normal(size=probe.shape)
        return (lambda t: _weighted_sum(nx.reduce_mean(t, over=over), r)), _t(x)

    return case


def _reshape(rng):
    x = rng.normal(size=_shape(rng))
    r = rng.normal(size=x.size)
    return (lambda t: _weighted_sum(nx.reshape(t, (x.size,)), r)), _t(x)


def _concat(wrt: int) -> Case:
    def case(rng):
        n, c1, h, w = _shape(rng)
        c2 = int(rng.integers(1, 5))
        a, b = rng.normal(size=(n, c1, h, w)), rng.normal(size=(n, c2, h, w))
        r = rng.normal(size=(n, c1 + c2, h, w))
        if wrt == 0:
            other = _t(b)
            return (lambda t: _weighted_sum(nx.concat_channels(t, other), r)), _t(a)
        other = _t(a)
        return (lambda t: _weighted_sum(nx.concat_channels(other, t), r)), _t(b)

    return case


def _conv(wrt: str, padding: str, stride: int) -> Case:
    def case(rng):
        k = int(rng.choice([1, 3, 5]))
        n, cin, h, w = _shape(rng, min_hw=k // 2 + 2, max_hw=7)
        cout = int(rng.integers(1, 4))
        x = rng.normal(size=(n, cin, h, w))
        wt = rng.normal(size=(cout, cin, k, k))
        b = rng.normal(size=(cout,))
        probe = nx.conv2d(_t(x), _t(wt), _t(b), padding=padding, stride=stride)
        r = rng.normal(size=probe.shape)

        def f(t):
            args = {"x": _t(x), "w": _t(wt), "b": _t(b)}
            args[wrt] = t
            return _weighted_sum(nx.conv2d(args["x"], args["w"], args["b"], padding, stride), r)

        return f, _t({"x": x, "w": wt, "b": b}[wrt])

    return case


def primitive_cases() -> dict[str, Case]:
    cases: dict[str, Case] = {}
    for kind in ("add", "sub", "mul"):
        cases[f"{kind}/a"] = _binary(kind, 0)
        cases[f"{kind}/b"] = _binary(kind, 1)
    cases["mul/scalar"] = _scalar_mul
    for e in (2.2, 1 / 2.2, 3.0):
        cases[f"pow_scalar/{e:.3g}"] = _pow(e)
    cases["relu"] = _unary(nx.relu, lambda rng: _away_from(rng, _shape(rng)))
    cases["sigmoid"] = _unary(nx.sigmoid, lambda rng: rng.normal(0, 2, _shape(rng)))
    cases["logit"] = _unary(nx.logit, lambda rng: rng.uniform(0.05, 0.95, _shape(rng)))
    cases["log"] = _unary(nx.log, lambda rng: rng.uniform(0.1, 2.0, _shape(rng)))
    cases["abs"] = _unary(nx.abs_, lambda rng: _away_from(rng, _shape(rng)))
    for over in ("all", "batch", "spatial"):
        cases[f"reduce_mean/{over}"] = _reduce(over)
    cases["reduce_sum"] = _unary(nx.reduce_sum, lambda rng: rng.normal(size=_shape(rng)))
    cases["reshape"] = _reshape
    cases["concat_channels/a"] = _concat(0)
    cases["concat_channels/b"] = _concat(1)
    for padding in ("reflect", "zero"):
        for stride in (1, 2):
            for wrt in ("x", "w", "b"):
                cases[f"conv2d/{padding}/s{stride}/{wrt}"] = _conv(wrt, padding, stride)
    return cases


def _rescaled(store: ParamStore, rng) -> ParamStore:
    """He-scaled weights and small random biases.

    Freshly initialised networks have tiny gradients, which would make the
    check measure roundoff rather than the backward rules.
    """
    for name, t in store.items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(t.shape[1:]))
            t.data[...] = rng.normal(0, np.sqrt(2.0 / fan_in), t.shape)
        else:
            t.data[...] = rng.normal(0, 0.1, t.shape)
    return store


def _networks(rng, *kinds: str) -> list[ParamStore]:
    out = []
    for kind in kinds:
        spec = desk_spec(kind, num_resblocks=1, channels=4) if kind.endswith("generator") else desk_spec(kind, channels=4)
        out.append(_rescaled(init_params(spec, int(rng.integers(2**31))), rng))
    return out


def _images(rng, n=2, size=8) -> np.ndarray:
    return rng.uniform(0.1, 0.9, (n, 3, size, size))


def _bgan_objective(rng):
    (d,) = _networks(rng, "discriminator")
    feats = feature_extractor(int(rng.integers(2**31)))
    sharp, real = _t(_images(rng)), _t(_images(rng))
    weights = LossWeights()

    def f(fake):
        rbl = relativistic_loss(discriminator_forward(real, d).logit, discriminator_forward(fake, d).logit)
        return combined_bgan_loss(perceptual_loss(fake, sharp, feats), rbl, weights).objective

    return f, _t(_images(rng))


def _dbgan_objective(adversarial: str) -> Case:
    def case(rng):
        (d,) = _networks(rng, "discriminator")
        feats = feature_extractor(int(rng.integers(2**31)))
        sharp = _t(_images(rng))
        weights = LossWeights()

        def f(fake):
            real_logits = discriminator_forward(sharp, d).logit
            fake_logits = discriminator_forward(fake, d).logit
            if adversarial == "standard":
                adv = standard_adv_loss("generator", real_logits, fake_logits)
            else:
                adv = relativistic_loss(real_logits, fake_logits)
            return combined_dbgan_loss(
                perceptual_loss(fake, sharp, feats), content_loss(fake, sharp), adv, weights, adversarial
            ).objective

        return f, _t(_images(rng))

    return case


def _discriminator_objective(adversarial: str) -> Case:
    def case(rng):
        (d,) = _networks(rng, "discriminator")
        real = _t(_images(rng))

        def f(fake):
            real_logits = discriminator_forward(real, d).logit
            fake_logits = discriminator_forward(fake, d).logit
            if adversarial == "standard":
                return standard_adv_loss("discriminator", real_logits, fake_logits)
            return relativistic_loss(real_logits, fake_logits, "discriminator")

        return f, _t(_images(rng))

    return case


def _dbgan_end_to_end(rng):
    """L_DBGAN as a function of the blurry input, through the deblur generator."""
    g, d = _networks(rng, "dbgan_generator", "discriminator")
    feats = feature_extractor(int(rng.integers(2**31)))
    sharp = _t(_images(rng, n=1))
    weights = LossWeights()

    def f(blurry):
        fake = dbgan_generator_forward(blurry, g)
        adv = relativistic_loss(discriminator_forward(sharp, d).logit, discriminator_forward(fake, d).logit)
        return combined_dbgan_loss(
            perceptual_loss(fake, sharp, feats), content_loss(fake, sharp), adv, weights
        ).objective

    return f, _t(_images(rng, n=1))


def _bgan_end_to_end(rng):
    """L_BGAN as a function of the sharp input, through the blur generator."""
    g, d = _networks(rng, "bgan_generator", "discriminator")
    feats = feature_extractor(int(rng.integers(2**31)))
    real = _t(_images(rng))
    noise = _t(np.broadcast_to(rng.normal(size=(2, 4, 1, 1)), (2, 4, 8, 8)))
    weights = LossWeights()

    def f(sharp):
        fake = bgan_generator_forward(sharp, noise, g)
        rbl = relativistic_loss(discriminator_forward(real, d).logit, discriminator_forward(fake, d).logit)
        return combined_bgan_loss(perceptual_loss(fake, sharp, feats), rbl, weights).objective

    return f, _t(_images(rng))


def composite_cases() -> dict[str, Case]:
    return {
        "L_BGAN": _bgan_objective,
        "L_DBGAN": _dbgan_objective("relativistic"),
        "L_DBGAN(-)": _dbgan_objective("standard"),
        "D/relativistic": _discriminator_objective("relativistic"),
        "D/standard": _discriminator_objective("standard"),
        "L_DBGAN/end_to_end": _dbgan_end_to_end,
        "L_BGAN/end_to_end": _bgan_end_to_end,
    }


def run_case(
    name: str, case: Case, group: str, instances: int, seed: int
) -> CheckResult:
    tol, eps = (PRIMITIVE_TOL, PRIMITIVE_EPS) if group == "primitive" else (COMPOSITE_TOL, COMPOSITE_EPS)
    coords = None if group == "primitive" else COMPOSITE_COORDS
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    worst = 0.0
    for i in range(instances):
        f, x = case(rng)
        worst = max(worst, finite_diff_check(f, x, eps=eps, coords=coords, seed=i))
    return CheckResult(name, group, worst, tol, instances)


def run_suite(
    instances: int = 20, seed: int = 0, groups: Iterable[str] = ("primitive", "composite")
) -> list[CheckResult]:
    results = []
    for group in groups:
        cases = primitive_cases() if group == "primitive" else composite_cases()
        for name, case in cases.items():
            results.append(run_case(name, case, group, instances, seed))
    return results
