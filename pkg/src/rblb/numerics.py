"""Small dense-tensor engine with tape-based reverse-mode autodiff.

Operations record themselves onto the innermost active :class:`Tape`.
Outside a tape nothing is recorded, which is how inference and
finite-difference evaluation run::

    with Tape() as tape:
        loss = reduce_mean(relu(conv2d(x, w, b)))
    tape.backward(loss)

Arrays default to float32. Operations follow numpy type promotion, so a
float64 input yields float64 outputs; the gradient checker relies on this
to evaluate its oracle in double precision.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
POW_GRAD_CAP = 1e6
LOG_FLOOR = 1e-12


class Tensor:
    """N-d float array with an optional accumulated gradient."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", self, other)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("add", elementwise("mul", self, -1.0), other)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", self, other)

    def __neg__(self):
        return elementwise("mul", self, -1.0)

    def __pow__(self, exponent: float):
        return pow_scalar(self, exponent)


def tensor(data, requires_grad: bool = False, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))


# --------------------------------------------------------------------------
# Tape


@dataclass(frozen=True)
class _Record:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


_local = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations.

    Tapes are per-thread; nesting a tape shadows the outer one. A tape is
    built for one forward pass and discarded after :meth:`backward`.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, inputs, output, backward) -> None:
        self.records.append(_Record(tuple(inputs), output, backward))

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def _emit(data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    tape = active_tape()
    if needs and tape is not None:
        tape.record(inputs, out, backward_fn)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` of every leaf reachable from ``loss`` on ``tape``.

    Gradients accumulate: calling twice without zeroing doubles them.
    Tensors produced by operations on this tape are not leaves and never
    receive ``.grad``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.records:
        raise ValueError("backward on an empty tape")
    pending: dict[int, tuple[Tensor, np.ndarray]] = {
        id(loss): (loss, np.ones_like(loss.data))
    }
    for rec in reversed(tape.records):
        entry = pending.pop(id(rec.output), None)
        if entry is None:
            continue
        in_grads = rec.backward(entry[1])
        for inp, g in zip(rec.inputs, in_grads):
            if g is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in pending:
                pending[key] = (inp, pending[key][1] + g)
            else:
                pending[key] = (inp, g)
    for leaf, g in pending.values():
        g = np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


# --------------------------------------------------------------------------
# Elementwise


def _is_scalar(t: Tensor) -> bool:
    return t.data.size == 1 and t.data.ndim <= 1


def elementwise(kind: str, a, b) -> Tensor:
    """``a (kind) b`` where ``b`` matches ``a``'s shape or is a scalar."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and not _is_scalar(b):
        if _is_scalar(a):
            a, b = b, a
            if kind == "sub":
                return elementwise("add", elementwise("mul", a, -1.0), b)
        else:
            raise ValueError(f"{kind}: shapes {a.shape} and {b.shape} do not match")
    bd = b.data if b.shape == a.shape else b.data.reshape(())
    scalar_b = b.shape != a.shape

    def reduce_b(g):
        return g.sum().reshape(b.shape) if scalar_b else g

    if kind == "add":
        out = a.data + bd
        return _emit(out, (a, b), lambda g: (g, reduce_b(g)))
    if kind == "sub":
        out = a.data - bd
        return _emit(out, (a, b), lambda g: (g, reduce_b(-g)))
    if kind == "mul":
        out = a.data * bd
        return _emit(out, (a, b), lambda g: (g * bd, reduce_b(g * a.data)))
    raise ValueError(f"unknown elementwise kind {kind!r}")


def pow_scalar(a: Tensor, exponent: float, grad_cap: float = POW_GRAD_CAP) -> Tensor:
    """``a ** exponent``; the derivative is clipped to ``grad_cap`` in magnitude.

    The clip only bites near zero for exponents below one, where the true
    derivative diverges.
    """
    exponent = float(exponent)
    x = a.data
    if not float(exponent).is_integer() and np.any(x < 0):
        raise ValueError(f"negative base with fractional exponent {exponent}")
    out = np.power(x, exponent)

    def grad_fn(g):
        if exponent == 0.0:
            return (np.zeros_like(g),)
        with np.errstate(divide="ignore", invalid="ignore"):
            d = exponent * np.power(x, exponent - 1.0)
        d = np.nan_to_num(d, nan=grad_cap, posinf=grad_cap, neginf=-grad_cap)
        d = np.clip(d, -grad_cap, grad_cap)
        return (g * d,)

    return _emit(out, (a,), grad_fn)


def relu(a: Tensor) -> Tensor:
    x = a.data
    mask = x > 0
    return _emit(np.where(mask, x, 0).astype(x.dtype), (a,), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _emit(s, (a,), lambda g: (g * s * (1 - s),))


def logit(a: Tensor, eps: float = 1e-3) -> Tensor:
    """``log(x / (1 - x))`` of ``x`` clipped to ``[eps, 1 - eps]``."""
    x = a.data
    live = (x > eps) & (x < 1 - eps)
    xc = np.clip(x, eps, 1 - eps)
    out = np.log(xc) - np.log1p(-xc)
    return _emit(out, (a,), lambda g: (np.where(live, g / (xc * (1 - xc)), 0),))


def log(a: Tensor, floor: float = LOG_FLOOR) -> Tensor:
    """Natural log of ``max(a, floor)``; clamped entries get zero gradient."""
    x = a.data
    live = x > floor
    safe = np.where(live, x, floor)
    return _emit(np.log(safe), (a,), lambda g: (np.where(live, g / safe, 0),))


def abs_(a: Tensor) -> Tensor:
    x = a.data
    return _emit(np.abs(x), (a,), lambda g: (g * np.sign(x),))


# --------------------------------------------------------------------------
# Reductions and shape ops


def reduce_mean(a: Tensor, over: str = "all") -> Tensor:
    """Mean over everything (``all``), the batch axis, or the H, W axes.

    ``spatial`` keeps the reduced axes, giving N x C x 1 x 1.
    """
    x = a.data
    if x.size == 0:
        raise ValueError("reduce_mean of an empty tensor")
    if over == "all":
        n = x.size
        return _emit(x.mean(), (a,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))
    if over == "batch":
        n = x.shape[0]
        return _emit(
            x.mean(axis=0),
            (a,),
            lambda g: (np.broadcast_to(g / n, x.shape).astype(x.dtype),),
        )
    if over == "spatial":
        if x.ndim != 4:
            raise ValueError(f"spatial mean needs N x C x H x W, got {x.shape}")
        n = x.shape[2] * x.shape[3]
        return _emit(
            x.mean(axis=(2, 3), keepdims=True),
            (a,),
            lambda g: (np.broadcast_to(g / n, x.shape).astype(x.dtype),),
        )
    raise ValueError(f"unknown reduction {over!r}")


def reduce_sum(a: Tensor) -> Tensor:
    x = a.data
    return _emit(x.sum(), (a,), lambda g: (np.full(x.shape, g, dtype=x.dtype),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ValueError("concat_channels needs 4-d tensors")
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ValueError(f"concat_channels: shapes {a.shape} and {b.shape} differ outside C")
    out = np.concatenate([a.data, b.data], axis=1)
    return _emit(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


# --------------------------------------------------------------------------
# Convolution


def _pad(x: np.ndarray, p: int, padding: str) -> np.ndarray:
    if p == 0:
        return x
    width = ((0, 0), (0, 0), (p, p), (p, p))
    if padding == "reflect":
        return np.pad(x, width, mode="reflect")
    return np.pad(x, width, mode="constant")


def _fold_matrix(n: int, p: int, dtype) -> np.ndarray:
    """(n + 2p) x n matrix mapping reflect-padded positions to their source."""
    src = np.pad(np.arange(n), p, mode="reflect")
    m = np.zeros((n + 2 * p, n), dtype=dtype)
    m[np.arange(n + 2 * p), src] = 1
    return m


def _unpad_grad(g: np.ndarray, h: int, w: int, p: int, padding: str) -> np.ndarray:
    if p == 0:
        return g
    if padding == "zero":
        return g[:, :, p : p + h, p : p + w]
    fh = _fold_matrix(h, p, g.dtype)
    fw = _fold_matrix(w, p, g.dtype)
    return fh.T @ (g @ fw)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    padding: str = "reflect",
    stride: int = 1,
) -> Tensor:
    """2-d cross-correlation with 'same' padding (``reflect`` or ``zero``).

    With stride 1 the output keeps H and W; stride ``s`` gives
    ``ceil(H / s)``.
    """
    if padding not in ("reflect", "zero"):
        raise ValueError(f"unknown padding {padding!r}")
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError("conv2d needs N x C x H x W input and O x C x k x k weight")
    n, c, h, w = x.shape
    o, cin, kh, kw = weight.shape
    if cin != c:
        raise ValueError(f"conv2d: input has {c} channels, weight expects {cin}")
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square with odd size, got {kh}x{kw}")
    k = kh
    p = k // 2
    if padding == "reflect" and p > 0 and (h <= p or w <= p):
        raise ValueError(f"reflect padding {p} needs H, W > {p}, got {h}x{w}")
    xp = _pad(x.data, p, padding)
    ho = (h + 2 * p - k) // stride + 1
    wo = (w + 2 * p - k) // stride + 1
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    # channel-major im2col: rows (C, ki, kj), columns (N, Ho, Wo)
    xc = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, k, k, n, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xc[:, :, i : i + hspan : stride, j : j + wspan : stride]
    cols = cols.reshape(c * k * k, n * ho * wo)
    wm = weight.data.reshape(o, c * k * k)
    out = wm @ cols
    if bias is not None:
        out = out + bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(g):
        go = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        gw = (go @ cols.T).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = (wm.T @ go).reshape(c, k, k, n, ho, wo)
            gpad = np.zeros((c, n) + xp.shape[2:], dtype=gcols.dtype)
            for i in range(k):
                for j in range(k):
                    gpad[:, :, i : i + hspan : stride, j : j + wspan : stride] += gcols[:, i, j]
            gx = _unpad_grad(gpad.transpose(1, 0, 2, 3), h, w, p, padding)
        if bias is None:
            return gx, gw
        return gx, gw, go.sum(axis=1)

    return _emit(out, inputs, grad_fn)


# --------------------------------------------------------------------------
# Optimisation


ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def new_optimizer_state() -> dict:
    return {"t": 0, "m": {}, "v": {}}


def optimizer_step(
    params: Mapping[str, Tensor],
    method: str = "adam",
    lr: float = 1e-4,
    state: dict | None = None,
) -> None:
    """Update ``params`` in place from their ``.grad``.

    Adam keeps first/second moments and the step count in ``state``.
    """
    missing = [name for name, t in params.items() if t.grad is None]
    if missing:
        raise ValueError(f"no gradient for parameters: {', '.join(sorted(missing))}")
    if method == "sgd":
        for t in params.values():
            t.data -= np.asarray(lr * t.grad, dtype=t.data.dtype)
        return
    if method != "adam":
        raise ValueError(f"unknown optimizer {method!r}")
    if state is None:
        raise ValueError("adam needs an optimizer state")
    b1, b2 = ADAM_BETAS
    state["t"] += 1
    t_ = state["t"]
    c1 = 1.0 - b1**t_
    c2 = 1.0 - b2**t_
    for name in sorted(params):
        p = params[name]
        g = p.grad
        m = state["m"].get(name)
        v = state["v"].get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = (b1 * m + (1 - b1) * g).astype(p.data.dtype)
        v = (b2 * v + (1 - b2) * g * g).astype(p.data.dtype)
        state["m"][name] = m
        state["v"][name] = v
        step = lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        p.data -= step.astype(p.data.dtype)


# --------------------------------------------------------------------------
# Gradient checking


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-3,
    oracle_dtype=np.float64,
    coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between autodiff and central differences of ``f``.

    The autodiff gradient is taken at ``x``'s own precision; the central
    differences are evaluated on a copy promoted to ``oracle_dtype``. The
    error is ``max|g_auto - g_num| / max(|g_auto|_inf, |g_num|_inf)``, and
    zero when both gradients vanish.

    ``coords`` restricts the comparison to that many randomly chosen
    elements (drawn with ``seed``), which keeps checks of deep composites
    cheap.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    saved_flag, saved_grad = x.requires_grad, x.grad
    x.requires_grad, x.grad = True, None
    try:
        with Tape() as tape:
            y = f(x)
        if y.data.size != 1:
            raise ValueError(f"finite_diff_check needs a scalar function, got shape {y.shape}")
        if tape.records:
            backward(y, tape)
        auto = np.zeros(x.shape) if x.grad is None else x.grad.astype(np.float64)
    finally:
        x.requires_grad, x.grad = saved_flag, saved_grad

    base = x.data.astype(oracle_dtype)
    idx = np.arange(base.size)
    if coords is not None and coords < base.size:
        idx = np.sort(np.random.default_rng(seed).choice(base.size, size=coords, replace=False))
    numeric = np.zeros(idx.size, dtype=np.float64)
    for j, i in enumerate(idx):
        probe = base.copy().reshape(-1)
        probe[i] += eps
        hi = f(Tensor(probe.reshape(x.shape))).item()
        probe[i] -= 2 * eps
        lo = f(Tensor(probe.reshape(x.shape))).item()
        numeric[j] = (hi - lo) / (2 * eps)
    auto = auto.reshape(-1)[idx]

    scale = max(np.abs(auto).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(auto - numeric).max() / scale)
