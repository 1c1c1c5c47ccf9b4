"""Dense tensors with tape-based reverse-mode differentiation.

Every op works on numpy arrays and keeps the dtype of its inputs, so the same
graph runs in float32 for training and in float64 for gradient checks.  Ops
are only recorded while a :class:`Tape` is active; outside one they are plain
forward computations.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_from_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._from_op = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


class Parameter(Tensor):
    """A named leaf tensor that always requires grad."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


@dataclass
class _Entry:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    def __init__(self) -> None:
        self.entries: list[_Entry] = []

    def __len__(self) -> int:
        return len(self.entries)

    def reset(self) -> None:
        for e in self.entries:
            e.out.grad = None
        self.entries.clear()


_ACTIVE: list[Tape] = []


@contextmanager
def recording() -> Iterator[Tape]:
    """Record ops onto a fresh tape for the duration of the block."""
    t = Tape()
    _ACTIVE.append(t)
    try:
        yield t
    finally:
        _ACTIVE.pop()


def _check_finite(op: str, arrays: Sequence[np.ndarray]) -> None:
    for a in arrays:
        if a.dtype.kind == "f" and not np.isfinite(a).all():
            raise NonFiniteError(f"{op}: non-finite value in input of shape {a.shape}")


def _make(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    out._from_op = True
    if needs and _ACTIVE:
        _ACTIVE[-1].entries.append(_Entry(out, inputs, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_finite("add", (a.data, b.data))
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None
    return _make("add", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_finite("sub", (a.data, b.data))
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}") from None
    return _make("sub", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_finite("mul", (a.data, b.data))
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None
    return _make(
        "mul",
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    _check_finite("scale", (a.data,))
    c = a.dtype.type(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    _check_finite("gelu", (x.data,))
    d = x.data
    c = d.dtype.type(_GELU_C)
    k = d.dtype.type(0.044715)
    d2 = d * d
    t = np.tanh(c * d * (1.0 + k * d2))
    out = 0.5 * d * (1.0 + t)

    def back(g):
        dinner = c * (1.0 + 3.0 * k * d2)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * dinner),)

    return _make("gelu", out.astype(d.dtype, copy=False), (x,), back)


def relu(x: Tensor) -> Tensor:
    _check_finite("relu", (x.data,))
    mask = x.data > 0
    return _make("relu", x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------- reductions


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    _check_finite("sum", (x.data,))
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return _make("sum", np.asarray(out, dtype=x.dtype), (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


# ---------------------------------------------------------------- shapes


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    return _make("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return _make("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    try:
        out = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in xs]} on axis {axis}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs))
        )

    return _make("concat", out, tuple(xs), back)


def take(x: Tensor, index) -> Tensor:
    """Basic (slice) indexing."""
    out = x.data[index]

    def back(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _make("take", out, (x,), back)


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from None
    return _make("broadcast_to", out, (x,), lambda g: (_unbroadcast(g, x.shape),))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} @ {b.shape}")
    _check_finite("matmul", (a.data, b.data))
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions disagree for {a.shape} @ {b.shape}") from None

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.data.ndim == 2 and a.data.ndim > 2:
            # weight matrix shared across leading dims: fold them into rows
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", out, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b with w of shape (in, out)."""
    if x.shape[-1] != w.shape[0] or w.data.ndim != 2:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    _check_finite("linear", (x.data, w.data) if b is None else (x.data, w.data, b.data))
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data
    if b is not None:
        out += b.data
    out = out.reshape(x.shape[:-1] + (w.shape[1],))

    def back(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape)
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return _make("linear", out, inputs, back)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(f"embedding: ids outside [0, {weight.shape[0]})")
    _check_finite("embedding", (weight.data,))

    def back(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _make("embedding", weight.data[ids], (weight,), back)


# ---------------------------------------------------------------- normalisation


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for shape {x.shape}")
    _check_finite("softmax", (x.data,))
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make("softmax", s, (x,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs input {x.shape}")
    _check_finite("layer_norm", (x.data, gamma.data, beta.data))
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + d.dtype.type(eps))
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data
    n = d.shape[-1]

    def back(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        gx_hat = g * gamma.data
        gx = rstd * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / n
        )
        return gx, ggamma, gbeta

    return _make("layer_norm", out, (x, gamma, beta), back)


def cross_entropy(logits: Tensor, labels: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Mean softmax cross-entropy over rows of ``logits`` (N, V).

    ``weights`` (N,) of 0/1 drops rows from both numerator and denominator.
    Accumulates in float64 regardless of the logits dtype.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be (N, V), got {logits.shape}")
    labels = np.asarray(labels).reshape(-1)
    if labels.shape[0] != logits.shape[0]:
        raise ShapeError(f"cross_entropy: {labels.shape[0]} labels for {logits.shape[0]} rows")
    _check_finite("cross_entropy", (logits.data,))
    w = np.ones(labels.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    denom = w.sum()
    if denom <= 0:
        raise ValueError("cross_entropy: no rows carry weight")
    z = logits.data.astype(np.float64)
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    rows = np.arange(labels.shape[0])
    nll = lse - z[rows, labels]
    loss = float((nll * w).sum() / denom)

    def back(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        p *= (w / denom)[:, None] * float(g)
        return (p.astype(logits.dtype),)

    return _make("cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), back)


# ---------------------------------------------------------------- dispatch

_OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": lambda x, factor: scale(x, factor),
    "gelu": gelu,
    "relu": relu,
    "sum": sum_,
    "mean": mean,
    "reshape": reshape,
    "transpose": transpose,
    "concat": lambda *xs, axis=0: concat(xs, axis=axis),
    "matmul": matmul,
    "linear": linear,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "embedding": embedding,
    "cross_entropy": cross_entropy,
}


def forward_op(op_kind: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    """Apply a named op; ``attrs`` become keyword arguments."""
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op {op_kind!r}") from None
    return fn(*inputs, **(attrs or {}))


# ---------------------------------------------------------------- reverse pass


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Intermediate grads are dropped afterwards; the tape is reset.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not tape.entries:
        raise ValueError("backward: tape is empty")
    loss.grad = np.ones_like(loss.data)
    for e in reversed(tape.entries):
        g = e.out.grad
        if g is None:
            continue
        grads = e.backward(g)
        for inp, gi in zip(e.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            # never accumulate in place: gi may alias another op's gradient
            if inp.grad is None:
                inp.grad = gi if gi.dtype == inp.dtype else gi.astype(inp.dtype)
            else:
                inp.grad = inp.grad + gi
    tape.reset()
    loss.grad = None


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    failures: list[tuple[str, tuple[int, ...], float, float]] = field(default_factory=list)
    checked: int = 0
    tol: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.failures


def _rel_err(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    h: float = 1e-5,
    tol: float = 1e-4,
    n_coords: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-7,
) -> GradCheckReport:
    """Compare tape gradients with central differences.

    ``f`` rebuilds the scalar loss from the current parameter values.  With
    ``n_coords`` set, that many coordinates are sampled uniformly over all
    parameters; otherwise every coordinate is checked.  Relative errors use
    ``max(|analytic|, |numeric|, floor)`` as the denominator.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params = list(params)
    zero_grad(params)
    with recording() as tape:
        loss = f()
    if tape.entries:
        backward(loss, tape)
    analytic = {id(p): np.array(p.grad if p.grad is not None else np.zeros_like(p.data)) for p in params}
    zero_grad(params)

    coords = [(i, idx) for i, p in enumerate(params) for idx in np.ndindex(p.shape)]
    if n_coords is not None and n_coords < len(coords):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    report = GradCheckReport(max_rel_error={p.name: 0.0 for p in params}, tol=tol)
    for i, idx in coords:
        p = params[i]
        orig = p.data[idx]
        p.data[idx] = orig + h
        fp = float(f().data)
        p.data[idx] = orig - h
        fm = float(f().data)
        p.data[idx] = orig
        num = (fp - fm) / (2 * h)
        ana = float(analytic[id(p)][idx])
        err = _rel_err(ana, num, floor)
        report.max_rel_error[p.name] = max(report.max_rel_error[p.name], err)
        report.checked += 1
        if err > tol:
            report.failures.append((p.name, idx, ana, num))
    return report


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """Rescale grads so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * p.dtype.type(scale)
    return total


def adam_step(params: Sequence[Parameter], state: AdamState) -> AdamState:
    """Bias-corrected Adam update in place; clears grads afterwards."""
    for p in params:
        if p.grad is None:
            raise ValueError(f"adam_step: missing grad for {p.name}")
        if not np.isfinite(p.grad).all():
            raise NonFiniteError(f"adam_step: non-finite grad for {p.name}")
    state.step += 1
    t = state.step
    for p in params:
        dt = p.dtype.type
        g = p.grad
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m *= dt(state.beta1)
        m += dt(1.0 - state.beta1) * g
        v *= dt(state.beta2)
        v += dt(1.0 - state.beta2) * (g * g)
        if state.lr != 0.0:
            mhat = m / dt(1.0 - state.beta1**t)
            vhat = v / dt(1.0 - state.beta2**t)
            p.data -= dt(state.lr) * mhat / (np.sqrt(vhat) + dt(state.eps))
        p.grad = None
    return state
