"""Dense float64 arrays with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` whenever at
least one input requires a gradient. Outside a tape every op is a plain numpy
evaluation, which is what inference paths rely on for speed.

    with Tape() as tape:
        loss = ops.sum(ops.relu(ops.matmul(x, w)))
    tape.backward(loss)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NumericalError(ArithmeticError):
    """Raised when an op produces NaN/Inf or hits a domain violation."""


class TapeError(RuntimeError):
    pass


class DArray:
    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.is_leaf = True
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"DArray(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # Operator sugar; the op implementations live below.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


def _raise_not_scalar(x: DArray):
    raise ShapeError(f"expected a single-element array, got shape {x.shape}")


def as_darray(x) -> DArray:
    return x if isinstance(x, DArray) else DArray(x)


@dataclass
class _Record:
    out: DArray
    inputs: tuple[DArray, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    kind: str


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered log of differentiable operations.

    Records are appended in execution order, so the list is already a
    topological order of the graph. ``backward`` walks it once in reverse.
    """

    def __init__(self, retain: bool = False):
        self.records: list[_Record] = []
        self.retain = retain
        self.consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _ACTIVE.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.records)

    def record(self, kind, out, inputs, backward) -> None:
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        out.is_leaf = False
        self.records.append(_Record(out, tuple(inputs), backward, kind))

    def backward(self, loss: DArray) -> None:
        backward(self, loss)


def current_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def backward(tape: Tape, loss: DArray) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf on the tape."""
    if loss.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    if tape.consumed:
        raise TapeError("tape already consumed; use Tape(retain=True) to backprop twice")
    if not tape.records:
        raise TapeError("tape is empty")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, DArray] = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        in_grads = rec.backward(g)
        for x, gx in zip(rec.inputs, in_grads):
            if gx is None or not x.requires_grad:
                continue
            key = id(x)
            if key in grads:
                grads[key] = grads[key] + gx
            else:
                grads[key] = gx
            if x.is_leaf:
                leaves[key] = x

    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        if g.shape != leaf.shape:
            g = np.broadcast_to(g, leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g

    if not tape.retain:
        tape.consumed = True
        tape.records = []


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


# --------------------------------------------------------------------------
# op plumbing

def _finite(arr: np.ndarray, kind: str) -> np.ndarray:
    # a finite total implies finite entries; only a non-finite total needs the full scan
    if not np.isfinite(np.add.reduce(arr, axis=None)) and not np.isfinite(arr).all():
        raise NumericalError(f"{kind}: non-finite output")
    return arr


def _emit(kind: str, value: np.ndarray, inputs: Sequence[DArray], backward_fn) -> DArray:
    _finite(value, kind)
    tape = current_tape()
    needs = tape is not None and any(x.requires_grad for x in inputs)
    out = DArray.__new__(DArray)
    out.data = value
    out.requires_grad = needs
    out.grad = None
    out.is_leaf = True
    out.name = None
    if needs:
        tape.record(kind, out, inputs, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _bshape(kind: str, a: DArray, b: DArray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{kind}: cannot broadcast {a.shape} with {b.shape}") from exc


# --------------------------------------------------------------------------
# elementwise binary

def add(a, b) -> DArray:
    a, b = as_darray(a), as_darray(b)
    _bshape("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> DArray:
    a, b = as_darray(a), as_darray(b)
    _bshape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> DArray:
    a, b = as_darray(a), as_darray(b)
    _bshape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> DArray:
    a, b = as_darray(a), as_darray(b)
    _bshape("div", a, b)
    if np.any(b.data == 0):
        raise NumericalError("div: division by zero")
    ad, bd = a.data, b.data
    out = ad / bd
    return _emit("div", out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)))


def minimum(a, b) -> DArray:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = as_darray(a), as_darray(b)
    _bshape("minimum", a, b)
    pick_a = a.data <= b.data
    return _emit("minimum", np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape),
                            _unbroadcast(g * ~pick_a, b.shape)))


def matmul(a, b) -> DArray:
    a, b = as_darray(a), as_darray(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul: both operands need ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = ad @ bd
    except ValueError as exc:
        raise ShapeError(f"matmul: {exc}") from exc

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                # weight shared across the batch: fold leading dims
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _emit("matmul", out, (a, b), bw)


# --------------------------------------------------------------------------
# elementwise unary

def neg(x) -> DArray:
    x = as_darray(x)
    return _emit("neg", -x.data, (x,), lambda g: (-g,))


def square(x) -> DArray:
    x = as_darray(x)
    xd = x.data
    return _emit("square", xd * xd, (x,), lambda g: (2.0 * g * xd,))


def relu(x) -> DArray:
    x = as_darray(x)
    out = np.maximum(x.data, 0.0)
    return _emit("relu", out, (x,), lambda g: (g * (out > 0),))


def tanh(x) -> DArray:
    x = as_darray(x)
    out = np.tanh(x.data)
    return _emit("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def exp(x) -> DArray:
    x = as_darray(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    if not np.isfinite(out).all():
        raise NumericalError("exp: overflow")
    return _emit("exp", out, (x,), lambda g: (g * out,))


def log(x) -> DArray:
    x = as_darray(x)
    xd = x.data
    if np.any(xd <= 0):
        raise NumericalError("log: argument must be positive")
    return _emit("log", np.log(xd), (x,), lambda g: (g / xd,))


def clip(x, low: float, high: float) -> DArray:
    x = as_darray(x)
    inside = (x.data >= low) & (x.data <= high)
    return _emit("clip", np.clip(x.data, low, high), (x,), lambda g: (g * inside,))


# --------------------------------------------------------------------------
# reductions and normalisations

def sum_(x, axis=None, keepdims: bool = False) -> DArray:
    x = as_darray(x)
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _emit("sum", np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x, axis=None, keepdims: bool = False) -> DArray:
    x = as_darray(x)
    shape = x.shape
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([shape[a] for a in axes]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape),)

    return _emit("mean", np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), bw)


def softmax(x, axis: int = -1) -> DArray:
    x = as_darray(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", out, (x,), bw)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> DArray:
    """Normalise over the last axis, then scale by ``gain`` and shift by ``bias``."""
    x, gain, bias = as_darray(x), as_darray(gain), as_darray(bias)
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm: gain/bias must have shape {x.shape[-1:]}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead)
        gbias = g.sum(axis=lead)
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return _emit("layer_norm", xhat * gd + bias.data, (x, gain, bias), bw)


# --------------------------------------------------------------------------
# structural

def concat(arrays: Sequence, axis: int = -1) -> DArray:
    arrays = [as_darray(a) for a in arrays]
    try:
        out = np.concatenate([a.data for a in arrays], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from exc
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", out, arrays, bw)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None
               for i in items)


def slice_(x, index) -> DArray:
    x = as_darray(x)
    try:
        out = x.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc}") from exc
    basic = _is_basic_index(index)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _emit("slice", np.array(out, dtype=np.float64), (x,), bw)


def reshape(x, shape) -> DArray:
    x = as_darray(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {exc}") from exc
    return _emit("reshape", out, (x,), lambda g: (g.reshape(old),))


def transpose(x, axes) -> DArray:
    x = as_darray(x)
    inv = np.argsort(axes)
    return _emit("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def masked_fill(x, mask: np.ndarray, value: float) -> DArray:
    """Replace entries where ``mask`` is true by a constant (no gradient flows there)."""
    x = as_darray(x)
    mask = np.asarray(mask, dtype=bool)
    keep = ~mask
    return _emit("masked_fill", np.where(mask, value, x.data), (x,),
                 lambda g: (_unbroadcast(g * keep, x.shape),))


# --------------------------------------------------------------------------
# stochastic

def dropout(x, p: float, train: bool, rng: np.random.Generator | None = None) -> DArray:
    """Inverted dropout; the identity in eval mode."""
    x = as_darray(x)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng stream")
    keep = rng.random(x.shape, dtype=np.float32) >= np.float32(p)
    scale = keep * (1.0 / (1.0 - p))
    return _emit("dropout", x.data * scale, (x,), lambda g: (g * scale,))


def gaussian_sample(mean_, log_std, rng: np.random.Generator) -> tuple[DArray, np.ndarray]:
    """Reparameterised draw ``mean + exp(log_std) * noise``; returns the draw and the noise."""
    mean_, log_std = as_darray(mean_), as_darray(log_std)
    _bshape("gaussian_sample", mean_, log_std)
    shape = np.broadcast_shapes(mean_.shape, log_std.shape)
    noise = rng.standard_normal(shape)
    std = np.exp(log_std.data)
    out = mean_.data + std * noise
    return _emit("gaussian_sample", out, (mean_, log_std),
                 lambda g: (_unbroadcast(g, mean_.shape),
                            _unbroadcast(g * noise * std, log_std.shape))), noise


# --------------------------------------------------------------------------
# generic dispatcher

OPS: dict[str, Callable] = {
    "matmul": matmul, "add": add, "sub": sub, "mul": mul, "div": div,
    "minimum": minimum, "neg": neg, "square": square, "relu": relu,
    "tanh": tanh, "exp": exp, "log": log, "clip": clip, "sum": sum_,
    "mean": mean, "softmax": softmax, "layer_norm": layer_norm,
    "concat": lambda *xs, axis=-1: concat(xs, axis=axis), "slice": slice_,
    "reshape": reshape, "transpose": transpose, "masked_fill": masked_fill,
    "dropout": dropout, "gaussian_sample": gaussian_sample,
}


def forward(tape: Tape | None, op_kind: str, inputs: Sequence, **attrs):
    """Evaluate ``op_kind`` on ``inputs``, recording on ``tape`` if given."""
    try:
        fn = OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op {op_kind!r}") from None
    if tape is None:
        return fn(*inputs, **attrs)
    with tape:
        return fn(*inputs, **attrs)
