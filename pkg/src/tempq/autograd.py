"""Small dense-tensor library with a reverse-mode gradient tape.

Values are float64 numpy arrays wrapped in :class:`Tensor`.  Operations are
recorded on the active :class:`GradTape` only when at least one input is
tracked, so the same model code runs with or without gradients.

Quantization sites use :func:`fake_quant`, whose backward honours the tape's
``round_grad`` mode:

* ``"ste"``  - straight-through rounding (LSQ-style gradients, used when
  optimizing quantization parameters),
* ``"exact"`` - rounding has zero derivative, i.e. the true derivative of the
  piecewise-smooth forward function.  Used to check the tape against finite
  differences.
"""
from __future__ import annotations

import contextvars
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Misuse of the gradient tape (non-scalar loss, unknown parameter...)."""


class MissingParameterError(TapeError):
    pass


_ACTIVE_TAPE: contextvars.ContextVar["GradTape | None"] = contextvars.ContextVar(
    "active_tape", default=None
)


class Tensor:
    __slots__ = ("data", "tracked", "__weakref__")

    def __init__(self, data, tracked: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.tracked = tracked

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        flag = ", tracked" if self.tracked else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradTape:
    """Ordered record of primitive operations for one optimization run.

    Use as a context manager; parameters are registered with :meth:`watch`.
    """

    def __init__(self, round_grad: str = "ste"):
        if round_grad not in ("ste", "exact"):
            raise ValueError(f"unknown round_grad mode {round_grad!r}")
        self.round_grad = round_grad
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.params: dict[str, Tensor] = {}
        self._token = None

    def watch(self, name: str, value) -> Tensor:
        t = Tensor(value.data if isinstance(value, Tensor) else value, tracked=True)
        self.params[name] = t
        return t

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        out.tracked = True
        self.records.append((out, inputs, vjp))

    def reset(self) -> None:
        """Drop recorded operations, keeping watched parameters."""
        self.records.clear()

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False


def active_tape() -> GradTape | None:
    return _ACTIVE_TAPE.get()


@contextmanager
def no_grad():
    token = _ACTIVE_TAPE.set(None)
    try:
        yield
    finally:
        _ACTIVE_TAPE.reset(token)


def _record(out_data, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(out_data)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.tracked for t in inputs):
        tape.record(out, inputs, vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    # b may broadcast along the leading axes of a (and vice versa)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"cannot combine shapes {a.shape} and {b.shape}") from exc


# ---------------------------------------------------------------- primitives


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return _record(ad @ bd, (a, b), vjp)


def linear(x, w, bias=None) -> Tensor:
    """``x @ w.T + bias`` with ``w`` stored as (out_features, in_features)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[1]:
        raise DimensionError(f"linear: input width {x.shape[-1]} != weight in-features {w.shape[1]}")
    xd, wd = x.data, w.data

    def vjp(g):
        return g @ wd, g.T @ xd

    out = _record(xd @ wd.T, (x, w), vjp)
    if bias is not None:
        out = add(out, bias)
    return out


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record(a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return _record(a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record(ad * bd, (a, b), vjp)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to stay finite for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x) -> Tensor:
    x = as_tensor(x)
    sig = _sigmoid(x.data)
    xd = x.data

    def vjp(g):
        return (g * (sig * (1.0 + xd * (1.0 - sig))),)

    return _record(xd * sig, (x,), vjp)


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch by name: ``add``, ``sub``, ``mul`` (binary) or ``silu`` (unary)."""
    if op == "silu":
        if b is not None:
            raise TypeError("silu is unary")
        return silu(a)
    fn = {"add": add, "sub": sub, "mul": mul}.get(op)
    if fn is None:
        raise ValueError(f"unknown elementwise op {op!r}")
    if b is None:
        raise TypeError(f"{op} is binary")
    return fn(a, b)


def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    shape = x.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record(x.data.sum(axis=axis), (x,), vjp)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis), 1.0 / n)


def sqnorm(x) -> Tensor:
    """Squared Frobenius norm."""
    x = as_tensor(x)
    xd = x.data

    def vjp(g):
        return (2.0 * g * xd,)

    return _record(np.sum(xd * xd), (x,), vjp)


def cosine(a, b) -> Tensor:
    """Cosine similarity of two equally-shaped tensors, flattened."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"cosine needs equal shapes, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    na, nb = np.sqrt(np.sum(ad * ad)), np.sqrt(np.sum(bd * bd))
    dot = np.sum(ad * bd)
    c = dot / (na * nb)

    def vjp(g):
        ga = g * (bd / (na * nb) - c * ad / (na * na))
        gb = g * (ad / (na * nb) - c * bd / (nb * nb))
        return ga, gb

    return _record(c, (a, b), vjp)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    try:
        data = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    return _record(data, xs, vjp)


def round_half_even(x: np.ndarray) -> np.ndarray:
    return np.rint(x)  # numpy rint rounds half to even


def round_ste(x) -> Tensor:
    """Round half-to-even; gradient passes through (or is zero in exact mode)."""
    x = as_tensor(x)
    tape = _ACTIVE_TAPE.get()
    exact = tape is not None and tape.round_grad == "exact"

    def vjp(g):
        return (np.zeros_like(g) if exact else g,)

    return _record(round_half_even(x.data), (x,), vjp)


def clamp(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)

    def vjp(g):
        return (g * inside,)

    return _record(np.clip(xd, lo, hi), (x,), vjp)


def fake_quant(x, s, z, qmax: int, axis: int | None = None) -> Tensor:
    """Quantize-dequantize ``x`` with scale ``s`` and zero offset ``z``.

    ``s``/``z`` are scalars or 1-D arrays broadcast along ``axis``.  ``z`` may
    be a continuous tracked value; the forward pass always uses ``round(z)``.
    Gradients: see module docstring.
    """
    x, s, z = as_tensor(x), as_tensor(s), as_tensor(z)
    xd = x.data
    sd, zd = s.data, z.data
    if axis is not None and sd.ndim == 1:
        shape = [1] * xd.ndim
        shape[axis] = -1
        sb, zb = sd.reshape(shape), zd.reshape(shape)
    else:
        sb, zb = sd, zd
    zr = round_half_even(zb)
    u = xd / sb
    r = round_half_even(u)
    code = np.clip(r + zr, 0, qmax)
    out = sb * (code - zr)

    tape = _ACTIVE_TAPE.get()
    exact = tape is not None and tape.round_grad == "exact"

    def vjp(g):
        if exact:
            gx = np.zeros_like(xd)
            gs = g * (code - zr)
            gz = np.zeros_like(g)
        else:
            v = u + zr
            below, above = v < 0, v > qmax
            inside = ~(below | above)
            gx = g * inside
            gs = g * np.where(inside, r - u, np.where(below, -zr, qmax - zr))
            gz = g * np.where(inside, 0.0, -sb)
        return gx, _unbroadcast(gs, sb.shape).reshape(sd.shape), _unbroadcast(gz, zb.shape).reshape(zd.shape)

    return _record(out, (x, s, z), vjp)


# ------------------------------------------------------------------ backward


def backward(loss: Tensor, tape: GradTape, params: Iterable[str] | None = None) -> dict[str, np.ndarray]:
    """Gradients of scalar ``loss`` w.r.t. the watched parameters of ``tape``."""
    if loss.data.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    names = list(tape.params) if params is None else list(params)
    for name in names:
        if name not in tape.params:
            raise MissingParameterError(f"parameter {name!r} is not on the tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, vjp in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, vjp(g)):
            if not inp.tracked:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    result = {}
    for name in names:
        p = tape.params[name]
        g = grads.get(id(p))
        result[name] = np.zeros_like(p.data) if g is None else np.asarray(g).reshape(p.shape)
    return result
