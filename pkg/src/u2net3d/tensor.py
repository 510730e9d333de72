"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array plus an optional gradient buffer. While a
:class:`Tape` is active, differentiable operations append records (inputs,
output, local backward rule); :func:`backward` replays the records in reverse
execution order and accumulates gradients into every leaf tensor that has
``requires_grad`` set.

All operations are pure: inputs are never mutated, outputs are freshly
allocated, and reduction orders are fixed, so identical inputs give
bit-identical outputs.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


_DTYPES = {"float32": np.float32, "float64": np.float64}


def np_dtype(name: str) -> np.dtype:
    if name not in _DTYPES:
        raise ValueError(f"unsupported dtype {name!r} (use 'float32' or 'float64')")
    return np.dtype(_DTYPES[name])


class Tensor:
    """N-dimensional array of reals with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return affine(self, -1.0, 0.0)

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add(self, -other)
        return add(self, affine(other, -1.0, 0.0))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def astensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of executed operations for reverse-mode replay.

    Used as a context manager; ops executed inside the block are recorded when
    any input requires a gradient. Tape order is execution order, which is a
    valid topological order for the reverse sweep.
    """

    def __init__(self):
        # (output, inputs, vjp) — vjp maps the output cotangent to one
        # cotangent per input (None where an input does not need one).
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"
        return False

    def __len__(self):
        return len(self.records)


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record_op(out: Tensor, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Register an op on the active tape if any input tracks gradients."""
    tape = active_tape()
    if tape is not None and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        tape.records.append((out, tuple(inputs), vjp))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into every gradient-tracking leaf's ``grad``.

    ``loss`` must be scalar. Intermediate cotangents are held in a scratch map
    and freed as soon as their producing record has been replayed; repeated
    calls on the same tape add the same gradients again (exact accumulation).
    """
    if loss.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    tensors: dict[int, Tensor] = {id(loss): loss}
    produced = {id(out) for out, _, _ in tape.records}
    for out, inputs, vjp in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                # Out-of-place: vjps may return views/aliases of the cotangent.
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                tensors[key] = inp
    for key, g in grads.items():
        leaf = tensors[key]
        if key in produced or not leaf.requires_grad:
            continue
        leaf.grad = g if leaf.grad is None else leaf.grad + g


# --------------------------------------------------------------------------
# Elementwise and reduction ops
# --------------------------------------------------------------------------


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a = astensor(a)
    if np.isscalar(b) or isinstance(b, (int, float)):
        out = Tensor(a.data + a.data.dtype.type(b))
        return record_op(out, [a], lambda g: (g,))
    b = astensor(b, dtype=a.dtype)
    _same_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    return record_op(out, [a, b], lambda g: (g, g))


def mul(a, b) -> Tensor:
    a = astensor(a)
    if np.isscalar(b) or isinstance(b, (int, float)):
        c = a.data.dtype.type(b)
        out = Tensor(a.data * c)
        return record_op(out, [a], lambda g: (g * c,))
    b = astensor(b, dtype=a.dtype)
    _same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)
    return record_op(out, [a, b], lambda g: (g * b.data, g * a.data))


def affine(x, scale, shift) -> Tensor:
    """y = scale * x + shift with constant (non-differentiated) scale/shift."""
    x = astensor(x)
    s = np.asarray(scale, dtype=x.dtype)
    out = Tensor(x.data * s + np.asarray(shift, dtype=x.dtype))
    return record_op(out, [x], lambda g: (g * s,))


def log(x) -> Tensor:
    x = astensor(x)
    out = Tensor(np.log(x.data))
    return record_op(out, [x], lambda g: (g / x.data,))


def pow_const(x, p: float) -> Tensor:
    x = astensor(x)
    out = Tensor(x.data**p)
    if p == 0:
        return record_op(out, [x], lambda g: (np.zeros_like(x.data),))
    return record_op(out, [x], lambda g: (g * p * x.data ** (p - 1),))


def clamp(x, lo: float, hi: float) -> Tensor:
    x = astensor(x)
    out = Tensor(np.clip(x.data, lo, hi))
    mask = (x.data >= lo) & (x.data <= hi)
    return record_op(out, [x], lambda g: (g * mask,))


def sum_all(x) -> Tensor:
    x = astensor(x)
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))
    return record_op(out, [x], lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))


def mean_all(x) -> Tensor:
    x = astensor(x)
    n = x.size
    out = Tensor(np.asarray(x.data.mean(), dtype=x.dtype))
    return record_op(out, [x], lambda g: ((np.broadcast_to(g, x.shape) / n).astype(x.dtype),))


def gather(x, idx) -> Tensor:
    """Pick elements of the flattened input at integer indices."""
    x = astensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.size):
        raise IndexError(f"gather index out of range [0, {x.size})")
    flat = x.data.reshape(-1)
    out = Tensor(flat[idx])

    def vjp(g):
        buf = np.zeros(x.size, dtype=x.dtype)
        np.add.at(buf, idx.reshape(-1), g.reshape(-1))
        return (buf.reshape(x.shape),)

    return record_op(out, [x], vjp)


def take_channel(x, c: int) -> Tensor:
    """x[c] for a channel-first tensor."""
    x = astensor(x)
    out = Tensor(x.data[c].copy())

    def vjp(g):
        buf = np.zeros_like(x.data)
        buf[c] = g
        return (buf,)

    return record_op(out, [x], vjp)


def reshape(x, shape) -> Tensor:
    x = astensor(x)
    out = Tensor(x.data.reshape(shape))
    return record_op(out, [x], lambda g: (g.reshape(x.shape),))


def concat(xs, axis: int = 0) -> Tensor:
    xs = [astensor(x) for x in xs]
    out = Tensor(np.concatenate([x.data for x in xs], axis=axis))
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return record_op(out, xs, vjp)


# --------------------------------------------------------------------------
# Activations / normalization / softmax
# --------------------------------------------------------------------------


def leaky_relu(x, slope: float = 0.01) -> Tensor:
    x = astensor(x)
    neg = x.data < 0
    out_data = x.data.copy()
    out_data[neg] *= x.dtype.type(slope)
    out = Tensor(out_data)

    def vjp(g):
        gx = g.copy()
        gx[neg] *= x.dtype.type(slope)
        return (gx,)

    return record_op(out, [x], vjp)


def softmax_channels(x) -> Tensor:
    """Softmax over axis 0 (class channels), max-subtracted for stability."""
    x = astensor(x)
    if x.ndim < 1:
        raise ShapeError("softmax_channels requires at least one axis")
    z = x.data - x.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=0, keepdims=True)
    out = Tensor(p)

    def vjp(g):
        dot = (g * p).sum(axis=0, keepdims=True)
        return (p * (g - dot),)

    return record_op(out, [x], vjp)


def instance_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Per-channel spatial standardization followed by an affine map.

    x: (C, *spatial); gain/bias: (C,). Variance is the biased (1/N) estimate.
    """
    x, gain, bias = astensor(x), astensor(gain), astensor(bias)
    if eps <= 0:
        raise ValueError("instance_norm eps must be positive")
    C = x.shape[0]
    if gain.shape != (C,) or bias.shape != (C,):
        raise ShapeError(f"gain/bias must have shape ({C},), got {gain.shape}/{bias.shape}")
    spatial_axes = tuple(range(1, x.ndim))
    mean = x.data.mean(axis=spatial_axes, keepdims=True)
    var = x.data.var(axis=spatial_axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = (x.data - mean) * inv
    bcast = (C,) + (1,) * (x.ndim - 1)
    out = Tensor(xhat * gain.data.reshape(bcast) + bias.data.reshape(bcast))

    def vjp(g):
        ggain = gbias = gx = None
        if gain.requires_grad:
            ggain = (g * xhat).sum(axis=spatial_axes)
        if bias.requires_grad:
            gbias = g.sum(axis=spatial_axes)
        if x.requires_grad:
            gh = g * gain.data.reshape(bcast)
            gm = gh.mean(axis=spatial_axes, keepdims=True)
            gxm = (gh * xhat).mean(axis=spatial_axes, keepdims=True)
            gx = inv * (gh - gm - xhat * gxm)
        return (gx, ggain, gbias)

    return record_op(out, [x, gain, bias], vjp)
