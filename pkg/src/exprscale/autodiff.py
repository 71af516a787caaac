"""Dense tensors with tape-based reverse-mode differentiation.

Design notes:
  * Values live in numpy arrays; float32 is the working precision and
    float64 is available for gradient verification.
  * Recording is explicit: ops append to the innermost active ``Tape``
    (a context manager). With no tape active the same ops run eagerly
    with zero bookkeeping, which is what evaluation uses.
  * The tape stores ops in creation order. Creation order is a
    topological order of the graph, so one reverse sweep propagates
    gradients correctly and deterministically.
  * Every op output is checked for NaN/Inf; a violation raises
    ``NumericError`` immediately instead of poisoning the run.
"""

from __future__ import annotations

import math
import threading

import numpy as np
from scipy.special import ndtr


class ShapeError(ValueError):
    """Operand shapes do not satisfy an op's contract."""


class NumericError(ArithmeticError):
    """A tensor op produced or received NaN/Inf."""


_SQRT_2PI = math.sqrt(2.0 * math.pi)

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = []
        _local.tapes = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by '{op}'")


class Tensor:
    """Dense row-major tensor. ``requires_grad`` marks trainable leaves."""

    __slots__ = ("data", "requires_grad", "name", "_tracked")

    def __init__(self, data, dtype=np.float32, requires_grad: bool = False,
                 name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._tracked = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        nm = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{nm})"

    # operator sugar; constants enter the graph as non-differentiable tensors
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    __radd__ = __add__
    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


class Tape:
    """Ordered record of one differentiable computation.

    Use as a context manager around the forward pass, then call
    ``gradients(loss)``. Single-threaded by design: one tape per training
    step. Leaves (tensors with ``requires_grad``) are registered the first
    time an op consumes them.
    """

    def __init__(self):
        self._ops: list[tuple[Tensor, tuple]] = []
        self._leaves: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack().pop()
        if popped is not self:  # pragma: no cover - misuse guard
            raise RuntimeError("tape stack corrupted")

    def watch(self, tensor: Tensor) -> None:
        if not tensor._tracked:
            tensor._tracked = True
            self._leaves.append(tensor)

    def _record(self, out: Tensor, pulls: tuple) -> None:
        """pulls: ((input_tensor, fn grad_out -> grad_contribution), ...)."""
        self._ops.append((out, pulls))

    def gradients(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Reverse sweep: d loss / d leaf for every registered leaf.

        The sweep walks ops in exact reverse recording order; leaves the
        loss never touched get zero gradients. Deterministic: repeated
        sweeps produce bit-identical arrays.
        """
        if loss.data.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        # slot -> (array, owned). Contributions from pulls may alias or view
        # the upstream gradient, so an array is only mutated in place once
        # this sweep owns a private copy.
        grads: dict[int, tuple[np.ndarray, bool]] = {
            id(loss): (np.ones_like(loss.data), True)
        }
        for out, pulls in reversed(self._ops):
            slot = grads.pop(id(out), None)
            if slot is None:
                continue
            g = slot[0]
            for inp, pull in pulls:
                contrib = pull(g)
                have = grads.get(id(inp))
                if have is None:
                    grads[id(inp)] = (contrib, False)
                elif have[1]:
                    arr = have[0]
                    arr += contrib
                else:
                    grads[id(inp)] = (have[0] + contrib, True)
        result = {}
        for leaf in self._leaves:
            have = grads.get(id(leaf))
            result[leaf] = np.zeros_like(leaf.data) if have is None else have[0]
            leaf._tracked = False
        return result


def backward(loss: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    """Gradient map for every leaf registered on ``tape``."""
    return tape.gradients(loss)


def _track(inputs: tuple[Tensor, ...]) -> tuple[Tape | None, bool]:
    tape = _active_tape()
    if tape is None:
        return None, False
    live = False
    for t in inputs:
        if t.requires_grad and not t._tracked:
            tape.watch(t)
        live = live or t.requires_grad or t._tracked
    return tape, live


def _emit(op: str, data: np.ndarray, tape, live: bool, pulls) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.name = None
    out._tracked = False
    if tape is not None and live:
        out._tracked = True
        tape._record(out, pulls())
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitive ops


def add(a: Tensor, b: Tensor) -> Tensor:
    tape, live = _track((a, b))
    data = a.data + b.data

    def pulls():
        return (
            (a, lambda g: _unbroadcast(g, a.data.shape)),
            (b, lambda g: _unbroadcast(g, b.data.shape)),
        )

    return _emit("add", data, tape, live, pulls)


def sub(a: Tensor, b: Tensor) -> Tensor:
    tape, live = _track((a, b))
    data = a.data - b.data

    def pulls():
        return (
            (a, lambda g: _unbroadcast(g, a.data.shape)),
            (b, lambda g: _unbroadcast(-g, b.data.shape)),
        )

    return _emit("sub", data, tape, live, pulls)


def mul(a: Tensor, b: Tensor) -> Tensor:
    tape, live = _track((a, b))
    data = a.data * b.data

    def pulls():
        ad, bd = a.data, b.data
        return (
            (a, lambda g: _unbroadcast(g * bd, ad.shape)),
            (b, lambda g: _unbroadcast(g * ad, bd.shape)),
        )

    return _emit("mul", data, tape, live, pulls)


def scale(a: Tensor, factor: float) -> Tensor:
    """a * python scalar, preserving dtype."""
    tape, live = _track((a,))
    f = a.data.dtype.type(factor)
    data = a.data * f

    def pulls():
        return ((a, lambda g: g * f),)

    return _emit("scale", data, tape, live, pulls)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """np.matmul semantics: 2-D matrix product or stacked (batched) product."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul expects >=2-D operands")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner dims disagree: {a.data.shape} x {b.data.shape}")
    tape, live = _track((a, b))
    data = np.matmul(a.data, b.data)

    def pulls():
        ad, bd = a.data, b.data

        def pull_a(g):
            ga = np.matmul(g, bd.swapaxes(-1, -2))
            return _unbroadcast(ga, ad.shape)

        def pull_b(g):
            gb = np.matmul(ad.swapaxes(-1, -2), g)
            return _unbroadcast(gb, bd.shape)

        return ((a, pull_a), (b, pull_b))

    return _emit("matmul", data, tape, live, pulls)


def transpose(a: Tensor, axes: tuple) -> Tensor:
    tape, live = _track((a,))
    data = np.ascontiguousarray(np.transpose(a.data, axes))
    inverse = tuple(np.argsort(axes))

    def pulls():
        return ((a, lambda g: np.ascontiguousarray(np.transpose(g, inverse))),)

    return _emit("transpose", data, tape, live, pulls)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    tape, live = _track((a,))
    data = a.data.reshape(shape)
    orig = a.data.shape

    def pulls():
        return ((a, lambda g: g.reshape(orig)),)

    return _emit("reshape", data, tape, live, pulls)


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Select rows of a 2-D table; gradient scatter-adds back into it."""
    if table.data.ndim != 2:
        raise ShapeError("gather_rows expects a 2-D table")
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError("gather_rows expects 1-D ids")
    tape, live = _track((table,))
    data = table.data[ids]

    def pulls():
        nrows = table.data.shape[0]

        def pull(g):
            out = np.zeros((nrows, g.shape[-1]), dtype=g.dtype)
            np.add.at(out, ids, g)
            return out

        return ((table, pull),)

    return _emit("gather_rows", data, tape, live, pulls)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    tape, live = _track((a,))
    data = a.data.sum(axis=axis, keepdims=keepdims)
    if np.ndim(data) == 0:
        data = np.asarray(data)

    def pulls():
        shp = a.data.shape

        def pull(g):
            if axis is None:
                return np.broadcast_to(g.reshape((1,) * len(shp)), shp).astype(g.dtype)
            g2 = g if keepdims else np.expand_dims(g, axis)
            return np.broadcast_to(g2, shp).astype(g.dtype)

        return ((a, pull),)

    return _emit("sum", data, tape, live, pulls)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU: x * Phi(x) with the normal CDF, not the tanh fit."""
    tape, live = _track((x,))
    xd = x.data
    phi_x = ndtr(xd).astype(xd.dtype, copy=False)
    data = xd * phi_x

    def pulls():
        def pull(g):
            dens = np.exp(-0.5 * xd * xd) / xd.dtype.type(_SQRT_2PI)
            return g * (phi_x + xd * dens).astype(g.dtype, copy=False)

        return ((x, pull),)

    return _emit("gelu", data, tape, live, pulls)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted for stability."""
    tape, live = _track((x,))
    xd = x.data
    shifted = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def pulls():
        s = data

        def pull(g):
            inner = (g * s).sum(axis=-1, keepdims=True)
            return s * (g - inner)

        return ((x, pull),)

    return _emit("softmax_rows", data, tape, live, pulls)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float) -> Tensor:
    """Per-token normalization over the last (feature) axis.

    Population variance; ``eps`` guards the zero-variance case.
    """
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm gain/bias must have shape ({d},), got "
            f"{gain.data.shape} / {bias.data.shape}")
    tape, live = _track((x, gain, bias))
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def pulls():
        gd = gain.data
        feat_axes = tuple(range(xd.ndim - 1))

        def pull_x(g):
            dxhat = g * gd
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            return inv * (dxhat - m1 - xhat * m2)

        def pull_gain(g):
            return (g * xhat).sum(axis=feat_axes)

        def pull_bias(g):
            return g.sum(axis=feat_axes)

        return ((x, pull_x), (gain, pull_gain), (bias, pull_bias))

    return _emit("layer_norm", data, tape, live, pulls)
