"""Dense float64 tensors with a reverse-mode gradient tape.

Everything in this package computes on :class:`Tensor`. Operations executed
while a :class:`Tape` is active record a backward rule; ``tape.backward(loss)``
replays the rules in reverse and accumulates gradients into every reachable
leaf. Outside a tape, operations are plain numpy calls and produce tensors
with ``requires_grad=False``.

Design constraints:
  * float64 only — gradient checking against central finite differences
    needs the precision, and nothing here is large enough to care about speed.
  * broadcasting is numpy's trailing-dimension alignment, nothing more.
  * non-finite values raise instead of propagating (see ``set_finite_checks``).
"""

from __future__ import annotations

import numpy as np


class AutogradError(Exception):
    """Base class for tensor/tape errors."""


class ShapeError(AutogradError):
    """Operand shapes are incompatible."""


class DomainError(AutogradError):
    """Operand values outside the mathematical domain of the op."""


class NonFiniteError(AutogradError):
    """A NaN or Inf was produced or supplied."""


class TapeError(AutogradError):
    """Tape misuse: backward on non-scalars, double backward, etc."""


_CHECK_FINITE = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-op NaN/Inf detection. Returns the previous setting."""
    global _CHECK_FINITE
    prev = _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)
    return prev


def _ensure_finite(arr: np.ndarray, where: str) -> None:
    if not _CHECK_FINITE:
        return
    # a non-finite sum is the cheap screen; isfinite().all() then separates a
    # genuine NaN/Inf from (desk-scale-impossible) accumulator overflow
    if not np.isfinite(arr.sum()) and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {where}")


_TAPE_STACK: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered record of operations for one reverse-mode pass.

    Use as a context manager around the forward computation:

        with Tape() as tape:
            loss = model(...)
            tape.backward(loss)

    Entries are (output, inputs, backward_fn) appended in execution order,
    so reverse iteration is a valid reverse-topological order. ``backward``
    may run once per tape; call ``reset`` to reuse.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self._leaf_ids: dict[int, "Tensor"] = {}
        self._output_ids: set[int] = set()
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        assert _TAPE_STACK and _TAPE_STACK[-1] is self
        _TAPE_STACK.pop()

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, out: "Tensor", inputs: tuple, backward_fn) -> None:
        self._entries.append((out, inputs, backward_fn))
        self._output_ids.add(id(out))
        for t in inputs:
            if t.requires_grad and id(t) not in self._output_ids:
                self._leaf_ids.setdefault(id(t), t)

    def reset(self) -> None:
        self._entries.clear()
        self._leaf_ids.clear()
        self._output_ids.clear()
        self._consumed = False

    def backward(self, loss: "Tensor") -> None:
        """Accumulate d loss/d leaf into ``.grad`` of every recorded leaf.

        Leaves that do not influence ``loss`` receive zeros.
        """
        if self._consumed:
            raise TapeError("backward already ran on this tape; call reset() first")
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._consumed = True

        # accumulation is out-of-place throughout: stored gradients may alias
        # each other (pass-through ops return their upstream gradient object),
        # so nothing here may mutate an array it did not just allocate
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, backward_fn in reversed(self._entries):
            gout = pending.pop(id(out), None)
            if gout is None:
                continue
            for t, g in zip(inputs, backward_fn(gout)):
                if g is None or not t.requires_grad:
                    continue
                tid = id(t)
                acc = pending.get(tid)
                pending[tid] = g if acc is None else acc + g

        for tid, leaf in self._leaf_ids.items():
            g = pending.get(tid)
            if g is None:
                g = np.zeros_like(leaf.data)
            if leaf.grad is None:
                leaf.grad = g
            else:
                leaf.grad = leaf.grad + g


class Tensor:
    """Dense n-dimensional float64 value, row-major, optionally on the tape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        _ensure_finite(arr, "Tensor constructor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """A defensive copy of the underlying array."""
        return self.data.copy()

    def detach(self) -> "Tensor":
        """Same values, severed from the tape."""
        return Tensor(self.data.copy())

    def backward(self) -> None:
        tape = active_tape()
        if tape is None:
            raise TapeError("no active tape; wrap the computation in `with Tape() as t:`")
        tape.backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic operators delegate to the module-level ops

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, key):
        return getitem(self, key)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def abs(self):
        return absolute(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def softmax(self, axis=-1):
        return softmax(self, axis)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=np.float64))


def parameter(data) -> Tensor:
    """A leaf tensor that collects gradients."""
    return Tensor(data, requires_grad=True)


def constant(data) -> Tensor:
    return _wrap(data)


def _make_output(data: np.ndarray, inputs: tuple, backward_fn, opname: str) -> Tensor:
    _ensure_finite(data, opname)
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    out.grad = None
    if needs:
        tape.record(out, inputs, backward_fn)
    return out


def custom_op(data: np.ndarray, inputs: tuple, backward_fn, name: str) -> Tensor:
    """Record a hand-written operation on the tape.

    ``backward_fn(grad_out)`` must return one gradient array (or None) per
    input, and must not mutate arrays it did not allocate.
    """
    return _make_output(np.asarray(data, dtype=np.float64), tuple(inputs),
                        backward_fn, name)


def scatter_add(size: int, indices: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Dense accumulation of values at flat indices (duplicates add)."""
    return np.bincount(indices, weights=values, minlength=size)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast up from ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError as e:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast") from e


def _apply2(ufunc, a: Tensor, b: Tensor, opname: str) -> np.ndarray:
    try:
        return ufunc(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast") from e


# ---------------------------------------------------------------------------
# elementwise binary ops


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make_output(_apply2(np.add, a, b, "add"), (a, b), bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make_output(_apply2(np.subtract, a, b, "sub"), (a, b), bw, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make_output(_apply2(np.multiply, a, b, "mul"), (a, b), bw, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if np.any(b.data == 0.0):
        raise DomainError("div: divisor contains zeros")
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)

    return _make_output(_apply2(np.divide, a, b, "div"), (a, b), bw, "div")


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Componentwise min; on ties the subgradient goes to ``a``."""
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "minimum")
    pick_a = a.data <= b.data

    def bw(g):
        return _unbroadcast(g * pick_a, a.data.shape), _unbroadcast(g * ~pick_a, b.data.shape)

    return _make_output(np.minimum(a.data, b.data), (a, b), bw, "minimum")


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Componentwise max; on ties the subgradient goes to ``a``."""
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "maximum")
    pick_a = a.data >= b.data

    def bw(g):
        return _unbroadcast(g * pick_a, a.data.shape), _unbroadcast(g * ~pick_a, b.data.shape)

    return _make_output(np.maximum(a.data, b.data), (a, b), bw, "maximum")


# ---------------------------------------------------------------------------
# elementwise unary ops


def neg(a: Tensor) -> Tensor:
    a = _wrap(a)
    return _make_output(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a: Tensor) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return _make_output(a.data * mask, (a,), bw, "relu")


def _sigmoid_data(x: np.ndarray) -> np.ndarray:
    # piecewise form avoids exp overflow on either tail
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = _sigmoid_data(a.data)

    def bw(g):
        return (g * out * (1.0 - out),)

    return _make_output(out, (a,), bw, "sigmoid")


def exp(a: Tensor) -> Tensor:
    a = _wrap(a)
    with np.errstate(over="ignore"):  # overflow raises NonFiniteError below
        out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _make_output(out, (a,), bw, "exp")


def log(a: Tensor) -> Tensor:
    a = _wrap(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log: operand has non-positive entries")
    ad = a.data

    def bw(g):
        return (g / ad,)

    return _make_output(np.log(ad), (a,), bw, "log")


def sqrt(a: Tensor) -> Tensor:
    a = _wrap(a)
    if np.any(a.data < 0.0):
        raise DomainError("sqrt: operand has negative entries")
    out = np.sqrt(a.data)

    def bw(g):
        return (g * 0.5 / out,)

    return _make_output(out, (a,), bw, "sqrt")


def absolute(a: Tensor) -> Tensor:
    """|a|, with subgradient 0 at the kink."""
    a = _wrap(a)
    sign = np.sign(a.data)

    def bw(g):
        return (g * sign,)

    return _make_output(np.abs(a.data), (a,), bw, "abs")


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^a) via logaddexp, stable on both tails."""
    a = _wrap(a)
    ad = a.data

    def bw(g):
        return (g * _sigmoid_data(ad),)

    return _make_output(np.logaddexp(0.0, ad), (a,), bw, "softplus")


def sin(a: Tensor) -> Tensor:
    a = _wrap(a)
    ad = a.data

    def bw(g):
        return (g * np.cos(ad),)

    return _make_output(np.sin(ad), (a,), bw, "sin")


def cos(a: Tensor) -> Tensor:
    a = _wrap(a)
    ad = a.data

    def bw(g):
        return (g * -np.sin(ad),)

    return _make_output(np.cos(ad), (a,), bw, "cos")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient is zero where the clip is active."""
    a = _wrap(a)
    inside = (a.data > lo) & (a.data < hi)

    def bw(g):
        return (g * inside,)

    return _make_output(np.clip(a.data, lo, hi), (a,), bw, "clamp")


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the trailing two axes; leading axes broadcast."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    try:
        out = np.matmul(ad, bd)
    except ValueError as e:
        raise ShapeError(f"matmul: shapes {a.shape} @ {b.shape} do not broadcast") from e
    return _make_output(out, (a, b), bw, "matmul")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Stabilized softmax along ``axis``; rows sum to one."""
    a = _wrap(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {a.shape}")
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        inner = np.sum(g * out, axis=axis, keepdims=True)
        return ((g - inner) * out,)

    return _make_output(out, (a,), bw, "softmax")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    shape = a.data.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make_output(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    shape = a.data.shape
    count = a.data.size if axis is None else np.prod([shape[i] for i in np.atleast_1d(axis)])

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape),)

    return _make_output(np.mean(a.data, axis=axis, keepdims=keepdims), (a,), bw, "mean")


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape) -> Tensor:
    a = _wrap(a)
    old = a.data.shape

    def bw(g):
        return (g.reshape(old),)

    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from e
    return _make_output(np.ascontiguousarray(out), (a,), bw, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    a = _wrap(a)
    nd = a.ndim
    if axes is None:
        axes = tuple(range(nd))[::-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bw(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _make_output(np.ascontiguousarray(a.data.transpose(axes)), (a,), bw, "transpose")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of zero tensors")
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis))
            for i in range(len(tensors))
        )

    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from e
    return _make_output(out, tuple(tensors), bw, "concat")


def getitem(a: Tensor, key) -> Tensor:
    """Indexing (ints/slices/index arrays); backward scatters into zeros.

    Integer-array keys must not repeat indices (assignment, not
    accumulation, carries the gradient back); use ``take`` for that.
    """
    a = _wrap(a)
    shape = a.data.shape

    def bw(g):
        full = np.zeros(shape, dtype=np.float64)
        full[key] = g
        return (full,)

    return _make_output(np.ascontiguousarray(a.data[key]), (a,), bw, "getitem")


def take(a: Tensor, flat_indices: np.ndarray) -> Tensor:
    """Gather elements of the flattened tensor; backward scatter-adds.

    ``flat_indices`` is a constant integer array of any shape; the output
    has that shape. Duplicate indices accumulate gradient.
    """
    a = _wrap(a)
    idx = np.asarray(flat_indices)
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.size):
        raise ShapeError(f"take: index out of range for size {a.data.size}")
    shape = a.data.shape
    size = a.data.size
    flat_idx = idx.ravel()

    def bw(g):
        return (scatter_add(size, flat_idx, g.ravel()).reshape(shape),)

    return _make_output(a.data.reshape(-1)[idx], (a,), bw, "take")


def take_rows(a: Tensor, row_indices: np.ndarray) -> Tensor:
    """Gather rows of a 2-D tensor; output [*idx.shape, C].

    Row indices are constant integers; duplicates accumulate gradient.
    """
    a = _wrap(a)
    if a.ndim != 2:
        raise ShapeError(f"take_rows needs a 2-D tensor, got {a.shape}")
    idx = np.asarray(row_indices)
    n, c = a.data.shape
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"take_rows: row index out of range for {n} rows")

    def bw(g):
        flat = (idx.ravel()[:, None] * c + np.arange(c)).ravel()
        return (scatter_add(n * c, flat, g.ravel()).reshape(n, c),)

    return _make_output(a.data[idx], (a,), bw, "take_rows")


def pad2d(a: Tensor, pad: int) -> Tensor:
    """Zero-pad the two leading (spatial) axes of an [H, W, ...] tensor."""
    a = _wrap(a)
    if pad < 0:
        raise ShapeError("pad2d: negative pad")
    widths = [(pad, pad), (pad, pad)] + [(0, 0)] * (a.ndim - 2)

    def bw(g):
        sl = (slice(pad, g.shape[0] - pad), slice(pad, g.shape[1] - pad))
        return (np.ascontiguousarray(g[sl]),)

    return _make_output(np.pad(a.data, widths), (a,), bw, "pad2d")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    expanded = [reshape(t, t.data.shape[:axis] + (1,) + t.data.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)
