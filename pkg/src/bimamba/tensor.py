"""Dense tensors over numpy with reverse-mode automatic differentiation.

A `Tensor` wraps a contiguous float32 or float64 ndarray plus an optional
gradient buffer.  Operations executed while a `Tape` is active record a
backward rule; `Tape.backward` replays the records in reverse creation
order (already topological) and deposits gradients on the leaf tensors
that requested them.  Without an active tape the same operations run as
plain numpy math (evaluation mode).

Conventions:
  - one tape per training sequence; gradients accumulate across tapes
    until `zero_grad`, which is how batch accumulation averages work
  - tensors recorded on a live tape must not be mutated in place;
    optimizer updates happen between tapes, on leaves only
  - non-finite values are an error surface: every recorded result is
    checked and rejected rather than propagated silently
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPES = {"float32": np.dtype(np.float32), "float64": np.dtype(np.float64)}
_default_dtype = _DTYPES["float32"]


def set_default_dtype(name: str) -> None:
    """Switch the global precision mode ("float32" or "float64")."""
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown dtype {name!r}; expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


def default_dtype() -> np.dtype:
    return _default_dtype


@contextmanager
def using_dtype(name: str):
    """Temporarily switch precision, e.g. `with using_dtype("float64"):`."""
    previous = _default_dtype.name
    set_default_dtype(name)
    try:
        yield
    finally:
        set_default_dtype(previous)


class TapeError(RuntimeError):
    """Raised for tape misuse: backward without records, foreign loss, reuse."""


class Tensor:
    """A dense array with an optional gradient slot.

    `data` is always a contiguous ndarray in the dtype active at
    construction time.  `grad` stays None until a backward pass deposits
    into it; repeated backward passes accumulate (sum) into the same
    buffer.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.ascontiguousarray(data, dtype=dtype or _default_dtype)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor holds non-finite values")
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad: bool = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ValueError(f"item() on tensor of shape {self.shape}")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        return out

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar; all routed through the module-level ops below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


class _TapeEntry:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_active_tape: "Tape | None" = None


class Tape:
    """Ordered record of operations for one reverse pass.

    Creation order is topological, so reverse replay visits every node
    exactly once.  A tape built in evaluation mode (no records) cannot be
    replayed, and a tape replays at most once.
    """

    __slots__ = ("entries", "_produced", "_replayed")

    def __init__(self):
        self.entries: list[_TapeEntry] = []
        self._produced: set[int] = set()
        self._replayed = False

    def __enter__(self) -> "Tape":
        global _active_tape
        if _active_tape is not None:
            raise TapeError("tapes do not nest; close the active tape first")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _active_tape
        _active_tape = None

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss)=1 and replay the tape in reverse.

        Gradients land on every leaf tensor with requires_grad=True that
        contributed to `loss`, accumulating into `.grad`.
        """
        if self._replayed:
            raise TapeError("tape already replayed once")
        if not self.entries:
            raise TapeError("backward on a tape with no recorded operations (built in evaluation mode?)")
        if loss.size != 1:
            raise TapeError(f"backward expects a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise TapeError("loss was not produced under this tape")
        self._replayed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for entry in reversed(self.entries):
            g_out = grads.pop(id(entry.out), None)
            if g_out is None:
                continue  # this intermediate never reached the loss
            for t, g in zip(entry.inputs, entry.backward(g_out)):
                if g is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g.astype(t.dtype, copy=False)
        for entry in self.entries:
            for t in entry.inputs:
                g = grads.get(id(t))
                if g is None or id(t) in self._produced:
                    continue
                if t.grad is None:
                    t.grad = np.array(g, dtype=t.dtype)
                else:
                    t.grad = t.grad + g
                grads.pop(id(t))


@contextmanager
def no_grad():
    """Run a block in evaluation mode even if a tape is active."""
    global _active_tape
    saved, _active_tape = _active_tape, None
    try:
        yield
    finally:
        _active_tape = saved


def record_op(
    inputs: Sequence[Tensor],
    out_data: np.ndarray,
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    op: str,
) -> Tensor:
    """Create the output tensor of a primitive and record it if taping.

    `backward` maps the output gradient to per-input gradients (None for
    inputs without a differentiable path).  Domain modules use this hook
    to add their own primitives (binarized matmul, the SSD scan) without
    touching this file.
    """
    if not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"{op}: non-finite values in result")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = False
    tape = _active_tape
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.entries.append(_TapeEntry(out, tuple(inputs), backward))
        tape._produced.add(id(out))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_default_dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back over the axes that broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# === elementwise and broadcasting primitives ===


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return record_op(
        (a, b),
        a.data + b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return record_op(
        (a, b),
        a.data - b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return record_op(
        (a, b),
        a.data * b.data,
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    inv = 1.0 / b.data
    return record_op(
        (a, b),
        a.data * inv,
        lambda g: (
            _unbroadcast(g * inv, a.shape),
            _unbroadcast(-g * a.data * inv * inv, b.shape),
        ),
        "div",
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return record_op((a,), -a.data, lambda g: (-g,), "neg")


def texp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return record_op((a,), out, lambda g: (g * out,), "exp")


def tlog(a) -> Tensor:
    a = _as_tensor(a)
    return record_op((a,), np.log(a.data), lambda g: (g / a.data,), "log")


def pow_const(a, p: float) -> Tensor:
    """a**p for a constant exponent (a > 0 required for fractional p)."""
    a = _as_tensor(a)
    out = a.data**p
    return record_op((a,), out, lambda g: (g * p * a.data ** (p - 1.0),), "pow_const")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # exp of a negative magnitude only, so neither tail overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid_np(a.data)
    return record_op((a,), s, lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(a) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid_np(a.data)
    return record_op((a,), a.data * s, lambda g: (g * s * (1.0 + a.data * (1.0 - s)),), "silu")


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid_np(a.data)
    return record_op((a,), np.logaddexp(0.0, a.data), lambda g: (g * s,), "softplus")


# === reductions and shape ops ===


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return record_op((a,), np.sum(a.data, axis=axis, keepdims=keepdims), backward, "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.size
    else:
        count = a.shape[axis]

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, a.shape).copy(),)

    return record_op((a,), np.mean(a.data, axis=axis, keepdims=keepdims), backward, "mean")


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    return record_op((a,), a.data.reshape(shape), lambda g: (g.reshape(a.shape),), "reshape")


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; backward scatters into zeros."""
    a = _as_tensor(a)
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return record_op((a,), a.data[index].copy(), backward, "narrow")


# === linear algebra ===


def matmul(a, b) -> Tensor:
    """c[i,j] = sum_k a[i,k] b[k,j] for 2-d operands."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
    if not (np.all(np.isfinite(a.data)) and np.all(np.isfinite(b.data))):
        raise FloatingPointError("matmul: non-finite inputs")
    return record_op(
        (a, b),
        a.data @ b.data,
        lambda g: (g @ b.data.T, a.data.T @ g),
        "matmul",
    )


def linear(x, w) -> Tensor:
    """Dense layer y = x @ w.T with w of shape (out_features, in_features)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.shape[-1] != w.shape[1]:
        raise ValueError(f"linear extents disagree: x {x.shape} vs w {w.shape}")
    return record_op(
        (x, w),
        x.data @ w.data.T,
        lambda g: (g @ w.data, g.reshape(-1, w.shape[0]).T @ x.data.reshape(-1, w.shape[1])),
        "linear",
    )


def take_rows(table, ids: np.ndarray) -> Tensor:
    """Row gather (embedding lookup); backward scatter-adds."""
    table = _as_tensor(table)
    ids = np.asarray(ids)

    def backward(g):
        full = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(full, ids, g)
        return (full,)

    return record_op((table,), table.data[ids], backward, "take_rows")


# === softmax family ===


def softmax_rows(x) -> Tensor:
    """Row-wise softmax of a 2-d tensor, max-subtracted for stability."""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ValueError(f"softmax_rows expects a 2-d tensor, got shape {x.shape}")
    if x.shape[1] == 0:
        raise ValueError("softmax_rows: empty rows")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - dot),)

    return record_op((x,), p, backward, "softmax_rows")


def log_softmax_rows(x) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ValueError(f"log_softmax_rows expects a 2-d tensor, got shape {x.shape}")
    if x.shape[1] == 0:
        raise ValueError("log_softmax_rows: empty rows")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return record_op((x,), out, backward, "log_softmax_rows")


# === finite-difference oracle ===


def grad_check(
    f: Callable[[], Tensor],
    params: Tensor | Iterable[Tensor],
    eps: float = 1e-5,
) -> float:
    """Compare tape gradients of a scalar `f()` against central differences.

    Args:
        f: zero-argument callable evaluating the scalar loss from the
           current values of `params` (closure style).
        params: tensor or tensors to perturb; must have requires_grad.
        eps: central-difference step.

    Returns:
        max over all coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|).

    Requires the global float64 mode; float32 differences drown the signal.
    """
    if default_dtype() != np.float64:
        raise TapeError("grad_check requires float64 mode (set_default_dtype('float64'))")
    plist = [params] if isinstance(params, Tensor) else list(params)
    for p in plist:
        p.zero_grad()
    with Tape() as tape:
        out = f()
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued f, got shape {out.shape}")
    if out.requires_grad:
        tape.backward(out)
    # else: f never touched the parameters; analytic gradient is zero

    worst = 0.0
    for p in plist:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            with no_grad():
                hi = f().item()
            flat[i] = saved - eps
            with no_grad():
                lo = f().item()
            flat[i] = saved
            numeric = (hi - lo) / (2.0 * eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst
