"""Reverse-mode automatic differentiation over dense float64 arrays.

Operations are recorded on the active :class:`Tape` (entered with a ``with``
block). Outside any tape the same functions just compute values, which is how
evaluation code runs without paying for bookkeeping.

Example
-------
>>> w = Tensor([[1.0, 2.0]], requires_grad=True)
>>> with Tape() as tape:
...     loss = reduce_sum(square(w))
>>> grads = backward(loss, tape)
>>> w.grad
array([[2., 4.]])
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "KinkWarning",
    "debug_mode",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "exp",
    "log",
    "relu",
    "sigmoid",
    "square",
    "elementwise",
    "add_bias",
    "clip",
    "columns",
    "concat",
    "reduce_sum",
    "reduce_mean",
    "sigmoid_cross_entropy",
    "backward",
    "grad_check",
]

_DEBUG = False
_ACTIVE: list["Tape"] = []


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class KinkWarning(UserWarning):
    """grad_check skipped components sitting on a non-differentiable point."""


def debug_mode(enabled: bool = True) -> None:
    """Toggle the finite-output postcondition check on every op."""
    global _DEBUG
    _DEBUG = bool(enabled)


class Tensor:
    """Dense real array with an optional gradient slot.

    ``requires_grad`` marks a leaf (typically a parameter) whose gradient is
    written to ``grad`` by :func:`backward`. ``node_id`` is the handle on the
    tape that produced or first watched this tensor.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node_id: Optional[int] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
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
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Node:
    node_id: int
    op: str
    inputs: tuple
    vjp: Optional[Callable]


@dataclass
class Tape:
    """Append-only record of primitive ops, replayed in reverse by backward.

    A tape is single-use: :func:`backward` consumes it.
    """

    nodes: list = field(default_factory=list)
    next_id: int = 0
    consumed: bool = False

    def __enter__(self):
        if self.consumed:
            raise RuntimeError("tape already consumed by backward()")
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def watch(self, t: Tensor) -> int:
        """Register ``t`` as a leaf on this tape and return its node id."""
        if t._tape is not self:
            t.node_id = self._append("leaf", (), None)
            t._tape = self
        return t.node_id

    def _append(self, op, inputs, vjp) -> int:
        nid = self.next_id
        self.nodes.append(_Node(nid, op, inputs, vjp))
        self.next_id += 1
        return nid

    def __len__(self):
        return len(self.nodes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(t: Tensor, tape: Tape) -> bool:
    return t._tape is tape or t.requires_grad


def _record(op: str, out: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    """Wrap ``out`` and, when a tape is active and any input is tracked, log it.

    ``vjp(g)`` returns one cotangent per input (``None`` for untracked ones).
    """
    if _DEBUG and not np.all(np.isfinite(out)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise FloatingPointError(f"{op} produced non-finite output from finite inputs")
    res = Tensor.__new__(Tensor)
    res.data = out
    res.grad = None
    res.requires_grad = False
    res.node_id = None
    res._tape = None
    if not _ACTIVE:
        return res
    tape = _ACTIVE[-1]
    if not any(_tracked(t, tape) for t in inputs):
        return res
    ids = tuple(tape.watch(t) if _tracked(t, tape) else None for t in inputs)
    res.node_id = tape._append(op, ids, vjp)
    res._tape = tape
    return res


def _need(t: Tensor) -> bool:
    return bool(_ACTIVE) and _tracked(t, _ACTIVE[-1])


def _check_same(op, a: Tensor, b: Tensor):
    if a.shape != b.shape and a.ndim and b.ndim:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    # only the scalar-operand case can broadcast
    return np.asarray(g.sum()) if shape == () and g.shape != () else g


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    need_a, need_b = _need(a), _need(b)

    def vjp(g):
        return (g @ B.T if need_a else None, A.T @ g if need_b else None)

    return _record("matmul", A @ B, (a, b), vjp)


def add_bias(x, bias) -> Tensor:
    """Add a length-n bias vector to every row of a batch x n matrix."""
    x, bias = _as_tensor(x), _as_tensor(bias)
    if x.ndim != 2 or bias.shape != (x.shape[1],):
        raise ShapeError(f"add_bias: bias {bias.shape} does not match rows of {x.shape}")

    def vjp(g):
        return g, g.sum(axis=0)

    return _record("add_bias", x.data + bias.data, (x, bias), vjp)


# -- elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("mul", a, b)
    A, B = a.data, b.data
    return _record("mul", A * B, (a, b),
                   lambda g: (_reduce_to(g * B, A.shape), _reduce_to(g * A, B.shape)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    """Multiply by a constant scalar."""
    a = _as_tensor(a)
    c = float(c)
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    X = a.data
    if np.any(X <= 0):
        raise ValueError("log: input must be strictly positive")
    return _record("log", np.log(X), (a,), lambda g: (g / X,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _record("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split on sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid(np.atleast_1d(a.data)).reshape(a.shape)
    return _record("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def square(a) -> Tensor:
    a = _as_tensor(a)
    X = a.data
    return _record("square", X * X, (a,), lambda g: (2.0 * g * X,))


_UNARY = {"exp": exp, "log": log, "relu": relu, "sigmoid": sigmoid, "square": square}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op_kind: str, *inputs) -> Tensor:
    """Dispatch an elementwise op by name."""
    if op_kind in _UNARY:
        (x,) = inputs
        return _UNARY[op_kind](x)
    if op_kind in _BINARY:
        a, b = inputs
        return _BINARY[op_kind](a, b)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero where the clamp is active."""
    a = _as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _record("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def columns(a, start: int, stop: int) -> Tensor:
    """Slice columns [start, stop) of a matrix."""
    a = _as_tensor(a)
    if a.ndim != 2 or not 0 <= start <= stop <= a.shape[1]:
        raise ShapeError(f"columns: bad slice [{start}:{stop}] of {a.shape}")
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _record("columns", a.data[:, start:stop].copy(), (a,), vjp)


def concat(parts: Sequence, axis: int = 1) -> Tensor:
    """Concatenate matrices along columns (axis=1) or rows (axis=0)."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat: nothing to concatenate")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def vjp(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(parts)))

    return _record("concat", out, parts, vjp)


# -- reductions ---------------------------------------------------------------

def _check_axis(t: Tensor, axis):
    if axis is not None and not 0 <= axis < t.ndim:
        raise ValueError(f"axis {axis} out of range for rank {t.ndim}")


def reduce_sum(a, axis: Optional[int] = None) -> Tensor:
    a = _as_tensor(a)
    _check_axis(a, axis)
    shape = a.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", np.asarray(a.data.sum(axis=axis)), (a,), vjp)


def reduce_mean(a, axis: Optional[int] = None) -> Tensor:
    a = _as_tensor(a)
    _check_axis(a, axis)
    n = a.size if axis is None else a.shape[axis]
    return scale(reduce_sum(a, axis), 1.0 / n)


# -- fused losses -------------------------------------------------------------

def sigmoid_cross_entropy(logits, targets) -> Tensor:
    """Elementwise -[t log s(l) + (1-t) log(1-s(l))] computed from logits.

    Uses max(l, 0) - l*t + log(1 + exp(-|l|)), so saturated logits never
    reach log(0). Targets are constants in [0, 1].
    """
    logits = _as_tensor(logits)
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=np.float64)
    if logits.shape != t.shape:
        raise ShapeError(f"sigmoid_cross_entropy: {logits.shape} vs {t.shape}")
    L = logits.data
    out = np.maximum(L, 0.0) - L * t + np.log1p(np.exp(-np.abs(L)))
    s = _sigmoid(np.atleast_1d(L)).reshape(L.shape)
    return _record("sigmoid_ce", out, (logits,), lambda g: (g * (s - t),))


# -- reverse pass -------------------------------------------------------------

def backward(loss: Tensor, tape: Tape) -> dict:
    """Propagate d(loss)/d(node) through ``tape``.

    Returns ``{node_id: gradient array}`` for every node reached, and stores
    the gradient of each watched leaf in its ``grad`` slot. The tape is
    consumed.
    """
    if loss.shape != () and loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if tape.consumed:
        raise RuntimeError("tape already consumed by backward()")
    if not tape.nodes:
        raise ValueError("backward: tape is empty")
    if loss._tape is not tape:
        raise ValueError("backward: loss was not recorded on this tape")
    grads = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.get(node.node_id)
        if g is None or node.vjp is None:
            continue
        for nid, gi in zip(node.inputs, node.vjp(g)):
            if nid is None or gi is None:
                continue
            if nid in grads:
                grads[nid] = grads[nid] + gi
            else:
                grads[nid] = gi
    tape.consumed = True
    return grads


def _collect_leaf_grads(tape: Tape, leaves: Sequence[Tensor], grads: dict):
    for t in leaves:
        if t._tape is tape and t.node_id in grads:
            t.grad = np.asarray(grads[t.node_id], dtype=np.float64).reshape(t.shape)
        else:
            t.grad = np.zeros_like(t.data)


def gradients(f: Callable[..., Tensor], params: Sequence[Tensor]) -> tuple:
    """Evaluate ``f()`` on a fresh tape and return (loss value, [grad per param])."""
    tape = Tape()
    with tape:
        for p in params:
            tape.watch(p)
        loss = f()
    grads = backward(loss, tape)
    _collect_leaf_grads(tape, params, grads)
    return float(loss.data), [p.grad for p in params]


def grad_check(f: Callable[[Tensor], Tensor], at, h: float = 1e-5,
               kink_tol: float = 1e-3) -> float:
    """Worst relative error between backward() and central differences.

    Relative error per component is |a - b| / max(|a|, |b|, 1e-8). Components
    whose one-sided differences disagree by more than ``kink_tol`` straddle a
    kink (e.g. relu at 0) and are skipped with a :class:`KinkWarning`.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = Tensor(np.array(_as_tensor(at).data, dtype=np.float64), requires_grad=True)
    _, (analytic,) = gradients(lambda: f(x), [x])

    base = x.data.copy()
    flat = base.reshape(-1)
    f0 = float(f(Tensor(base)).data)
    worst = 0.0
    skipped = []
    for i in range(flat.size):
        xp = flat.copy()
        xp[i] += h
        xm = flat.copy()
        xm[i] -= h
        fp = float(f(Tensor(xp.reshape(base.shape))).data)
        fm = float(f(Tensor(xm.reshape(base.shape))).data)
        fwd, bwd = (fp - f0) / h, (f0 - fm) / h
        if abs(fwd - bwd) > kink_tol * max(1.0, abs(fwd), abs(bwd)):
            skipped.append(i)
            continue
        num = (fp - fm) / (2 * h)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-8))
    if skipped:
        warnings.warn(f"grad_check skipped {len(skipped)} kink component(s): {skipped[:10]}",
                      KinkWarning, stacklevel=2)
    return worst
