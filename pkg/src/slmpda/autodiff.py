"""Reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tape` is an append-only Wengert list.  Every primitive below
computes its forward value eagerly and, when any input is attached to a
tape, appends a node holding a vector-Jacobian closure.  :func:`backward`
walks the list once in reverse and returns a :class:`GradMap`.

Tapes are single use: build a new one for every optimisation step.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

LOG_CLAMP = 1e-12


class ShapeError(ValueError):
    """Inputs to a primitive do not conform."""


class NumericFault(FloatingPointError):
    """A primitive produced NaN or Inf."""

    def __init__(self, kind: str, detail: str = ""):
        self.kind = kind
        msg = f"non-finite output from primitive '{kind}'"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class TapeError(RuntimeError):
    pass


class _Node:
    __slots__ = ("kind", "inputs", "vjp")

    def __init__(self, kind, inputs, vjp):
        self.kind = kind
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __len__(self):
        return len(self.nodes)

    def watch(self, value) -> "Tensor":
        """Attach ``value`` to this tape as a leaf and return the handle."""
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        data = value.data if isinstance(value, Tensor) else value
        t = Tensor(data)
        t.tape = self
        t.node = len(self.nodes)
        self.nodes.append(_Node("leaf", (), None))
        return t


class Tensor:
    """Dense float64 array, optionally attached to a tape."""

    __array_priority__ = 100

    def __init__(self, data, tape: Tape | None = None, node: int | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericFault("constant", "non-finite input data")
        self.data = arr
        self.tape = tape
        self.node = node

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # internal: adopt an already-checked array without copying
        t = cls.__new__(cls)
        t.data = arr
        t.tape = None
        t.node = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def attached(self) -> bool:
        return self.tape is not None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self):
        tag = f", node={self.node}" if self.attached else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar; all routes go through the primitives
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, rows):
        return take_rows(self, rows)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def as_tensor(x) -> Tensor:
    return _lift(x)


def _record(kind: str, out: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NumericFault(kind)
    tapes = {id(t.tape): t.tape for t in inputs if t.tape is not None}
    if not tapes:
        return Tensor._wrap(out)
    if len(tapes) > 1:
        raise TapeError(f"'{kind}' mixes tensors from different tapes")
    tape = next(iter(tapes.values()))
    if tape.consumed:
        raise TapeError("tape already consumed by backward()")
    handles = tuple(t.node if t.tape is not None else None for t in inputs)
    res = Tensor._wrap(out)
    res.tape = tape
    res.node = len(tape.nodes)
    tape.nodes.append(_Node(kind, handles, vjp))
    return res


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    return _record("matmul", A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias row broadcast over ``a``'s rows, or either side a scalar."""
    if a.data.ndim == 2 and b.data.ndim == 1 and b.shape[0] == a.shape[1] and a.shape != b.shape:
        return _record("add", a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
    _scalar_broadcast("add", a, b)
    A, B = a.data, b.data
    return _record("add", A + B, (a, b), lambda g: (_unbroadcast(g, A.shape), _unbroadcast(g, B.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise difference (either side may be a single-element scalar)."""
    _scalar_broadcast("sub", a, b)
    A, B = a.data, b.data
    return _record("sub", A - B, (a, b), lambda g: (_unbroadcast(g, A.shape), _unbroadcast(-g, B.shape)))


def _scalar_broadcast(kind, a: Tensor, b: Tensor):
    if a.shape == b.shape:
        return None
    if b.data.size == 1 and b.data.ndim <= 1:
        return "b"
    if a.data.size == 1 and a.data.ndim <= 1:
        return "a"
    raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not conform")


def _unbroadcast(g, shape):
    return g if g.shape == shape else np.reshape(g.sum(), shape)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product (either side may be a single-element scalar)."""
    _scalar_broadcast("mul", a, b)
    A, B = a.data, b.data
    return _record(
        "mul", A * B, (a, b),
        lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise quotient (either side may be a single-element scalar)."""
    _scalar_broadcast("div", a, b)
    A, B = a.data, b.data
    if np.any(B == 0):
        raise NumericFault("div", "division by zero")
    out = A / B
    return _record(
        "div", out, (a, b),
        lambda g: (_unbroadcast(g / B, A.shape), _unbroadcast(-g * out / B, B.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = a.data > 0
    return _record("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    """Natural log with the argument clamped at 1e-12 (clamped entries get zero gradient)."""
    x = a.data
    inside = x > LOG_CLAMP
    safe = np.maximum(x, LOG_CLAMP)
    return _record("log", np.log(safe), (a,), lambda g: (np.where(inside, g / safe, 0.0),))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _record("square", x * x, (a,), lambda g: (2.0 * x * g,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), evaluated stably; used for logit-space binary cross-entropy."""
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def vjp(g):
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        return (g * s,)

    return _record("softplus", out, (a,), vjp)


def log_softmax(a: Tensor) -> Tensor:
    """log-softmax along the last axis (row max subtracted first)."""
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _record(
        "log_softmax", out, (a,),
        lambda g: (g - soft * g.sum(axis=-1, keepdims=True),),
    )


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    x = a.data
    if axis is None:
        return _record("sum", np.asarray(x.sum()), (a,), lambda g: (np.broadcast_to(g, x.shape).copy(),))
    ax = axis % x.ndim
    return _record("sum", x.sum(axis=ax), (a,), lambda g: (np.broadcast_to(np.expand_dims(g, ax), x.shape).copy(),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    x = a.data
    if x.size == 0:
        raise ShapeError("mean of an empty tensor")
    if axis is None:
        n = x.size
        return _record("mean", np.asarray(x.mean()), (a,), lambda g: (np.full(x.shape, g / n),))
    ax = axis % x.ndim
    n = x.shape[ax]
    return _record(
        "mean", x.mean(axis=ax), (a,),
        lambda g: (np.broadcast_to(np.expand_dims(g, ax), x.shape) / n,),
    )


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_rows of nothing")
    tails = {p.shape[1:] for p in parts}
    if len(tails) != 1 or parts[0].data.ndim == 0:
        raise ShapeError(f"concat_rows: trailing shapes differ {sorted(tails)}")
    sizes = [p.shape[0] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([p.data for p in parts], axis=0)
    return _record("concat_rows", out, tuple(parts), lambda g: tuple(np.split(g, cuts, axis=0)))


def take_rows(a: Tensor, rows) -> Tensor:
    """Rows of ``a`` selected by a slice or an integer index array (repeats allowed)."""
    x = a.data
    if isinstance(rows, slice):
        idx = np.arange(x.shape[0])[rows]
    else:
        idx = np.asarray(rows, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < -x.shape[0] or idx.max() >= x.shape[0]):
        raise ShapeError(f"take_rows: index out of range for {x.shape[0]} rows")

    def vjp(g):
        out = np.zeros_like(x)
        np.add.at(out, idx, g)
        return (out,)

    return _record("slice_rows", x[idx], (a,), vjp)


def grl(a: Tensor, lam: float) -> Tensor:
    """Gradient reversal: identity forward, upstream gradient times ``-lam`` backward."""
    c = -float(lam)
    return _record("grl", a.data.copy(), (a,), lambda g: (g * c,))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got {a.shape}")
    return _record("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    x = a.data
    return _record("reshape", x.reshape(shape), (a,), lambda g: (g.reshape(x.shape),))


# ---------------------------------------------------------------------------
# composites


def softmax(a: Tensor) -> Tensor:
    return exp(log_softmax(a))


def soft_cross_entropy(logits: Tensor, target) -> Tensor:
    """Per-row ``-sum_c target_c * log_softmax(logits)_c``; ``target`` is constant."""
    return scale(sum(mul(_lift(target), log_softmax(logits)), axis=-1), -1.0)


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Per-element binary cross-entropy ``softplus(z) - y*z`` against soft targets ``y``."""
    return sub(softplus(logits), mul(_lift(target), logits))


# ---------------------------------------------------------------------------
# reverse pass


class GradMap:
    """Node handle -> gradient array; unreachable nodes read as zeros."""

    def __init__(self, tape: Tape, grads: list):
        self._tape = tape
        self._grads = grads
        self._shapes: dict[int, tuple] = {}

    def __getitem__(self, t: Tensor) -> np.ndarray:
        if t.tape is not self._tape:
            raise TapeError("tensor does not belong to this tape")
        g = self._grads[t.node]
        return np.zeros(t.shape) if g is None else g

    def __contains__(self, t: Tensor) -> bool:
        return t.tape is self._tape

    def reached(self, t: Tensor) -> bool:
        return t.tape is self._tape and self._grads[t.node] is not None


def backward(tape: Tape, root: Tensor) -> GradMap:
    if root.tape is not tape:
        raise TapeError("root is not attached to this tape")
    if root.data.size != 1:
        raise ShapeError(f"backward() needs a scalar root, got shape {root.shape}")
    if tape.consumed:
        raise TapeError("tape already consumed by backward()")
    tape.consumed = True
    grads: list = [None] * len(tape.nodes)
    grads[root.node] = np.ones_like(root.data)
    for i in range(root.node, -1, -1):
        g = grads[i]
        node = tape.nodes[i]
        if g is None or node.vjp is None:
            continue
        for h, gi in zip(node.inputs, node.vjp(g)):
            if h is None:
                continue
            gi = np.asarray(gi, dtype=np.float64)
            grads[h] = gi.copy() if grads[h] is None else grads[h] + gi
    return GradMap(tape, grads)


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5, numeric_scale: float = 1.0) -> float:
    """Max relative error between backward() and central differences of ``f`` at ``x``.

    ``numeric_scale`` multiplies the finite-difference estimate before the
    comparison.  Functions whose every path to ``x`` crosses one gradient
    reversal with coefficient lam are checked with ``numeric_scale=-lam``.
    """
    if not 0 < eps <= 1e-3:
        raise ValueError("eps must lie in (0, 1e-3]")
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    tape = Tape()
    xt = tape.watch(x)
    y = f(xt)
    if y.data.size != 1:
        raise ShapeError("grad_check: f must return a scalar")
    if y.attached:
        analytic = backward(tape, y)[xt]
    else:
        analytic = np.zeros_like(x)
    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += eps
        xm[i] -= eps
        fp = f(Tensor(xp.reshape(x.shape))).item()
        fm = f(Tensor(xm.reshape(x.shape))).item()
        numeric.reshape(-1)[i] = numeric_scale * (fp - fm) / (2.0 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if x.size else 0.0
