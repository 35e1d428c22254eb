"""Tape-based reverse-mode differentiation over numpy arrays.

Every primitive accepts plain arrays or :class:`Var` handles.  When no input
is a ``Var`` the primitive simply returns the numpy result, so the same model
code runs untaped (evaluation, finite differences) or taped (training).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class DomainError(ValueError):
    """Raised when a primitive is applied outside its real domain."""


VJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class Node:
    opcode: str
    inputs: tuple  # tape indices, or None for untracked constants
    vjp: VJP | None


class Tape:
    """Append-only record of evaluated primitives.

    Node ``k`` only references nodes with smaller indices, so a reverse sweep
    over the node list is a valid topological order.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.values: list[np.ndarray] = []
        self.leaves: list[int] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value) -> "Var":
        value = np.array(value, dtype=np.float64)
        self.nodes.append(Node("leaf", (), None))
        self.values.append(value)
        self.leaves.append(len(self.nodes) - 1)
        return Var(self, len(self.nodes) - 1)

    def push(self, opcode: str, inputs, value, vjp: VJP) -> "Var":
        idx = []
        for x in inputs:
            if isinstance(x, Var):
                if x.tape is not self:
                    raise ValueError("inputs live on different tapes")
                idx.append(x.index)
            else:
                idx.append(None)
        self.nodes.append(Node(opcode, tuple(idx), vjp))
        self.values.append(np.asarray(value))
        return Var(self, len(self.nodes) - 1)


class Var:
    __slots__ = ("tape", "index")
    # Make numpy defer to our reflected operators (ndarray + Var -> Var).
    __array_ufunc__ = None

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.index]

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __float__(self):
        return float(self.value)

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.shape})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def value(x) -> np.ndarray:
    """Numeric value of a Var or array-like, without gradient tracking."""
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=np.float64) if not isinstance(x, np.ndarray) else x


detach = value


def _tape(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b):
    av, bv = value(a), value(b)
    out = av + bv
    tape = _tape(a, b)
    if tape is None:
        return out
    return tape.push("add", (a, b), out,
                     lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = value(a), value(b)
    out = av - bv
    tape = _tape(a, b)
    if tape is None:
        return out
    return tape.push("sub", (a, b), out,
                     lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a, b):
    av, bv = value(a), value(b)
    out = av * bv
    tape = _tape(a, b)
    if tape is None:
        return out
    need_a, need_b = isinstance(a, Var), isinstance(b, Var)
    return tape.push("mul", (a, b), out,
                     lambda g: (_unbroadcast(g * bv, av.shape) if need_a else None,
                                _unbroadcast(g * av, bv.shape) if need_b else None))


def div(a, b):
    av, bv = value(a), value(b)
    out = av / bv
    tape = _tape(a, b)
    if tape is None:
        return out
    return tape.push("div", (a, b), out,
                     lambda g: (_unbroadcast(g / bv, av.shape),
                                _unbroadcast(-g * out / bv, bv.shape)))


def neg(a):
    av = value(a)
    tape = _tape(a)
    if tape is None:
        return -av
    return tape.push("neg", (a,), -av, lambda g: (-g,))


def power(a, p: float):
    """``a ** p`` for a constant exponent."""
    av = value(a)
    out = av ** p
    tape = _tape(a)
    if tape is None:
        return out
    return tape.push("pow", (a,), out, lambda g: (g * p * av ** (p - 1),))


def exp(a):
    av = value(a)
    out = np.exp(av)
    tape = _tape(a)
    if tape is None:
        return out
    return tape.push("exp", (a,), out, lambda g: (g * out,))


def log(a):
    av = value(a)
    if np.any(av <= 0):
        raise DomainError("log of non-positive value")
    out = np.log(av)
    tape = _tape(a)
    if tape is None:
        return out
    return tape.push("log", (a,), out, lambda g: (g / av,))


def sqrt(a):
    av = value(a)
    if np.any(av <= 0):
        raise DomainError("sqrt of non-positive value")
    out = np.sqrt(av)
    tape = _tape(a)
    if tape is None:
        return out
    return tape.push("sqrt", (a,), out, lambda g: (g * 0.5 / out,))


def sin(a):
    av = value(a)
    tape = _tape(a)
    if tape is None:
        return np.sin(av)
    return tape.push("sin", (a,), np.sin(av), lambda g: (g * np.cos(av),))


def cos(a):
    av = value(a)
    tape = _tape(a)
    if tape is None:
        return np.cos(av)
    return tape.push("cos", (a,), np.cos(av), lambda g: (-g * np.sin(av),))


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def softplus(a):
    av = value(a)
    e = np.exp(-np.abs(av))
    out = np.maximum(av, 0.0) + np.log1p(e)
    tape = _tape(a)
    if tape is None:
        return out

    def vjp(g):
        r = 1.0 / (1.0 + e)
        return (g * np.where(av >= 0, r, e * r),)

    return tape.push("softplus", (a,), out, vjp)


def sigmoid(a):
    av = value(a)
    out = _sigmoid(av)
    tape = _tape(a)
    if tape is None:
        return out
    return tape.push("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def abs_(a):
    """|a| with subgradient 0 at the kink."""
    av = value(a)
    tape = _tape(a)
    if tape is None:
        return np.abs(av)
    return tape.push("abs", (a,), np.abs(av), lambda g: (g * np.sign(av),))


def maximum(a, b):
    """Elementwise max; gradient goes to the selected operand, ties to ``a``."""
    av, bv = value(a), value(b)
    pick_a = av >= bv
    out = np.where(pick_a, av, bv)
    tape = _tape(a, b)
    if tape is None:
        return out
    return tape.push("max", (a, b), out,
                     lambda g: (_unbroadcast(g * pick_a, av.shape),
                                _unbroadcast(g * ~pick_a, bv.shape)))


def minimum(a, b):
    """Elementwise min; gradient goes to the selected operand, ties to ``a``."""
    av, bv = value(a), value(b)
    pick_a = av <= bv
    out = np.where(pick_a, av, bv)
    tape = _tape(a, b)
    if tape is None:
        return out
    return tape.push("min", (a, b), out,
                     lambda g: (_unbroadcast(g * pick_a, av.shape),
                                _unbroadcast(g * ~pick_a, bv.shape)))


def where(cond, a, b):
    cond = np.asarray(cond, dtype=bool)
    av, bv = value(a), value(b)
    out = np.where(cond, av, bv)
    tape = _tape(a, b)
    if tape is None:
        return out
    return tape.push("where", (a, b), out,
                     lambda g: (_unbroadcast(np.where(cond, g, 0.0), av.shape),
                                _unbroadcast(np.where(cond, 0.0, g), bv.shape)))


# ----------------------------------------------------------------- reductions


def sum_(a, axis=None, keepdims=False):
    av = value(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)
    tape = _tape(a)
    if tape is None:
        return out

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return tape.push("sum", (a,), out, vjp)


def mean(a, axis=None, keepdims=False):
    av = value(a)
    n = av.size if axis is None else np.prod([av.shape[k] for k in np.atleast_1d(axis)])
    return sum_(a, axis=axis, keepdims=keepdims) / float(n)


def cumsum(a, axis=-1):
    av = value(a)
    out = np.cumsum(av, axis=axis)
    tape = _tape(a)
    if tape is None:
        return out
    return tape.push("cumsum", (a,), out,
                     lambda g: (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),))


def norm(a, axis=-1):
    """Euclidean norm along ``axis``; the gradient at a zero vector is 0."""
    av = value(a)
    out = np.sqrt(np.sum(av * av, axis=axis))
    tape = _tape(a)
    if tape is None:
        return out

    def vjp(g):
        n = np.expand_dims(out, axis)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, np.expand_dims(g, axis) * av / safe, 0.0),)

    return tape.push("norm", (a,), out, vjp)


# -------------------------------------------------------------- linear algebra


def matmul(a, b):
    """2-D matrix product."""
    av, bv = value(a), value(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    out = av @ bv
    tape = _tape(a, b)
    if tape is None:
        return out
    need_a, need_b = isinstance(a, Var), isinstance(b, Var)
    return tape.push("matmul", (a, b), out,
                     lambda g: (g @ bv.T if need_a else None, av.T @ g if need_b else None))


def dot(a, b):
    return sum_(mul(a, b))


# ---------------------------------------------------------------- structural


def reshape(a, shape):
    av = value(a)
    out = av.reshape(shape)
    tape = _tape(a)
    if tape is None:
        return out
    return tape.push("reshape", (a,), out, lambda g: (g.reshape(av.shape),))


def transpose(a, axes=None):
    av = value(a)
    out = np.transpose(av, axes)
    tape = _tape(a)
    if tape is None:
        return out
    inv = None if axes is None else np.argsort(axes)
    return tape.push("transpose", (a,), out, lambda g: (np.transpose(g, inv),))


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(a, idx):
    av = value(a)
    out = av[idx]
    tape = _tape(a)
    if tape is None:
        return out
    advanced = _is_advanced(idx)

    def vjp(g):
        z = np.zeros_like(av)
        if advanced:
            np.add.at(z, idx, g)
        else:
            z[idx] = g
        return (z,)

    return tape.push("getitem", (a,), out, vjp)


def concat(xs: Sequence, axis=-1):
    vals = [value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    tape = _tape(*xs)
    if tape is None:
        return out
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return tape.push("concat", tuple(xs), out, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(xs: Sequence, axis=0):
    vals = [value(x) for x in xs]
    out = np.stack(vals, axis=axis)
    tape = _tape(*xs)
    if tape is None:
        return out
    n = len(vals)
    return tape.push("stack", tuple(xs), out,
                     lambda g: tuple(np.take(g, k, axis=axis) for k in range(n)))


def bilinear(image: np.ndarray, coords):
    """Sample an (H, W, C) constant image at continuous (x=col, y=row) coords.

    Integer coordinates are pixel centres.  Coordinates are clamped to the
    image; at interior cell boundaries the lower cell is used, which fixes the
    one-sided derivative there.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    cv = value(coords)
    x = np.clip(cv[:, 0], 0.0, w - 1.0)
    y = np.clip(cv[:, 1], 0.0, h - 1.0)
    x0 = np.clip(np.ceil(x) - 1, 0, max(w - 2, 0)).astype(int)
    y0 = np.clip(np.ceil(y) - 1, 0, max(h - 2, 0)).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    i00, i01 = image[y0, x0], image[y0, x1]
    i10, i11 = image[y1, x0], image[y1, x1]
    top = i00 + fx * (i01 - i00)
    bot = i10 + fx * (i11 - i10)
    out = top + fy * (bot - top)
    tape = _tape(coords)
    if tape is None:
        return out

    def vjp(g):
        dx = (1 - fy) * (i01 - i00) + fy * (i11 - i10)
        dy = bot - top
        return (np.stack([np.sum(g * dx, axis=1), np.sum(g * dy, axis=1)], axis=1),)

    return tape.push("bilinear", (coords,), out, vjp)


# ------------------------------------------------------------------- backward


PRIMITIVES: dict[str, Callable] = {
    "+": add,
    "-": sub,
    "*": mul,
    "/": div,
    "neg": neg,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "sin": sin,
    "cos": cos,
    "softplus": softplus,
    "sigmoid": sigmoid,
    "abs": abs_,
    "max": maximum,
    "min": minimum,
    "pow": power,
    "sum": sum_,
    "dot": dot,
    "matmul": matmul,
    "norm": norm,
    "cumsum": cumsum,
}


def record(op: str, *inputs, **kwargs):
    """Evaluate primitive ``op`` eagerly, recording it if any input is taped."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **kwargs)


def backward(tape: Tape, root: Var, leaves: Sequence[Var] | None = None) -> list[np.ndarray]:
    """Reverse accumulation from a scalar ``root``.

    Returns one gradient per leaf (all tape leaves by default, in creation
    order).  Leaves unreachable from ``root`` get zeros.
    """
    if root.tape is not tape:
        raise ValueError("root is not on this tape")
    if np.size(root.value) != 1:
        raise ValueError("backward needs a scalar root")
    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    grads[root.index] = np.ones_like(root.value, dtype=np.float64)
    leaf_set = set(tape.leaves)
    for k in range(root.index, -1, -1):
        g = grads[k]
        node = tape.nodes[k]
        if g is None or node.vjp is None:
            continue
        for src, gi in zip(node.inputs, node.vjp(g)):
            if src is None or gi is None:
                continue
            grads[src] = gi if grads[src] is None else grads[src] + gi
        if k not in leaf_set:
            grads[k] = None
    if leaves is None:
        idx = tape.leaves
    else:
        idx = [v.index for v in leaves]
    return [grads[i] if grads[i] is not None else np.zeros_like(tape.values[i]) for i in idx]


# ----------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              mask: np.ndarray | None = None) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update.  Entries where ``mask`` is False stay frozen."""
    t = state.step + 1
    m = beta1 * state.m + (1 - beta1) * grads
    v = beta2 * state.v + (1 - beta2) * grads * grads
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    update = lr * m_hat / (np.sqrt(v_hat) + eps)
    if mask is not None:
        update = np.where(mask, update, 0.0)
        m = np.where(mask, m, state.m)
        v = np.where(mask, v, state.v)
    return params - update, AdamState(m, v, t)
