"""Minimal tape-based reverse-mode differentiation on float64 arrays.

Just enough operator coverage for the relevance model: matmul, bias add,
tanh, masked softmax, masked mean-pooling, row concatenation/slicing, and
elementwise scaling. Values are numpy arrays; constants (features, masks)
participate as plain ndarrays and receive no gradient. Ops record a closure
on the tape; backward() replays them in reverse, accumulating into .grad.

Everything is float64: the whole training stack is validated against central
finite differences, which needs the headroom.
"""
from __future__ import annotations

import numpy as np


class Tape:
    """Records the backward closures of one forward pass."""

    __slots__ = ("_ops",)

    def __init__(self):
        self._ops: list = []

    def backward(self) -> None:
        for op in reversed(self._ops):
            op()


class Var:
    """A tape-tracked array. grad is lazily allocated on first contribution."""

    __slots__ = ("value", "grad", "tape")

    def __init__(self, value, tape: Tape):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.tape = tape

    def seed(self, g) -> None:
        """Set the upstream gradient for an output variable."""
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self.value.shape:
            raise ValueError(f"seed shape {g.shape} != value shape {self.value.shape}")
        self.grad = g.copy()

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g


def _is_var(x) -> bool:
    return isinstance(x, Var)


def _val(x) -> np.ndarray:
    return x.value if _is_var(x) else np.asarray(x, dtype=np.float64)


def matmul(a, b) -> Var:
    """a @ b where either operand may be a constant array."""
    if not (_is_var(a) or _is_var(b)):
        raise TypeError("matmul needs at least one Var operand")
    tape = a.tape if _is_var(a) else b.tape
    out = Var(_val(a) @ _val(b), tape)
    av, bv = _val(a), _val(b)

    def back():
        if out.grad is None:
            return
        if _is_var(a):
            a.accumulate(out.grad @ bv.T)
        if _is_var(b):
            b.accumulate(av.T @ out.grad)

    tape._ops.append(back)
    return out


def add(a, b) -> Var:
    """Elementwise a + b with row-broadcast of a trailing-dim vector bias."""
    if not (_is_var(a) or _is_var(b)):
        raise TypeError("add needs at least one Var operand")
    tape = a.tape if _is_var(a) else b.tape
    av, bv = _val(a), _val(b)
    out = Var(av + bv, tape)

    def _reduce(g, shape):
        # sum the broadcast axes away so grads match the operand shape
        if g.shape == shape:
            return g
        if len(shape) == 1 and g.ndim == 2 and shape[0] == g.shape[1]:
            return g.sum(axis=0)
        raise ValueError(f"unsupported broadcast {shape} vs {g.shape}")

    def back():
        if out.grad is None:
            return
        if _is_var(a):
            a.accumulate(_reduce(out.grad, av.shape))
        if _is_var(b):
            b.accumulate(_reduce(out.grad, bv.shape))

    tape._ops.append(back)
    return out


def scale(a: Var, c: float) -> Var:
    out = Var(a.value * c, a.tape)

    def back():
        if out.grad is not None:
            a.accumulate(out.grad * c)

    a.tape._ops.append(back)
    return out


def mul_const(a: Var, m) -> Var:
    """Elementwise multiply by a constant array (e.g. an exists mask)."""
    mv = np.asarray(m, dtype=np.float64)
    out = Var(a.value * mv, a.tape)

    def back():
        if out.grad is not None:
            a.accumulate(out.grad * mv)

    a.tape._ops.append(back)
    return out


def tanh(a: Var) -> Var:
    y = np.tanh(a.value)
    out = Var(y, a.tape)

    def back():
        if out.grad is not None:
            a.accumulate(out.grad * (1.0 - y * y))

    a.tape._ops.append(back)
    return out


def masked_softmax(a: Var, col_mask: np.ndarray) -> Var:
    """Row-wise softmax over the columns where col_mask is true.

    Masked columns get probability exactly 0. Rows are always normalized
    over the same column set; callers guarantee at least one valid column.
    """
    m = np.asarray(col_mask, dtype=bool)
    if not m.any():
        raise ValueError("masked_softmax needs at least one valid column")
    x = np.where(m[None, :], a.value, -np.inf)
    x = x - x.max(axis=1, keepdims=True)
    e = np.exp(x)
    p = e / e.sum(axis=1, keepdims=True)
    out = Var(p, a.tape)

    def back():
        if out.grad is None:
            return
        g = out.grad
        dot = (g * p).sum(axis=1, keepdims=True)
        a.accumulate(p * (g - dot))

    a.tape._ops.append(back)
    return out


def masked_mean_rows(a: Var, row_mask: np.ndarray) -> Var:
    """Mean over the rows where row_mask is true → (1, d)."""
    m = np.asarray(row_mask, dtype=bool)
    cnt = int(m.sum())
    if cnt == 0:
        raise ValueError("masked_mean_rows needs at least one valid row")
    out = Var(a.value[m].mean(axis=0, keepdims=True), a.tape)

    def back():
        if out.grad is None:
            return
        g = np.zeros_like(a.value)
        g[m] = out.grad[0] / cnt
        a.accumulate(g)

    a.tape._ops.append(back)
    return out


def concat_rows(parts: list) -> Var:
    """Stack (n_i, d) blocks vertically; constants allowed among the parts."""
    tape = next(p.tape for p in parts if _is_var(p))
    vals = [_val(p) for p in parts]
    out = Var(np.concatenate(vals, axis=0), tape)
    offsets = np.cumsum([0] + [v.shape[0] for v in vals])

    def back():
        if out.grad is None:
            return
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if _is_var(p):
                p.accumulate(out.grad[lo:hi])

    tape._ops.append(back)
    return out


def concat_cols(parts: list) -> Var:
    """Concatenate (n, d_i) blocks horizontally; constants allowed."""
    tape = next(p.tape for p in parts if _is_var(p))
    vals = [_val(p) for p in parts]
    out = Var(np.concatenate(vals, axis=1), tape)
    offsets = np.cumsum([0] + [v.shape[1] for v in vals])

    def back():
        if out.grad is None:
            return
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if _is_var(p):
                p.accumulate(out.grad[:, lo:hi])

    tape._ops.append(back)
    return out


def slice_rows(a: Var, lo: int, hi: int) -> Var:
    out = Var(a.value[lo:hi], a.tape)

    def back():
        if out.grad is None:
            return
        g = np.zeros_like(a.value)
        g[lo:hi] = out.grad
        a.accumulate(g)

    a.tape._ops.append(back)
    return out


def transpose(a: Var) -> Var:
    out = Var(a.value.T, a.tape)

    def back():
        if out.grad is not None:
            a.accumulate(out.grad.T)

    a.tape._ops.append(back)
    return out


def reshape(a: Var, shape) -> Var:
    out = Var(a.value.reshape(shape), a.tape)

    def back():
        if out.grad is not None:
            a.accumulate(out.grad.reshape(a.value.shape))

    a.tape._ops.append(back)
    return out
