"""Reverse-mode differentiation over numpy arrays, with higher-order support.

A `Var` wraps a float64 ndarray and remembers how it was produced.  Every
op's backward rule is itself written in terms of these ops, so gradients are
`Var`s too and can be differentiated again.  The model's backward pass uses
one reverse sweep (linear-layer weight gradients come out literally as
``Z.T @ dY``); the attack differentiates its gradient-matching objective by
running a second sweep through the first.

Only what the transformer and the attack objective need is implemented:
elementwise arithmetic, (batched) matmul, transpose/reshape, reductions,
exp/log/sqrt/abs/power, relu, basic-index slicing, and stop_gradient.
Inputs are never mutated; values must be treated as immutable.
"""

from __future__ import annotations

import numpy as np


class Var:
    __slots__ = ("value", "_parents", "_vjp")

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    # -- operator sugar -------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __repr__(self):
        return f"Var(shape={self.value.shape})"


def lift(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def constant(x) -> Var:
    return Var(x)


def stop_gradient(x) -> Var:
    x = lift(x)
    return Var(x.value)


def _sum_to_shape(g: Var, shape: tuple) -> Var:
    """Reduce a broadcast gradient back to `shape` (graph ops throughout)."""
    while g.value.ndim > len(shape):
        g = vsum(g, axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.value.shape[i] != 1:
            g = vsum(g, axis=i, keepdims=True)
    if g.value.shape != shape:
        g = reshape(g, shape)
    return g


def add(a, b) -> Var:
    a, b = lift(a), lift(b)
    return Var(
        a.value + b.value,
        (a, b),
        lambda g: (_sum_to_shape(g, a.value.shape), _sum_to_shape(g, b.value.shape)),
    )


def sub(a, b) -> Var:
    a, b = lift(a), lift(b)
    return Var(
        a.value - b.value,
        (a, b),
        lambda g: (
            _sum_to_shape(g, a.value.shape),
            _sum_to_shape(neg(g), b.value.shape),
        ),
    )


def neg(a) -> Var:
    a = lift(a)
    return Var(-a.value, (a,), lambda g: (neg(g),))


def mul(a, b) -> Var:
    a, b = lift(a), lift(b)
    return Var(
        a.value * b.value,
        (a, b),
        lambda g: (
            _sum_to_shape(mul(g, b), a.value.shape),
            _sum_to_shape(mul(g, a), b.value.shape),
        ),
    )


def div(a, b) -> Var:
    a, b = lift(a), lift(b)
    return Var(
        a.value / b.value,
        (a, b),
        lambda g: (
            _sum_to_shape(div(g, b), a.value.shape),
            _sum_to_shape(neg(div(mul(g, a), mul(b, b))), b.value.shape),
        ),
    )


def _swap_last(x: Var) -> Var:
    axes = list(range(x.value.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def matmul(a, b) -> Var:
    a, b = lift(a), lift(b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ValueError("matmul requires operands with ndim >= 2")
    return Var(
        np.matmul(a.value, b.value),
        (a, b),
        lambda g: (
            _sum_to_shape(matmul(g, _swap_last(b)), a.value.shape),
            _sum_to_shape(matmul(_swap_last(a), g), b.value.shape),
        ),
    )


def transpose(a, axes: tuple) -> Var:
    a = lift(a)
    inv = tuple(np.argsort(axes))
    return Var(np.transpose(a.value, axes), (a,), lambda g: (transpose(g, inv),))


def reshape(a, shape) -> Var:
    a = lift(a)
    old = a.value.shape
    return Var(a.value.reshape(shape), (a,), lambda g: (reshape(g, old),))


def vsum(a, axis=None, keepdims: bool = False) -> Var:
    a = lift(a)
    out = np.sum(a.value, axis=axis, keepdims=keepdims)

    def vjp(g):
        gg = g
        if not keepdims and axis is not None:
            ax = axis if isinstance(axis, tuple) else (axis,)
            kshape = list(a.value.shape)
            for i in ax:
                kshape[i] = 1
            gg = reshape(gg, tuple(kshape))
        elif axis is None and not keepdims:
            gg = reshape(gg, (1,) * a.value.ndim)
        return (broadcast_to(gg, a.value.shape),)

    return Var(out, (a,), vjp)


def vmean(a, axis=None, keepdims: bool = False) -> Var:
    a = lift(a)
    total = a.value.size if axis is None else np.prod(
        [a.value.shape[i] for i in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return div(vsum(a, axis=axis, keepdims=keepdims), float(total))


def broadcast_to(a, shape) -> Var:
    a = lift(a)
    return Var(
        np.broadcast_to(a.value, shape).copy(),
        (a,),
        lambda g: (_sum_to_shape(g, a.value.shape),),
    )


def exp(a) -> Var:
    a = lift(a)
    out = Var(np.exp(a.value), (a,), None)
    out._vjp = lambda g: (mul(g, out),)
    return out


def log(a) -> Var:
    a = lift(a)
    return Var(np.log(a.value), (a,), lambda g: (div(g, a),))


def sqrt(a) -> Var:
    a = lift(a)
    out = Var(np.sqrt(a.value), (a,), None)
    out._vjp = lambda g: (div(g, mul(2.0, out)),)
    return out


def power(a, p: float) -> Var:
    a = lift(a)
    return Var(
        a.value ** p,
        (a,),
        lambda g: (mul(g, mul(float(p), power(a, p - 1.0))),)
        if p != 1.0
        else (g,),
    )


def absolute(a) -> Var:
    a = lift(a)
    sign = Var(np.sign(a.value))
    return Var(np.abs(a.value), (a,), lambda g: (mul(g, sign),))


def relu(a) -> Var:
    a = lift(a)
    mask = Var((a.value > 0.0).astype(np.float64))
    return Var(np.maximum(a.value, 0.0), (a,), lambda g: (mul(g, mask),))


def getitem(a, idx) -> Var:
    a = lift(a)
    shape = a.value.shape
    return Var(a.value[idx], (a,), lambda g: (scatter(g, shape, idx),))


def scatter(g, shape, idx) -> Var:
    """Place `g` into zeros of `shape` at basic index `idx` (adjoint of getitem)."""
    g = lift(g)
    out = np.zeros(shape)
    out[idx] = g.value
    return Var(out, (g,), lambda h: (getitem(h, idx),))


def dot(a, b) -> Var:
    """Inner product of two same-shape arrays (flattened)."""
    return vsum(mul(a, b))


def grad(out: Var, wrts: list, seed: Var | None = None) -> list:
    """Gradients of `out` w.r.t. each var in `wrts`; results are Vars.

    The returned Vars are connected to the original graph, so they can be
    differentiated again.
    """
    if seed is None:
        seed = Var(np.ones_like(out.value))

    topo: list[Var] = []
    visited = set()
    stack: list[tuple[Var, bool]] = [(out, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, Var] = {id(out): seed}
    for node in reversed(topo):
        g = grads.get(id(node))
        if g is None or node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else add(prev, pg)

    return [
        grads[id(w)] if id(w) in grads else Var(np.zeros_like(w.value)) for w in wrts
    ]
