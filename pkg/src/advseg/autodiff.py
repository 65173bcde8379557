"""Reverse-mode tape over the tensor kernels.

A :class:`Tape` records one :class:`Node` per differentiable op in
execution order, so walking it backwards is a reverse topological order.
Forward values travel in :class:`Var` handles; nodes only keep what their
backward closure captured, which lets intermediate activations be freed
as soon as nothing downstream needs them.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import tensor as T

GROUPS = ("s", "d")  # segmentation / discriminator


class TapeError(RuntimeError):
    pass


@dataclass(eq=False)
class Param:
    """A trainable tensor with its gradient buffer."""

    name: str
    group: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.group not in GROUPS:
            raise ValueError(f"unknown parameter group {self.group!r}")
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[...] = 0


class ParamStore:
    """Named parameters partitioned into the segmentation group ``"s"`` and
    the discriminator group ``"d"``."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name: str, group: str, value: np.ndarray) -> Param:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        p = Param(name, group, value)
        self._params[name] = p
        return p

    def merge(self, other: "ParamStore") -> None:
        for p in other:
            if p.name in self._params:
                raise KeyError(f"duplicate parameter {p.name!r}")
            self._params[p.name] = p

    def __iter__(self) -> Iterator[Param]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def group(self, group: str) -> list[Param]:
        return [p for p in self if p.group == group]

    def zero_grad(self, group: str | None = None) -> None:
        for p in self:
            if group is None or p.group == group:
                p.zero_grad()

    def snapshot(self, group: str | None = None) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self if group is None or p.group == group}


class Node:
    __slots__ = ("op", "parents", "backward", "param")

    def __init__(self, op: str, parents, backward: Callable | None, param: Param | None = None):
        self.op = op
        self.parents = parents
        self.backward = backward
        self.param = param


class Var:
    """Forward value plus (optionally) the tape node that produced it."""

    __slots__ = ("value", "node")

    def __init__(self, value: np.ndarray, node: Node | None = None):
        self.value = value
        self.node = node

    @property
    def shape(self):
        return self.value.shape


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []

    def param(self, p: Param) -> Var:
        node = Node("param", (), None, p)
        self.nodes.append(node)
        return Var(p.value, node)

    def record(self, op: str, inputs, value: np.ndarray, backward: Callable) -> Var:
        """``backward(grad)`` must return one gradient (or ``None``) per input."""
        parents = tuple(v.node if isinstance(v, Var) else None for v in inputs)
        if all(p is None for p in parents):
            return Var(value)
        node = Node(op, parents, backward)
        self.nodes.append(node)
        return Var(value, node)

    def backward(self, out: Var, grad=None) -> None:
        """Accumulate d(out)/d(param) into every reachable ``Param.grad``."""
        if out.node is None:
            raise TapeError("output was not produced on this tape (forward not run in train mode?)")
        if grad is None:
            grad = np.ones_like(out.value)
        grads: dict[int, np.ndarray] = {id(out.node): np.asarray(grad, dtype=out.value.dtype)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.param is not None:
                node.param.grad += g
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if parent is None or pg is None:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


def _rec(tape: Tape | None, op, inputs, value, backward) -> Var:
    if tape is None:
        return Var(value)
    return tape.record(op, inputs, value, backward)


# ---------------------------------------------------------------------------
# differentiable ops


def conv2d(tape, x: Var, w: Var, b: Var, dilation: int) -> Var:
    params = T.ConvParams(w.value, b.value, dilation)
    out = T.conv2d_forward(x.value, params)
    xv = x.value
    need_gx = x.node is not None

    def backward(g):
        return T.conv2d_backward(xv, params, g, need_gx)

    return _rec(tape, "conv2d", (x, w, b), out, backward)


def batchnorm(tape, x: Var, gamma: Var, beta: Var, state: T.BatchNormState, mode: str, update_stats: bool = True) -> Var:
    st = T.BatchNormState(gamma.value, beta.value, state.running_mean, state.running_var, state.momentum, state.epsilon)
    out, cache = T.batchnorm_forward(x.value, st, mode, update_stats)

    def backward(g):
        return T.batchnorm_backward(g, cache, st)

    return _rec(tape, "batchnorm", (x, gamma, beta), out, backward)


def relu(tape, x: Var) -> Var:
    out = T.relu(x.value)
    return _rec(tape, "relu", (x,), out, lambda g: (T.relu_backward(g, out),))


def dropout(tape, x: Var, rate: float, mode: str, rng) -> Var:
    out, mask = T.dropout(x.value, rate, mode, rng)
    if mask is None:
        return x
    return _rec(tape, "dropout", (x,), out, lambda g: (g * mask,))


def maxpool3(tape, x: Var, stride: int) -> Var:
    out, arg = T.maxpool3_forward(x.value, stride)
    shape = x.value.shape
    return _rec(tape, "maxpool3", (x,), out, lambda g: (T.maxpool3_backward(g, arg, shape, stride),))


def dense(tape, x: Var, w: Var, b: Var) -> Var:
    """Fully connected layer on the flattened (c, h, w) features.

    ``w`` is (out, in); the result is reshaped to (n, out, 1, 1)."""
    n = x.value.shape[0]
    flat = x.value.reshape(n, -1)
    if flat.shape[1] != w.value.shape[1]:
        raise T.ShapeError(f"dense layer expects {w.value.shape[1]} features, got {flat.shape[1]}")
    out = (flat @ w.value.T.astype(flat.dtype, copy=False) + b.value.astype(flat.dtype, copy=False)).reshape(n, -1, 1, 1)
    in_shape = x.value.shape
    wv = w.value

    def backward(g):
        g2 = g.reshape(n, -1)
        gx = (g2 @ wv.astype(g2.dtype, copy=False)).reshape(in_shape)
        gw = (g2.T @ flat).astype(wv.dtype)
        gb = g2.sum(axis=0, dtype=np.float64).astype(wv.dtype)
        return gx, gw, gb

    return _rec(tape, "dense", (x, w, b), out, backward)


def concat_channels(tape, a: Var, b: Var) -> Var:
    if a.value.shape[0] != b.value.shape[0] or a.value.shape[2:] != b.value.shape[2:]:
        raise T.ShapeError(f"cannot concatenate {a.value.shape} and {b.value.shape} along channels")
    ca = a.value.shape[1]
    out = np.concatenate([a.value, b.value], axis=1)
    return _rec(tape, "concat", (a, b), out, lambda g: (g[:, :ca], g[:, ca:]))


def softmax(tape, x: Var) -> Var:
    out = T.softmax_channels(x.value)
    return _rec(tape, "softmax", (x,), out, lambda g: (T.softmax_backward(g, out),))


def gradient_reversal(tape, x: Var) -> Var:
    """Identity forward; negates the gradient on the way back."""
    return _rec(tape, "grad_reversal", (x,), x.value, lambda g: (-g,))


def stop_gradient(x: Var) -> Var:
    return Var(x.value)


def sum_all(tape, x: Var) -> Var:
    """Scalar sum, handy for tests and gradient checks."""
    shape, dt = x.value.shape, x.value.dtype
    out = np.asarray(x.value.sum(dtype=np.float64), dtype=dt)
    return _rec(tape, "sum", (x,), out, lambda g: (np.full(shape, g, dtype=dt),))
