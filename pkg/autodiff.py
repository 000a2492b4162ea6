"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Ops executed inside an active ``Graph`` whose inputs require gradients are
recorded in execution order, which is already a topological order. Outside a
tape every op only computes its value.

    with Graph() as tape:
        loss = ((x @ w) - y).power(2).mean()
    grads = tape.backward(loss)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

MAX_NDIM = 2

Operand = Union["Tensor", float, int, np.ndarray]


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


_ACTIVE_GRAPHS: List["Graph"] = []


class Tensor:
    """Immutable dense float64 value, at most 2-D."""

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > MAX_NDIM:
            raise ShapeError(f"tensor: at most {MAX_NDIM} dimensions supported, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor: non-finite value in input data")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._node: Optional[Node] = None

    @classmethod
    def _from_op(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        arr = np.asarray(data, dtype=np.float64)
        arr.setflags(write=False)
        out.data = arr
        out.requires_grad = requires_grad
        out._node = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Operand) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: Operand) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: Operand) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __pow__(self, exponent: float) -> "Tensor":
        return power(self, exponent)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def power(self, exponent: float) -> "Tensor":
        return power(self, exponent)

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        return sum_(self, axis)

    def mean(self, axis: Optional[int] = None) -> "Tensor":
        return mean(self, axis)

    def clamp(self, lo: float = -np.inf, hi: float = np.inf) -> "Tensor":
        return clamp(self, lo, hi)

    def take(self, rows) -> "Tensor":
        return take(self, rows)


@dataclass(eq=False)
class Node:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Graph:
    """One forward pass worth of recorded ops; consumed by a single backward."""

    def __init__(self):
        self.nodes: List[Node] = []
        self.consumed = False

    def __enter__(self) -> "Graph":
        if self.consumed:
            raise GraphError("graph: cannot record into a consumed graph")
        _ACTIVE_GRAPHS.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_GRAPHS.remove(self)

    def leaves(self) -> List[Tensor]:
        seen = {}
        for node in self.nodes:
            for inp in node.inputs:
                if inp.requires_grad and inp.is_leaf:
                    seen[id(inp)] = inp
        return list(seen.values())

    def backward(self, output: Tensor) -> Dict[Tensor, np.ndarray]:
        if self.consumed:
            raise GraphError("backward: graph already consumed by a previous backward pass")
        if output.data.size != 1:
            raise GraphError(f"backward: output must be a scalar, got shape {output.shape}")
        if output.requires_grad and output._node is not None and output._node not in self.nodes:
            raise GraphError("backward: output was not recorded on this graph")
        self.consumed = True

        accum: Dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        for node in reversed(self.nodes):
            grad_out = accum.pop(id(node.output), None)
            if grad_out is None:
                continue
            for inp, grad in zip(node.inputs, node.backward(grad_out)):
                if grad is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in accum:
                    accum[key] = accum[key] + grad
                else:
                    accum[key] = grad

        grads: Dict[Tensor, np.ndarray] = {}
        for leaf in self.leaves():
            grads[leaf] = accum.get(id(leaf), np.zeros_like(leaf.data))
        if output.is_leaf and output.requires_grad:
            grads[output] = accum.get(id(output), np.ones_like(output.data))
        return grads


def forward(fn: Callable[..., Tensor], inputs: Sequence[Tensor]) -> Tuple[Tensor, Graph]:
    """Evaluate ``fn(*inputs)`` on a fresh tape."""
    graph = Graph()
    with graph:
        out = fn(*inputs)
    return out, graph


def backward(graph: Graph, output: Tensor) -> Dict[Tensor, np.ndarray]:
    return graph.backward(output)


def as_tensor(value: Operand) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _record(op: str, data: np.ndarray, inputs: Tuple[Tensor, ...], backward_fn) -> Tensor:
    graph = _ACTIVE_GRAPHS[-1] if _ACTIVE_GRAPHS else None
    requires = graph is not None and any(t.requires_grad for t in inputs)
    out = Tensor._from_op(data, requires)
    if requires:
        node = Node(op, inputs, out, backward_fn)
        out._node = node
        graph.nodes.append(node)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --- elementwise binary ops ---

def add(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", a.data + b.data, (a, b), _backward)


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", a.data - b.data, (a, b), _backward)


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def _backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", a.data * b.data, (a, b), _backward)


def div(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def _backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _record("div", out, (a, b), _backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def _backward(g):
        return g @ b.data.T, a.data.T @ g

    return _record("matmul", a.data @ b.data, (a, b), _backward)


# --- elementwise unary ops ---

def neg(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _record("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = expit(a.data)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    return maximum(a, 0.0)


def power(a: Tensor, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)

    def _backward(g):
        return (g * p * np.power(a.data, p - 1.0),)

    return _record("power", np.power(a.data, p), (a,), _backward)


def maximum(a: Tensor, floor: float) -> Tensor:
    """Elementwise max against a constant; ties route no gradient."""
    a = as_tensor(a)
    mask = a.data > floor
    return _record("maximum", np.where(mask, a.data, floor), (a,), lambda g: (g * mask,))


def clamp(a: Tensor, lo: float = -np.inf, hi: float = np.inf) -> Tensor:
    # identity gradient inside [lo, hi], zero outside
    a = as_tensor(a)
    if lo > hi:
        raise ValueError(f"clamp: empty interval [{lo}, {hi}]")
    inside = (a.data >= lo) & (a.data <= hi)
    return _record("clamp", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# --- reductions and indexing ---

def sum_(a: Tensor, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"sum: axis {axis} out of range for shape {a.shape}")

    def _backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _record("sum", a.data.sum(axis=axis), (a,), _backward)


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return sum_(a, axis) * (1.0 / count)


def take(a: Tensor, rows) -> Tensor:
    """Gather rows of a 2-D tensor; repeated indices accumulate gradient."""
    a = as_tensor(a)
    idx = np.asarray(rows, dtype=np.int64)
    if a.ndim != 2 or idx.ndim != 1:
        raise ShapeError(f"take: expected 2-D tensor and 1-D index, got shapes {a.shape} and {idx.shape}")
    if idx.size and (idx.min() < -a.shape[0] or idx.max() >= a.shape[0]):
        raise ShapeError(f"take: index out of range for shape {a.shape}")

    def _backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record("take", a.data[idx], (a,), _backward)


def columns(a: Tensor, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2 or not 0 <= start < stop <= a.shape[1]:
        raise ShapeError(f"columns: cannot slice [{start}:{stop}] from shape {a.shape}")

    def _backward(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _record("columns", a.data[:, start:stop], (a,), _backward)
