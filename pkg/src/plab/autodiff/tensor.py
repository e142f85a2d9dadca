"""Tensor value type and the recording tape used for reverse-mode differentiation."""

from __future__ import annotations

import threading
import weakref
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when an op receives inputs whose shapes do not fit its contract."""


class NonFiniteError(ValueError):
    """Raised when a tensor would be constructed from NaN or Inf values."""


class Tensor:
    """Dense float64 array with an optional gradient buffer.

    Values are checked for finiteness on construction.  ``grad`` is ``None``
    until a backward pass populates it.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: tuple[Graph, int] | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> Tensor:
        # op outputs: arr is already a fresh float64 buffer
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("op produced NaN or Inf")
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t._node = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor._wrap(self.data.copy(), False)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    # operator sugar; the op module is imported lazily to avoid a cycle
    def __add__(self, other):
        from . import ops
        if isinstance(other, (int, float)):
            return ops.add_scalar(self, float(other))
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        if isinstance(other, (int, float)):
            return ops.add_scalar(self, -float(other))
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        if isinstance(other, (int, float)):
            return ops.scalar_mul(self, float(other))
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scalar_mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Node:
    kind: str
    input_ids: tuple[int | None, ...]
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_fn: BackwardFn


@dataclass
class Graph:
    """Ordered tape of recorded operations.

    Ops executed inside ``with Graph() as g:`` append a node whose inputs
    always precede it, so the tape is topologically sorted by construction.
    """

    nodes: list[Node] = field(default_factory=list)
    grads: dict[int, np.ndarray] = field(default_factory=dict)
    leaf_grads: dict[int, np.ndarray] = field(default_factory=dict)

    def __enter__(self) -> Graph:
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _stack().pop()
        assert popped is self

    def record(self, kind: str, inputs: Sequence[Tensor], output: Tensor, backward_fn: BackwardFn) -> None:
        ids = tuple(self._id_of(t) for t in inputs)
        # weak back-reference: the tape owns its outputs, so a strong one would
        # form a cycle that keeps every activation alive until a full GC pass
        output._node = (weakref.ref(self), len(self.nodes))
        self.nodes.append(Node(kind, ids, tuple(inputs), output, backward_fn))

    def _id_of(self, t: Tensor) -> int | None:
        if t._node is not None and t._node[0]() is self:
            return t._node[1]
        return None

    def backward(self, loss: Tensor, accumulate_leaves: bool = True) -> None:
        backward(self, loss, accumulate_leaves=accumulate_leaves)

    def grad_of(self, t: Tensor) -> np.ndarray | None:
        """Gradient of the last backward pass w.r.t. a recorded intermediate."""
        idx = self._id_of(t)
        if idx is None:
            return self.leaf_grads.get(id(t))
        return self.grads.get(idx)


_local = threading.local()


def _stack() -> list[Graph]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def current_graph() -> Graph | None:
    s = _stack()
    return s[-1] if s else None


def backward(graph: Graph, loss: Tensor, accumulate_leaves: bool = True) -> None:
    """Populate gradients of ``loss`` w.r.t. every reachable requires_grad tensor.

    Recorded intermediates keep their gradient in ``graph.grads`` (and on
    ``.grad``); leaf tensors accumulate into ``.grad`` additively unless
    ``accumulate_leaves`` is False.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    idx = graph._id_of(loss)
    if idx is None:
        raise ValueError("loss was not recorded in this graph")
    graph.grads = {idx: np.ones_like(loss.data)}
    leaf_grads: dict[int, tuple[Tensor, np.ndarray]] = {}

    for i in range(idx, -1, -1):
        g = graph.grads.get(i)
        if g is None:
            continue
        node = graph.nodes[i]
        in_grads = node.backward_fn(g)
        for t, tid, gi in zip(node.inputs, node.input_ids, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if tid is not None:
                prev = graph.grads.get(tid)
                graph.grads[tid] = gi if prev is None else prev + gi
            else:
                key = id(t)
                if key in leaf_grads:
                    leaf_grads[key] = (t, leaf_grads[key][1] + gi)
                else:
                    leaf_grads[key] = (t, gi)

    for i, g in graph.grads.items():
        out = graph.nodes[i].output
        if out.requires_grad:
            out.grad = g
    if accumulate_leaves:
        for t, g in leaf_grads.values():
            t.grad = g.copy() if t.grad is None else t.grad + g
    graph.leaf_grads = {k: g for k, (_, g) in leaf_grads.items()}
