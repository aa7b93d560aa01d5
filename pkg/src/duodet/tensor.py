"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every op records the tensors it consumed and a closure that maps the
upstream gradient to gradients of those inputs.  Calling ``backward`` on
a scalar result traces the recorded graph, then runs each closure exactly
once in reverse topological order, accumulating into ``.grad``.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable

import numpy as np

__all__ = ["Tensor", "Parameter", "Graph", "backward", "no_grad", "grad_enabled"]

_grad_mode = [True]


@contextmanager
def no_grad():
    """Run the enclosed ops without recording a backward graph."""
    _grad_mode.append(False)
    try:
        yield
    finally:
        _grad_mode.pop()


def grad_enabled() -> bool:
    return _grad_mode[-1]


class Tensor:
    """A float64 array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        """A view of the same values that never receives gradient."""
        return Tensor(self.data)

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def backward(self) -> "Graph":
        return backward(self)

    def __repr__(self) -> str:  # pragma: no cover - debug aid
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


class Parameter(Tensor):
    """A learnable tensor with a stable id used for checkpointing and EMA pairing."""

    __slots__ = ("pid",)

    def __init__(self, data, pid: str):
        super().__init__(data, requires_grad=True)
        self.pid = pid

    def __repr__(self) -> str:  # pragma: no cover - debug aid
        return f"Parameter({self.pid!r}, shape={self.data.shape})"


class Graph:
    """The recorded ops reachable from a root tensor, leaves first."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))
        return cls(order)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if not n._parents]

    def clear(self) -> None:
        """Release recorded closures and intermediate grads.

        Leaf tensors (parameters and inputs) keep both their values and
        their accumulated gradients.
        """
        for node in self.nodes:
            if node._parents:
                node._parents = ()
                node._backward = None
                node.grad = None


def backward(root: Tensor) -> Graph:
    """Accumulate d(root)/d(leaf) into every reachable tensor's ``.grad``."""
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.data.shape}")
    graph = Graph.trace(root)
    root.grad = np.ones_like(root.data)
    for node in reversed(graph.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    return graph
