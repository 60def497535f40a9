"""Dense NCHW tensor with reverse-mode gradient tracking.

A :class:`Tensor` wraps a NumPy array (float32 by default) and, when it was
produced by a differentiable op, remembers its parents and a closure that
maps the output gradient to parent gradients. :meth:`Tensor.backward` walks
the recorded graph in reverse topological order.

A tensor may also be *meta*: it carries a shape but no data. Ops accept meta
inputs and only propagate shapes, which is what the complexity profiler uses
to trace a full-resolution network without doing the arithmetic.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import GraphError

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Run ops without recording the graph (inference, optimizer updates)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_shape")

    def __init__(self, data, requires_grad: bool = False, *, shape: Sequence[int] | None = None):
        if data is None:
            if shape is None:
                raise ValueError("a meta tensor needs an explicit shape")
            self.data = None
            self._shape = tuple(int(d) for d in shape)
        else:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(DEFAULT_DTYPE)
            self.data = arr
            self._shape = arr.shape
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- construction helpers -------------------------------------------------

    @classmethod
    def meta(cls, shape: Sequence[int]) -> "Tensor":
        return cls(None, shape=shape)

    @classmethod
    def zeros(cls, shape: Sequence[int], dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    @classmethod
    def from_op(
        cls,
        data: np.ndarray,
        parents: Iterable["Tensor"],
        backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
        op: str,
    ) -> "Tensor":
        """Wrap an op result, attaching the graph edge if any parent needs a gradient.

        ``backward`` receives the output gradient and returns one gradient (or
        ``None``) per parent, in the same order as ``parents``.
        """
        out = cls(data)
        parents = tuple(parents)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
            out.op = op
        return out

    # -- introspection --------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self._shape

    @property
    def is_meta(self) -> bool:
        return self.data is None

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    @property
    def dtype(self):
        return None if self.data is None else self.data.dtype

    @property
    def size(self) -> int:
        return int(np.prod(self._shape, dtype=np.int64))

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data) if self.data is not None else Tensor.meta(self._shape)

    def __repr__(self) -> str:
        kind = "meta" if self.is_meta else str(self.data.dtype)
        return f"Tensor(shape={self._shape}, {kind}, op={self.op})"

    # -- arithmetic sugar -----------------------------------------------------

    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    # -- reverse mode ---------------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
        if self.is_meta:
            raise GraphError("cannot differentiate a meta tensor")
        if grad is None:
            if self.size != 1:
                raise GraphError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones(self.shape, dtype=self.data.dtype)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            if len(parent_grads) != len(node._parents):
                raise GraphError(f"op {node.op!r} returned {len(parent_grads)} gradients for {len(node._parents)} inputs")
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise GraphError(f"op {node.op!r} produced gradient {pg.shape} for input {parent.shape}")
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, outputs before inputs. Iterative DFS."""
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, i = stack.pop()
        if i == 0:
            if state.get(id(node)) == 2:
                continue
            state[id(node)] = 1
        if i < len(node._parents):
            stack.append((node, i + 1))
            child = node._parents[i]
            s = state.get(id(child))
            if s == 1:
                raise GraphError(f"cycle detected at op {child.op!r}")
            if s is None and child.requires_grad:
                stack.append((child, 0))
        else:
            state[id(node)] = 2
            order.append(node)
    order.reverse()
    return order
