"""Tensor, Parameter and the reverse-mode tape."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

# dtype used for freshly created tensors; grad_check switches it to float64
_DEFAULT_DTYPE = [np.float32]


def default_dtype():
    return _DEFAULT_DTYPE[0]


class precision:
    """Context manager switching the storage dtype of new tensors."""

    def __init__(self, dtype):
        self.dtype = np.dtype(dtype).type
        self._saved = None

    def __enter__(self):
        self._saved = _DEFAULT_DTYPE[0]
        _DEFAULT_DTYPE[0] = self.dtype
        return self

    def __exit__(self, *exc):
        _DEFAULT_DTYPE[0] = self._saved
        return False


class Tensor:
    """A dense array plus the closure that maps its gradient to its parents."""

    __slots__ = ("data", "parents", "backward_fn", "op")

    def __init__(
        self,
        data,
        parents: Sequence["Tensor"] = (),
        backward_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None,
        op: str = "const",
    ):
        arr = np.asarray(data)
        if arr.dtype != default_dtype():
            arr = arr.astype(default_dtype())
        self.data = arr
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __add__(self, other: "Tensor") -> "Tensor":
        from .ops import add

        return add(self, other)

    def __mul__(self, scalar: float) -> "Tensor":
        from .ops import scale

        return scale(self, scalar)

    __rmul__ = __mul__

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"


class Parameter(Tensor):
    """A named leaf tensor whose gradient accumulates in ``grad``."""

    __slots__ = ("name", "grad")

    def __init__(self, value, name: str):
        super().__init__(value, op="param")
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


@dataclass
class Tape:
    """Nodes reachable from an output, in topological order (inputs first)."""

    nodes: list = field(default_factory=list)

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        order = []
        seen = set()
        # iterative post-order DFS; graphs from deep nets overflow the recursion limit
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node.parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def parameters(self) -> list:
        return [n for n in self.nodes if isinstance(n, Parameter)]


def backward(loss: Tensor, tape: Optional[Tape] = None) -> Tape:
    """Accumulate d(loss)/d(param) into ``param.grad`` for every reachable Parameter.

    Gradients are added to whatever is already stored, so two calls sum their
    contributions. Returns the tape that was traversed.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = Tape.record(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad = node.grad + g.astype(node.grad.dtype, copy=False)
            continue
        if node.backward_fn is None:
            continue
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return tape
