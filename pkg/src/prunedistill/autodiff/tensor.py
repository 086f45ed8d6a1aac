"""Dense float64 tensors with a reverse-mode tape.

Every differentiable operation returns a new :class:`Tensor` whose ``node``
records the inputs and a closure that maps the output gradient to input
gradients. :func:`backward` linearises the recorded graph into a
:class:`Tape` (topological order) and walks it once in reverse.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from prunedistill.errors import ShapeError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Node:
    """One recorded operation: ``output = op(*inputs)``."""

    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple["Tensor", ...], backward_fn: BackwardFn):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    """An n-dimensional float64 array plus an optional gradient.

    ``grad`` is only populated on leaf tensors (tensors not produced by a
    recorded op) that have ``requires_grad`` set.
    """

    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.size == 0:
            raise ShapeError("tensors must have at least one element")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: Node | None = None
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, op: str, inputs: tuple["Tensor", ...], backward_fn: BackwardFn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.requires_grad = any(t.requires_grad for t in inputs)
        out.node = Node(op, inputs, backward_fn) if out.requires_grad else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from prunedistill.autodiff import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from prunedistill.autodiff import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from prunedistill.autodiff import ops
        return ops.add(ops.neg(self), other)

    def __mul__(self, other):
        from prunedistill.autodiff import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from prunedistill.autodiff import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from prunedistill.autodiff import ops
        return ops.matmul(self, other)

    def sum(self, axis=None):
        from prunedistill.autodiff import ops
        return ops.sum(self, axis)

    def mean(self, axis=None):
        from prunedistill.autodiff import ops
        return ops.mean(self, axis)

    def reshape(self, *shape):
        from prunedistill.autodiff import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def relu(self):
        from prunedistill.autodiff import ops
        return ops.relu(self)

    def log(self):
        from prunedistill.autodiff import ops
        return ops.log(self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class Tape:
    """Operations reachable from an output, in topological order."""

    def __init__(self, nodes: list[tuple[Tensor, Node]]):
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def from_output(cls, output: Tensor) -> "Tape":
        order: list[tuple[Tensor, Node]] = []
        seen: set[int] = set()
        # iterative post-order DFS; recursion depth would limit graph size
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if t.node is None:
                continue
            if expanded:
                order.append((t, t.node))
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for parent in reversed(t.node.inputs):
                if parent.node is not None and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def run_backward(self, output: Tensor, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(output): seed}
        for t, node in reversed(self.nodes):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            input_grads = node.backward_fn(g)
            for inp, ig in zip(node.inputs, input_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if inp.node is None:
                    _accumulate_leaf(inp, ig)
                else:
                    key = id(inp)
                    if key in grads:
                        grads[key] = grads[key] + ig
                    else:
                        grads[key] = ig


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {t.shape}")
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def backward(loss: Tensor) -> Tape:
    """Populate ``grad`` on every leaf reachable from a scalar ``loss``.

    Gradients accumulate across calls until :meth:`Tensor.zero_grad`.
    Returns the tape that was traversed.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            _accumulate_leaf(loss, np.ones_like(loss.data))
            return Tape([])
        raise ShapeError("loss was not produced by any recorded operation")
    tape = Tape.from_output(loss)
    tape.run_backward(loss, np.ones_like(loss.data))
    return tape


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
