"""Dense float64 tensors with tape-based reverse-mode differentiation."""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np


class AutodiffError(RuntimeError):
    """Base class for errors raised by the autodiff engine."""


class ShapeError(AutodiffError, ValueError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


class _State(threading.local):
    def __init__(self) -> None:
        self.grad_enabled = True
        self.scope: tuple[str, ...] = ()
        self.tapes: list[Graph] = []


_state = _State()


@contextmanager
def no_grad() -> Iterator[None]:
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def name_scope(name: str) -> Iterator[None]:
    """Prefix node names created inside the block (used in error messages)."""
    prev = _state.scope
    _state.scope = prev + (name,)
    try:
        yield
    finally:
        _state.scope = prev


def grad_enabled() -> bool:
    return _state.grad_enabled


def _node_name(scope: Sequence[str], op: str) -> str:
    return "/".join(tuple(scope) + (op,))


class Tensor:
    """An n-dimensional float64 array that can take part in differentiation.

    Tensors produced by ops keep a reference to their parents and a closure
    computing the parents' gradient contributions.  Leaves (parameters,
    inputs) accumulate into ``grad`` when ``backward`` runs.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_scope")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf") -> None:
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor created by {op!r}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._scope: tuple[str, ...] = _state.scope

    # construction of op outputs skips the defensive copy above
    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out._scope = _state.scope
        if not np.isfinite(data).all():
            raise NonFiniteError(f"non-finite output at node {_node_name(out._scope, op)!r}")
        needs = _state.grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        for tape in _state.tapes:
            tape._record(out)
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

    @property
    def node_name(self) -> str:
        return _node_name(self._scope, self.op)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ShapeError(f"tensor of shape {self.shape} is not a scalar")

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out.op = "detach"
        out._parents = ()
        out._backward = None
        out._scope = self._scope
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward needs a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        _run_backward(_topo_order(self), self, grad)

    # operator sugar; implementations live in ops.py
    def __add__(self, other):
        return _ops().add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return _ops().sub(self, other)

    def __rsub__(self, other):
        return _ops().sub(other, self)

    def __mul__(self, other):
        return _ops().mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _ops().div(self, other)

    def __rtruediv__(self, other):
        return _ops().div(other, self)

    def __neg__(self):
        return _ops().neg(self)

    def __matmul__(self, other):
        return _ops().matmul(self, other)

    def __pow__(self, exponent: float):
        return _ops().power(self, exponent)

    def __getitem__(self, index):
        return _ops().getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return _ops().sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return _ops().mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)


def _ops():
    from . import ops

    return ops


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topo_order(root: Tensor) -> list[Tensor]:
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
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _run_backward(order: Sequence[Tensor], root: Tensor, grad: np.ndarray) -> None:
    grads: dict[int, np.ndarray] = {id(root): np.asarray(grad, dtype=np.float64)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.data.shape:
                raise ShapeError(
                    f"gradient shape {pg.shape} != {parent.data.shape} flowing out of {node.node_name!r}"
                )
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


class Graph:
    """A recorded computation.

    ``fn`` maps a dict of named input tensors to a dict of named outputs.
    :func:`evaluate` runs it while recording every produced node in creation
    order, which is a topological order; :func:`backward` replays that
    record in reverse.
    """

    def __init__(self, fn: Callable[..., Mapping[str, Tensor]], name: str = "graph") -> None:
        self.fn = fn
        self.name = name
        self.nodes: list[Tensor] = []
        self.inputs: dict[str, Tensor] = {}
        self.outputs: dict[str, Tensor] | None = None

    def _record(self, node: Tensor) -> None:
        self.nodes.append(node)

    def leaves(self) -> list[Tensor]:
        seen: dict[int, Tensor] = {}
        for node in self.nodes:
            for p in node._parents:
                if not p._parents and p.requires_grad:
                    seen.setdefault(id(p), p)
        return list(seen.values())


def evaluate(graph: Graph, inputs: Mapping[str, Tensor]) -> dict[str, Tensor]:
    graph.nodes = []
    graph.inputs = {k: as_tensor(v) for k, v in inputs.items()}
    graph.outputs = None
    _state.tapes.append(graph)
    try:
        with name_scope(graph.name):
            result = graph.fn(**graph.inputs)
    except TypeError as exc:
        raise ShapeError(f"graph {graph.name!r}: {exc}") from exc
    finally:
        _state.tapes.remove(graph)
    if isinstance(result, Tensor):
        result = {"out": result}
    graph.outputs = dict(result)
    return graph.outputs


def backward(graph: Graph, output: str = "out") -> dict[str, np.ndarray]:
    """Gradients of ``graph.outputs[output]`` w.r.t. every named input.

    Gradients of all leaves in the graph are reset first, so repeated calls
    give identical results instead of accumulating.
    """
    if graph.outputs is None:
        raise AutodiffError(f"backward called on {graph.name!r} before evaluate")
    if output not in graph.outputs:
        raise KeyError(f"graph {graph.name!r} has no output {output!r}")
    root = graph.outputs[output]
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar output; {output!r} has shape {root.shape}")
    for leaf in list(graph.inputs.values()) + graph.leaves():
        leaf.grad = None
    if root.requires_grad:
        order = [t for t in graph.nodes]
        # inputs and parameters are not recorded; they only need to receive grads
        _run_backward(_with_leaves(order), root, np.ones_like(root.data))
    return {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for name, t in graph.inputs.items()
    }


def _with_leaves(nodes: list[Tensor]) -> list[Tensor]:
    leaves: list[Tensor] = []
    seen: set[int] = set()
    for node in nodes:
        for p in node._parents:
            if not p._parents and id(p) not in seen:
                seen.add(id(p))
                leaves.append(p)
    return leaves + nodes
