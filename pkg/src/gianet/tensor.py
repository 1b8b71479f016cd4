"""Dense 4-D tensors with define-by-run reverse-mode differentiation.

Every value is an ``(n, c, h, w)`` array. Scalars are ``(1, 1, 1, 1)``.
Operations record a node on their output when any input requires a
gradient; :func:`backward` walks those nodes in reverse topological order.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "tensor",
    "scalar",
    "backward",
    "no_grad",
    "grad_enabled",
    "float64_mode",
    "default_dtype",
    "add",
    "sub",
    "mul",
    "div",
    "scalar_mul",
    "add_scalar",
    "neg",
    "square",
    "absolute",
    "clamp_min",
    "total",
    "mean",
]

SCALAR_SHAPE = (1, 1, 1, 1)

_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, op: str, *shapes: tuple):
        self.op = op
        self.shapes = shapes
        joined = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


def grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


@contextlib.contextmanager
def float64_mode() -> Iterator[None]:
    """Create new tensors in 64-bit precision (gradient-check use only)."""
    prev = default_dtype()
    _state.dtype = np.dtype(np.float64)
    try:
        yield
    finally:
        _state.dtype = prev


class Node:
    """One recorded operation: its inputs and how to push a gradient back."""

    __slots__ = ("inputs", "backward_fn", "name")

    def __init__(self, inputs: Sequence["Tensor"], backward_fn: Callable, name: str):
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        self.name = name


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if arr.ndim != 4:
            raise ShapeError("tensor", arr.shape)
        self.data = np.ascontiguousarray(arr, dtype=dtype or default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape)
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scalar_mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else scalar_mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def scalar(value: float, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(SCALAR_SHAPE, value), requires_grad=requires_grad)


def record(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, name: str) -> Tensor:
    """Wrap ``out_data`` and attach a graph node if any input needs a gradient.

    ``backward_fn(grad)`` must return one gradient (or None) per input.
    """
    out = Tensor(out_data, dtype=out_data.dtype)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(inputs, backward_fn, name)
    return out


class Tape:
    """Recorded op nodes reachable from an output, in topological order."""

    def __init__(self, entries: list[tuple[Tensor, Node]]):
        self.entries = entries

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[tuple[Tensor, Node]] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
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

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def nodes(self) -> list[Node]:
        return [node for _, node in self.entries]


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    Calling twice without zeroing leaf gradients adds the second result to
    the first.
    """
    if loss.shape != SCALAR_SHAPE:
        raise ShapeError("backward (loss must be scalar)", loss.shape)
    if not loss.requires_grad:
        raise RuntimeError("backward: loss does not depend on any tensor requiring grad")
    if loss.node is None:
        _accumulate(loss, np.ones_like(loss.data))
        return
    tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t, node in reversed(tape.entries):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        input_grads = node.backward_fn(g)
        for inp, ig in zip(node.inputs, input_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp.node is None:
                _accumulate(inp, ig)
            elif id(inp) in grads:
                grads[id(inp)] = grads[id(inp)] + ig
            else:
                grads[id(inp)] = ig


def _accumulate(leaf: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
    leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same("add", a, b)
    return record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same("sub", a, b)
    return record(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    # (1,1,1,1) operands act as scalars; no other broadcasting.
    if a.shape == b.shape:
        return record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")
    if b.shape == SCALAR_SHAPE:
        return _mul_by_scalar_tensor(a, b)
    if a.shape == SCALAR_SHAPE:
        return _mul_by_scalar_tensor(b, a)
    raise ShapeError("mul", a.shape, b.shape)


def _mul_by_scalar_tensor(a: Tensor, s: Tensor) -> Tensor:
    sv = s.data.reshape(())

    def bw(g):
        return g * sv, np.sum(g * a.data, dtype=np.float64).astype(s.dtype).reshape(SCALAR_SHAPE)

    return record(a.data * sv, (a, s), bw, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise quotient. The caller guarantees ``b`` is bounded away from 0."""
    _check_same("div", a, b)
    q = a.data / b.data

    def bw(g):
        gb = g / b.data
        return gb, -gb * q

    return record(q, (a, b), bw, "div")


def scalar_mul(a: Tensor, k: float) -> Tensor:
    k = a.dtype.type(k)
    return record(a.data * k, (a,), lambda g: (g * k,), "scalar_mul")


def add_scalar(a: Tensor, k: float) -> Tensor:
    k = a.dtype.type(k)
    return record(a.data + k, (a,), lambda g: (g,), "add_scalar")


def neg(a: Tensor) -> Tensor:
    return record(-a.data, (a,), lambda g: (-g,), "neg")


def square(a: Tensor) -> Tensor:
    two = a.dtype.type(2)
    return record(a.data * a.data, (a,), lambda g: (two * a.data * g,), "square")


def absolute(a: Tensor) -> Tensor:
    """|a|, with subgradient 0 at 0."""
    return record(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); gradient passes only where a > floor."""
    floor = a.dtype.type(floor)
    mask = a.data > floor
    return record(np.where(mask, a.data, floor), (a,), lambda g: (g * mask,), "clamp_min")


def total(a: Tensor) -> Tensor:
    """Sum of all elements as a scalar tensor (float64 accumulation)."""
    s = np.sum(a.data, dtype=np.float64).astype(a.dtype).reshape(SCALAR_SHAPE)
    return record(s, (a,), lambda g: (np.broadcast_to(g.reshape(()), a.shape).copy(),), "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    m = (np.sum(a.data, dtype=np.float64) / n).astype(a.dtype).reshape(SCALAR_SHAPE)
    inv = a.dtype.type(1.0 / n)
    return record(m, (a,), lambda g: (np.full(a.shape, g.reshape(()) * inv, dtype=a.dtype),), "mean")
