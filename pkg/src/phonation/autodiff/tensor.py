"""Tensors and the recording tape for reverse-mode differentiation."""

from __future__ import annotations

import contextvars
import weakref
from typing import Callable, Sequence

import numpy as np

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("active_tape", default=None)


class Tensor:
    """An ndarray with an optional gradient slot.

    Leaf tensors with ``requires_grad`` receive ``.grad`` after
    :func:`backward`; intermediate results can be queried through
    :meth:`Tape.grad_of`.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        # weak, so tensor <-> node links never form a cycle; the tape owns nodes
        self._node: weakref.ref | None = None

    @property
    def node(self) -> "Node | None":
        """The primitive that produced this tensor, while its tape is alive."""
        return None if self._node is None else self._node()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self.node is not None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"


class Node:
    """One executed primitive: its inputs, output and backward rule."""

    __slots__ = ("inputs", "output", "backward_fn", "op", "__weakref__")

    def __init__(self, op: str, inputs: Sequence[Tensor], output: Tensor,
                 backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitives executed while the tape is active.

    Use as a context manager; operations run outside any tape are not
    recorded and cannot be differentiated.  Recording order is a valid
    topological order because a primitive can only consume tensors that
    already exist.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._grads: dict[int, np.ndarray] = {}
        self._token = None

    def __enter__(self) -> "Tape":
        if self._token is not None:
            raise RuntimeError("tape is already active")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def record(self, node: Node) -> None:
        node.output._node = weakref.ref(node)
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)

    def grad_of(self, t: Tensor) -> np.ndarray:
        """Gradient of the last differentiated loss w.r.t. any tensor on the tape."""
        g = self._grads.get(id(t))
        return np.zeros_like(t.data) if g is None else g

    def backward(self, loss: Tensor, params: Sequence[Tensor] = ()) -> None:
        backward(self, loss, params)


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def make_result(op: str, data: np.ndarray, inputs: Sequence[Tensor],
                backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap a primitive's output and record it if any input is tracked."""
    out = Tensor(data)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.tracked for t in inputs):
        tape.record(Node(op, inputs, out, backward_fn))
    return out


def backward(tape: Tape, loss: Tensor, params: Sequence[Tensor] = ()) -> None:
    """Propagate d(loss)/d(.) through the tape in reverse recording order.

    Gradients accumulate into ``.grad`` of every ``requires_grad`` leaf
    reached.  Tensors in ``params`` that the loss does not depend on get a
    zero gradient rather than none.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    producer = loss.node
    if producer is None or not any(n is producer for n in reversed(tape.nodes)):
        raise ValueError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g_out = grads.get(id(node.output))
        if g_out is None:
            continue
        for inp, g in zip(node.inputs, node.backward_fn(g_out)):
            if g is None or not inp.tracked:
                continue
            if g.shape != inp.data.shape:
                raise AssertionError(f"{node.op}: gradient shape {g.shape} != input shape {inp.shape}")
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
            if inp.node is None and inp.requires_grad:
                leaves[key] = inp

    for key, leaf in leaves.items():
        g = grads[key].astype(leaf.data.dtype, copy=False)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    tape._grads = grads

