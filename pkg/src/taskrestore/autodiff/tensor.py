"""Tensor values and the recording tape used for reverse-mode differentiation."""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when an op receives incompatible operand shapes."""


class TapeError(RuntimeError):
    pass


class Tensor:
    """Dense array plus gradient bookkeeping.

    Only tensors created by a recorded op carry a reference to the tape they
    were recorded on. Leaves (parameters, inputs) never do.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numel(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic sugar; the heavy lifting lives in ops
    def __add__(self, other):
        from . import ops

        if np.isscalar(other):
            return ops.add_scalar(self, float(other))
        return ops.add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        if np.isscalar(other):
            return ops.add_scalar(self, -float(other))
        return ops.sub(self, as_tensor(other))

    def __rsub__(self, other):
        from . import ops

        if np.isscalar(other):
            return ops.add_scalar(ops.mul_scalar(self, -1.0), float(other))
        return ops.sub(as_tensor(other), self)

    def __mul__(self, other):
        from . import ops

        if np.isscalar(other):
            return ops.mul_scalar(self, float(other))
        return ops.mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops

        if not np.isscalar(other):
            raise TypeError("only division by a scalar is supported")
        return ops.mul_scalar(self, 1.0 / float(other))

    def __neg__(self):
        from . import ops

        return ops.mul_scalar(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    kind: str


@dataclass
class Tape:
    """Ordered record of differentiable ops.

    Recording order is a topological order of the graph, so walking the list
    backwards visits every node after all of its consumers.
    """

    nodes: list[Node] = field(default_factory=list)
    consumed: bool = False

    def record(self, kind, inputs, output, backward_fn) -> None:
        if self.consumed:
            raise TapeError("cannot record onto a tape that was already consumed")
        self.nodes.append(Node(tuple(inputs), output, backward_fn, kind))
        output._tape = self

    def __len__(self) -> int:
        return len(self.nodes)


class _State(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.grad_enabled = True


_state = _State()


def current_tape() -> Tape:
    if _state.tape.consumed:
        _state.tape = Tape()
    return _state.tape


def reset_tape() -> None:
    """Drop everything recorded so far on this thread."""
    _state.tape = Tape()


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def record(kind: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    """Wrap op output, recording a backward rule when any input needs one."""
    out = Tensor(out_data)
    if _state.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        current_tape().record(kind, inputs, out, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` buffers; callers zero them.
    """
    if loss.numel() != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = loss._tape
    if tape is None:
        # loss is itself a leaf
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward pass")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        gout = grads.pop(id(node.output), None)
        if gout is None:
            continue
        gins = node.backward(gout)
        for inp, g in zip(node.inputs, gins):
            if g is None or not inp.requires_grad:
                continue
            if g.shape != inp.shape:
                raise ShapeError(
                    f"{node.kind} backward produced grad {g.shape} for input {inp.shape}"
                )
            if inp._tape is tape:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
            else:
                g = g.astype(inp.data.dtype, copy=False)
                inp.grad = g.copy() if inp.grad is None else inp.grad + g
    tape.consumed = True
    tape.nodes.clear()
    if _state.tape is tape:
        _state.tape = Tape()
