"""Reverse-mode automatic differentiation over flat float64 arrays.

Values are ``Tensor`` objects; differentiable operations record nodes on the
active ``Tape``. ``backward`` replays the tape once in reverse, accumulating
gradients into every tensor that requires them. The engine is deliberately
small and deterministic: float64 everywhere, single-threaded, no fusion.

Gradient walls are explicit: ``detach`` produces a value through which no
gradient flows, and after ``backward`` a detached source that received no
gradient from any other path reports an all-zero gradient rather than none.
"""

from __future__ import annotations

import os

import numpy as np


class ShapeError(ValueError):
    """An operation was applied to tensors with incompatible shapes."""


class UnknownPrimitiveError(ValueError):
    """apply_primitive was called with an op id outside the registry."""


class GradientError(RuntimeError):
    """Backward-pass misuse: non-scalar loss, consumed tape, missing grad."""


# Extra finite-ness assertions after every op. Off by default: the public
# Tensor constructor always validates, only internal op outputs are skipped.
_DEBUG_CHECKS = os.environ.get("TAPD_DEBUG_NUMERICS", "") not in ("", "0")


def set_debug_checks(enabled: bool) -> None:
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


def debug_checks_enabled() -> bool:
    return _DEBUG_CHECKS


class Tensor:
    """An n-dimensional float64 value, optionally carrying a gradient.

    ``data`` is a C-contiguous float64 ndarray (row-major flat storage).
    ``grad`` is either None or an ndarray of the same shape. Tensors are
    treated as immutable snapshots by the ops; only the optimizer mutates
    ``data`` in place (between tapes).
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if any(s <= 0 for s in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        """Fast construction for op outputs; validates only in debug mode."""
        if _DEBUG_CHECKS and not np.all(np.isfinite(arr)):
            raise ValueError("op produced NaN or Inf")
        t = object.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """The underlying array. Callers must not mutate it."""
        return self.data

    def detach(self) -> "Tensor":
        from . import ops

        return ops.detach(self)

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    # Small arithmetic sugar; the model code mostly uses the ops module.
    def __add__(self, other):
        from . import ops

        return ops.add(self, ops.as_tensor(other))

    def __radd__(self, other):
        from . import ops

        return ops.add(ops.as_tensor(other), self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, ops.as_tensor(other))

    def __rmul__(self, other):
        from . import ops

        return ops.mul(ops.as_tensor(other), self)

    def __neg__(self):
        from . import ops

        return ops.neg(self)

    def __sub__(self, other):
        from . import ops

        return ops.add(self, ops.neg(ops.as_tensor(other)))

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def __getitem__(self, key):
        from . import ops

        return ops.slice_(self, key)

    def reshape(self, shape) -> "Tensor":
        from . import ops

        return ops.reshape(self, shape)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def parameter(data) -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(data, requires_grad=True)


class _Node:
    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op, inputs, output, vjp):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


_TAPE_STACK: list = []


class Tape:
    """Ordered record of primitive applications for one backward pass.

    Nodes are appended in execution order, so the list is topologically
    sorted by construction; backward is a single reverse sweep that visits
    each node exactly once.
    """

    __slots__ = ("nodes", "consumed")

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _TAPE_STACK.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)


class no_grad:
    """Context that suspends tape recording (inference paths)."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _TAPE_STACK.pop()
        return False


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record(op: str, inputs: tuple, out_arr: np.ndarray, vjp, requires_grad=None) -> Tensor:
    """Wrap an op output and record it on the active tape when needed.

    Recording is driven by the inputs (a detach node must land on the tape
    even though its output carries no gradient).
    """
    needs = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_arr, needs if requires_grad is None else requires_grad)
    tape = active_tape()
    if needs and tape is not None:
        tape.nodes.append(_Node(op, inputs, out, vjp))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(tensor) into .grad for every participating tensor.

    The loss must be a scalar produced on the tape; a tape can be replayed
    only once. Existing .grad buffers are accumulated into, not replaced.
    """
    if loss.data.size != 1:
        raise GradientError(f"backward requires a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise GradientError("tape already consumed by a previous backward")
    tape.consumed = True

    seed = np.ones_like(loss.data)
    if loss.grad is None:
        loss.grad = seed
    else:
        np.add(loss.grad, seed, out=loss.grad)

    for node in reversed(tape.nodes):
        g = node.output.grad
        if g is None:
            continue
        grads = node.vjp(g)
        for t, gi in zip(node.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = np.array(gi)  # own the buffer; gi may be a view
            else:
                np.add(t.grad, gi, out=t.grad)

    # Detached sources that received nothing from any other path report an
    # explicit all-zero gradient: the wall blocked flow, it did not hide it.
    for node in tape.nodes:
        if node.op == "detach":
            src = node.inputs[0]
            if src.requires_grad and src.grad is None:
                src.grad = np.zeros_like(src.data)
