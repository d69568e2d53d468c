"""Dense tensors with reverse-mode automatic differentiation.

The engine is a classic single-use tape: ops executed while a ``Tape`` is
active append one node each, and ``backward`` walks the node list in
reverse (append order is already topological). Tensors are thin wrappers
around contiguous numpy arrays in float32 or float64; a whole tape must
stay in one dtype.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, TapeError, UsageError

SUPPORTED_DTYPES = (np.float32, np.float64)


class Tensor:
    """A contiguous n-d array plus an optional gradient buffer.

    ``node`` links the tensor to the tape node that produced it; leaf
    tensors (inputs, parameters) have ``node is None`` and accumulate
    their gradient into ``grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, dtype=None, requires_grad=False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in SUPPORTED_DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(())[()])

    def detach(self):
        """A new leaf sharing this tensor's buffer, cut off from the tape."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out.node = None
        return out

    def copy(self):
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def clear_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class Parameter:
    """A named, optionally trainable tensor owned by a model.

    Freezing a parameter flips ``requires_grad`` on its value so that no
    gradient is ever computed for it; gradients still flow *through* any
    op that reads it.
    """

    __slots__ = ("name", "value")

    def __init__(self, name, value, trainable=True):
        if not isinstance(value, Tensor):
            value = Tensor(value)
        self.name = name
        self.value = value
        self.value.requires_grad = trainable

    @property
    def trainable(self):
        return self.value.requires_grad

    @trainable.setter
    def trainable(self, flag):
        self.value.requires_grad = bool(flag)

    @property
    def data(self):
        return self.value.data

    @property
    def grad(self):
        return self.value.grad

    def clear_grad(self):
        self.value.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape}, trainable={self.trainable})"


class Node:
    """One recorded op: inputs, and a closure producing input gradients."""

    __slots__ = ("inputs", "backward_fn", "out_grad", "tape")

    def __init__(self, inputs, backward_fn, tape):
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.out_grad = None
        self.tape = tape


_TAPE_STACK = []


class Tape:
    """Append-only record of ops, consumed by a single backward pass."""

    __slots__ = ("nodes", "active", "consumed")

    def __init__(self):
        self.nodes = []
        self.active = False
        self.consumed = False

    def __enter__(self):
        if _TAPE_STACK:
            raise TapeError("a tape is already active; tapes do not nest")
        self.active = True
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        self.active = False
        _TAPE_STACK.pop()
        return False


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record(out_data, inputs, backward_fn):
    """Wrap an op result, registering a tape node when gradients are needed.

    ``backward_fn(out_grad)`` must return one gradient array (or None) per
    input, in order.
    """
    tape = active_tape()
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(out_data)
    out.grad = None
    out.node = None
    out.requires_grad = False
    if tape is None or not any(t.requires_grad for t in inputs):
        return out
    dtypes = {t.dtype for t in inputs}
    if len(dtypes) > 1:
        raise UsageError(f"mixed dtypes on one tape: {sorted(d.name for d in dtypes)}")
    node = Node(tuple(inputs), backward_fn, tape)
    out.requires_grad = True
    out.node = node
    tape.nodes.append(node)
    return out


def backward(tape, loss):
    """Populate gradients of every leaf reachable from ``loss``.

    The tape is consumed: a second call raises. Reverse iteration over the
    append-order node list visits each node exactly once.
    """
    if tape.consumed:
        raise TapeError("backward() on a consumed tape")
    if loss.data.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss.node is None or loss.node.tape is not tape:
        raise UsageError("loss was not produced on this tape")
    tape.consumed = True
    loss.node.out_grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.out_grad
        if g is None:
            continue
        grads = node.backward_fn(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is not None and inp.node.tape is tape:
                if inp.node.out_grad is None:
                    inp.node.out_grad = np.zeros_like(inp.data)
                inp.node.out_grad += gi
            else:
                # Leaf, or an output of some earlier tape: stop here.
                inp.accumulate_grad(gi)
        node.out_grad = None
        node.backward_fn = None
    tape.nodes.clear()
