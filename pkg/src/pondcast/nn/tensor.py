"""Dense float64 tensors and an explicit reverse-mode tape.

Operations record themselves on the innermost active :class:`Tape`.  With no
tape active they compute values only, which is how inference runs.

    >>> p = Tensor([1.0, 2.0, 3.0], name="p")
    >>> with Tape() as tape:
    ...     loss = (p * p).sum()
    >>> backward(tape, loss)["p"].data
    array([2., 4., 6.])
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_uids = itertools.count()
_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A float64 array, optionally named (a parameter) and linked to a tape.

    Leaf tensors reject NaN/Inf at construction.  ``node_id`` is the index of
    the tape node that produced the tensor, or ``None`` for leaves.
    """

    __slots__ = ("data", "name", "node_id", "uid", "requires_grad")
    __array_priority__ = 100.0

    def __init__(self, data, name: str | None = None, requires_grad: bool | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("leaf tensor contains non-finite values")
        self.data = arr
        self.name = name
        self.node_id = None
        self.uid = next(_uids)
        self.requires_grad = name is not None if requires_grad is None else requires_grad

    @classmethod
    def _result(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.name = None
        t.node_id = None
        t.uid = next(_uids)
        t.requires_grad = requires_grad
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # Operator sugar; the primitives live in ``ops``.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        return ops.transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._result(np.asarray(x, dtype=np.float64), False)


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple
    outputs: tuple
    vjp: Callable
    fwd: Callable


class Tape:
    """Append-only record of primitive operations.

    Used as a context manager; tapes nest and are confined to the thread that
    opened them.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: tuple, outputs: tuple, vjp: Callable, fwd: Callable) -> None:
        idx = len(self.nodes)
        for out in outputs:
            out.node_id = idx
        self.nodes.append(Node(op, inputs, outputs, vjp, fwd))

    def replay(self) -> list[tuple]:
        """Recompute every node from the current leaf values.

        Returns the recomputed outputs, node by node; the recorded outputs are
        left untouched so callers can compare them.
        """
        values: dict[int, np.ndarray] = {}
        replayed = []
        for node in self.nodes:
            args = [values.get(t.uid, t.data) for t in node.inputs]
            outs = node.fwd(*args)
            if not isinstance(outs, tuple):
                outs = (outs,)
            for t, v in zip(node.outputs, outs):
                values[t.uid] = v
            replayed.append(outs)
        return replayed


def primitive(op: str, inputs: Sequence, fwd: Callable, vjp: Callable,
              n_out: int = 1, with_ctx: bool = False):
    """Evaluate ``fwd`` on the input arrays and record it on the active tape.

    ``vjp(grads, needs)`` receives the output cotangent (a tuple when
    ``n_out > 1``) and a tuple of booleans saying which inputs need a
    gradient; it returns one array (or ``None``) per input.  With
    ``with_ctx`` the forward returns ``(outputs, ctx)`` and the vjp is called
    as ``vjp(grads, needs, ctx)`` so fused ops can keep their intermediates.
    """
    tensors = tuple(as_tensor(x) for x in inputs)
    tape = current_tape()
    needs = tuple(t.requires_grad for t in tensors) if tape is not None else ()
    track = tape is not None and any(needs)
    raw = fwd(*[t.data for t in tensors])
    if with_ctx:
        raw, ctx = raw
    outs = raw if n_out > 1 else (raw,)
    results = tuple(Tensor._result(np.asarray(o, dtype=np.float64), track) for o in outs)
    if track:
        if with_ctx:
            replay_fwd = lambda *a: fwd(*a)[0]  # noqa: E731
            bound = lambda g, _n=needs, _c=ctx: vjp(g, _n, _c)  # noqa: E731
        else:
            replay_fwd = fwd
            bound = lambda g, _n=needs: vjp(g, _n)  # noqa: E731
        tape.record(op, tensors, results, bound, replay_fwd)
    return results if n_out > 1 else results[0]


def backward(tape: Tape, loss: Tensor, params=None) -> dict:
    """Gradients of a scalar ``loss`` with respect to named leaf tensors.

    ``params`` (a ParamSet or mapping name -> Tensor) fixes the key set;
    parameters the loss does not reach get zero gradients.  Without
    ``params`` every named leaf seen on the tape is reported.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.uid: np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    owned: set[int] = set()
    if loss.node_id is None and loss.name is not None:
        leaves[loss.uid] = loss
    if loss.node_id is not None:
        if loss.node_id >= len(tape.nodes) or not _contains(tape.nodes[loss.node_id].outputs, loss):
            raise ValueError("loss was not recorded on this tape")
        _check_topological(tape, loss.node_id)
        for node in reversed(tape.nodes[: loss.node_id + 1]):
            gs = [grads.pop(o.uid, None) for o in node.outputs]
            for o in node.outputs:
                owned.discard(o.uid)
            if all(g is None for g in gs):
                continue
            gs = [np.zeros_like(o.data) if g is None else g for o, g in zip(node.outputs, gs)]
            in_grads = node.vjp(tuple(gs) if len(gs) > 1 else gs[0])
            for t, g in zip(node.inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                if g.shape != t.data.shape:
                    g = unbroadcast(g, t.data.shape)
                if t.uid not in grads:
                    grads[t.uid] = g
                elif t.uid in owned:
                    grads[t.uid] += g
                else:
                    # the first cotangent may alias another buffer; copy once
                    grads[t.uid] = grads[t.uid] + g
                    owned.add(t.uid)
                if t.node_id is None and t.name is not None:
                    leaves[t.uid] = t
    if params is None:
        return {t.name: Tensor(grads[uid]) for uid, t in leaves.items()}
    out = {}
    for name, p in _items(params):
        g = grads.get(p.uid)
        out[name] = Tensor(np.zeros_like(p.data) if g is None else g)
    return out


def _contains(seq, item) -> bool:
    return any(x is item for x in seq)


def _check_topological(tape: Tape, upto: int) -> None:
    produced: dict[int, int] = {}
    for idx, node in enumerate(tape.nodes[: upto + 1]):
        for t in node.inputs:
            if t.node_id is not None and produced.get(t.uid, idx) >= idx:
                raise RuntimeError(f"tape is not topologically ordered at node {idx} ({node.op})")
        for o in node.outputs:
            produced[o.uid] = idx


def _items(params):
    if hasattr(params, "items"):
        return list(params.items())
    return [(p.name, p) for p in params]


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g
