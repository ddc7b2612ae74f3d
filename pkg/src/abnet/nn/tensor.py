"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations only build a graph while a :class:`Tape` is active::

    with Tape() as tape:
        loss = (x * x).sum()
    backward(loss, tape)

Outside a tape every op is a plain numpy computation, which is what the
evaluation path relies on for speed.
"""

from __future__ import annotations

import contextlib
import weakref
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

DTYPE = np.float64

_TAPES: list["Tape"] = []
# op name -> multiplier applied to that op's backward output; test hook only
_FAULTS: dict[str, float] = {}
# when active, kinked ops append their discrete branch decisions here
_BRANCHES: list[list[bytes]] = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._node: Optional[_Node] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # arithmetic is defined in ops.py and attached at import time


class _Node:
    __slots__ = ("op", "out", "parents", "backward")

    def __init__(self, op: str, out: Tensor, parents: Sequence[Tensor], backward: Callable):
        self.op = op
        # weak, so output -> node -> output is not a cycle and graphs die by refcount
        self.out = weakref.ref(out)
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so the list is already a
    topological order of the graph.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def current_tape() -> Optional[Tape]:
    return _TAPES[-1] if _TAPES else None


@contextlib.contextmanager
def no_record() -> Iterator[None]:
    """Temporarily suspend every active tape."""
    saved = list(_TAPES)
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


@contextlib.contextmanager
def inject_fault(op: str, scale: float = 2.0) -> Iterator[None]:
    """Scale the backward output of ``op``; used to sanity-check gradient checkers."""
    _FAULTS[op] = scale
    try:
        yield
    finally:
        _FAULTS.pop(op, None)


@contextlib.contextmanager
def record_branches() -> Iterator[list[bytes]]:
    """Collect the branch decisions (relu masks, pool winners, ...) of ops run inside."""
    log: list[bytes] = []
    _BRANCHES.append(log)
    try:
        yield log
    finally:
        _BRANCHES.remove(log)


def note_branch(decision: np.ndarray) -> None:
    if _BRANCHES:
        _BRANCHES[-1].append(np.ascontiguousarray(decision).tobytes())


def make_result(op: str, data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and record it on the active tape.

    ``grad_fn(g)`` receives the upstream gradient and returns one gradient
    (or None) per parent.
    """
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        node = _Node(op, out, tuple(parents), grad_fn)
        out._node = node
        tape.nodes.append(node)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss._node is None:
        _accumulate(loss, np.ones_like(loss.data))
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        out = node.out()
        if out is None:
            continue
        g = grads.pop(id(out), None)
        if g is None:
            continue
        parent_grads = node.backward(g)
        scale = _FAULTS.get(node.op)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if scale is not None:
                pg = pg * scale
            if parent._node is None:
                _accumulate(parent, pg)
            else:
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=DTYPE).reshape(t.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def clear_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
