"""Tensors and the recording tape for reverse-mode differentiation.

Every primitive applied to a tensor that requires grad is appended to the
current thread's tape. ``backward`` walks that tape in reverse once and then
consumes it; a second ``backward`` on a value from a consumed tape raises
until the tape is reset.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any

import numpy as np


class AutodiffError(RuntimeError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


def check_finite(arr: np.ndarray, what: str = "tensor") -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    """Dense float64 array with an optional gradient buffer.

    ``data`` is read-only; optimizers swap in a new array rather than
    writing in place, so a tensor's value can be shared between threads.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_record")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if 0 in arr.shape:
            raise ValueError("tensor dimensions must be positive")
        check_finite(arr, name or "tensor")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._record: Record | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False, name: str | None = None) -> Tensor:
        # Trusted fast path for arrays produced by primitives (already checked).
        t = cls.__new__(cls)
        if arr.flags.writeable:
            arr.setflags(write=False)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = name
        t._record = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._record is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def set_data(self, arr: np.ndarray) -> None:
        arr = np.array(arr, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise ValueError(f"shape {arr.shape} does not match {self.data.shape}")
        check_finite(arr, self.name or "tensor")
        arr.setflags(write=False)
        self.data = arr

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"


@dataclass(eq=False)
class Record:
    """One primitive application on the tape."""

    kind: str
    inputs: tuple
    attrs: dict
    output: Tensor
    ctx: Any = None
    tape: "Tape | None" = None
    generation: int = 0


@dataclass(eq=False)
class Tape:
    records: list[Record] = field(default_factory=list)
    consumed: bool = False
    generation: int = 0

    def append(self, rec: Record) -> None:
        if self.consumed:
            raise AutodiffError("tape already consumed by backward(); call reset() first")
        rec.tape = self
        rec.generation = self.generation
        self.records.append(rec)

    def reset(self) -> None:
        """Drop all records; values recorded before the reset become detached."""
        self.records.clear()
        self.consumed = False
        self.generation += 1

    def __len__(self) -> int:
        return len(self.records)

    def replay(self) -> list[np.ndarray]:
        """Recompute every record forward from the tape's leaf values.

        Returns the recomputed output of each record, in tape order, without
        touching the recorded tensors or any side state (batch-norm running
        statistics are not updated).
        """
        from .ops import PRIMITIVES

        values: dict[int, np.ndarray] = {}
        outs = []
        for rec in self.records:
            arrays = []
            for t in rec.inputs:
                if t is None:
                    arrays.append(None)
                else:
                    arrays.append(values.get(id(t), t.data))
            out, _ = PRIMITIVES[rec.kind].forward(arrays, dict(rec.attrs, _replay=True))
            values[id(rec.output)] = out
            outs.append(out)
        return outs


class _State(threading.local):
    def __init__(self):
        self.tape: Tape | None = None
        self.enabled = True


_state = _State()


def current_tape() -> Tape:
    tape = _state.tape
    if tape is None or tape.consumed:
        tape = _state.tape = Tape()
    return tape


def grad_enabled() -> bool:
    return _state.enabled


@contextmanager
def no_grad():
    """Run primitives without recording (evaluation, attacks' final queries)."""
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextmanager
def fresh_tape():
    """Record onto a new tape for the duration of the block."""
    prev = _state.tape
    tape = _state.tape = Tape()
    try:
        yield tape
    finally:
        _state.tape = prev


def backward(loss: Tensor, seed: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every grad-requiring leaf.

    Gradients add into existing buffers (call ``zero_grad`` between steps).
    Leaves that appear on the tape but do not influence the loss receive an
    explicit zero gradient.
    """
    from .ops import PRIMITIVES

    rec = loss._record
    if rec is None or rec.tape is None or rec.tape.generation != rec.generation:
        raise AutodiffError("backward() on a value with no recorded history (detached)")
    tape = rec.tape
    if tape.consumed:
        raise AutodiffError("repeated backward() without reset: tape already consumed")
    if seed is None:
        if loss.size != 1:
            raise AutodiffError("backward() needs a scalar loss or an explicit seed")
        seed = np.ones(loss.shape)
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=np.float64)}
    leaves: dict[int, Tensor] = {}
    for r in reversed(tape.records):
        for t in r.inputs:
            if t is not None and t.requires_grad and _is_leaf_on(t, tape):
                leaves[id(t)] = t
        g = grads.pop(id(r.output), None)
        if g is None:
            continue
        in_grads = PRIMITIVES[r.kind].backward(r.ctx, g, r.attrs)
        for t, gi in zip(r.inputs, in_grads):
            if t is None or gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros(t.shape)
        check_finite(g, f"gradient of {t.name or 'tensor'}")
        t.grad = g.copy() if t.grad is None else t.grad + g
    for r in tape.records:
        r.ctx = None
        r.inputs = ()
    tape.records.clear()
    tape.consumed = True


def _is_leaf_on(t: Tensor, tape: Tape) -> bool:
    r = t._record
    return r is None or r.tape is not tape or r.generation != tape.generation


def record(kind: str, inputs: tuple, attrs: dict, out: np.ndarray, ctx) -> Tensor:
    """Wrap a primitive's output, appending it to the tape when needed."""
    needs = grad_enabled() and any(t is not None and t.requires_grad for t in inputs)
    result = Tensor._wrap(out, requires_grad=needs)
    if needs:
        tape = current_tape()
        rec = Record(kind, inputs, attrs, result, ctx)
        tape.append(rec)
        result._record = rec
    return result
