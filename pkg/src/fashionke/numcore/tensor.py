"""Tensors and the recording tape used for reverse-mode differentiation.

A :class:`Tape` is activated with a ``with`` block. Every primitive in
:mod:`fashionke.numcore.ops` that sees a tracked input appends one record to
the active tape; :func:`backprop` then replays the records in reverse.
Outside a tape block primitives compute values only, which is what the
finite-difference checker and inference paths rely on.
"""
from __future__ import annotations

import hashlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import InvalidShape

_ids = itertools.count()
_local = threading.local()


class Tensor:
    """Double-precision array with an optional gradient buffer."""

    __slots__ = ("values", "grad", "requires_grad", "name", "id")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self.id = next(_ids)

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; the functional forms live in ops.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, key):
        from . import ops
        return ops.getitem(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Record:
    op: str
    inputs: tuple
    outputs: tuple
    backward: Callable[[list], Sequence]


@dataclass
class Tape:
    """Ordered list of executed primitive records."""

    records: list = field(default_factory=list)

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def leaves(self) -> list:
        """Tracked tensors consumed by the tape but produced by none of its records."""
        produced = {o.id for r in self.records for o in r.outputs}
        seen, out = set(), []
        for r in self.records:
            for t in r.inputs:
                if t.requires_grad and t.id not in produced and t.id not in seen:
                    seen.add(t.id)
                    out.append(t)
        return out


def active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class BranchLog:
    """Fingerprint of the discrete choices made by piecewise primitives.

    While a log is active, ReLU sign patterns and max-pool winners are fed
    into a running hash. Two evaluations with equal digests took the same
    smooth branch everywhere, so a finite difference between them is valid.
    """

    def __init__(self):
        self._hash = hashlib.blake2b(digest_size=16)

    def __enter__(self) -> "BranchLog":
        stack = getattr(_local, "branch_logs", None)
        if stack is None:
            stack = _local.branch_logs = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.branch_logs.pop()

    def digest(self) -> bytes:
        return self._hash.digest()


def note_branch(choice: np.ndarray) -> None:
    """Record a discrete choice (mask or argmax array) in the active :class:`BranchLog`."""
    stack = getattr(_local, "branch_logs", None)
    if stack:
        stack[-1]._hash.update(np.ascontiguousarray(choice).tobytes())


def emit(op: str, inputs: Sequence[Tensor], out_values: Sequence[np.ndarray], backward) -> list:
    """Wrap ``out_values`` in tensors and record the op if any input is tracked."""
    tape = active_tape()
    tracked = tape is not None and any(t.requires_grad for t in inputs)
    outs = [Tensor(v, requires_grad=tracked) for v in out_values]
    if tracked:
        tape.records.append(Record(op, tuple(inputs), tuple(outs), backward))
    return outs


def backprop(loss: Tensor, tape: Tape, leaves: Sequence[Tensor] | None = None) -> dict:
    """Propagate d(loss)/d(.) backward through ``tape``.

    Sets ``.grad`` on every tracked leaf (and on every tensor in ``leaves``,
    zero when the loss does not depend on it) and returns ``{tensor: grad}``
    for those leaves.
    """
    if loss.values.size != 1:
        raise InvalidShape(f"loss must be scalar, got shape {loss.shape}")
    grads = {loss.id: np.ones_like(loss.values)}
    for rec in reversed(tape.records):
        gouts = [grads.get(o.id) for o in rec.outputs]
        if all(g is None for g in gouts):
            continue
        gouts = [np.zeros_like(o.values) if g is None else g for o, g in zip(rec.outputs, gouts)]
        gins = rec.backward(gouts)
        for inp, g in zip(rec.inputs, gins):
            if g is None or not inp.requires_grad:
                continue
            prev = grads.get(inp.id)
            grads[inp.id] = g if prev is None else prev + g
    targets = list(leaves) if leaves is not None else tape.leaves()
    result = {}
    for t in targets:
        g = grads.get(t.id)
        t.grad = np.zeros_like(t.values) if g is None else np.array(g, dtype=np.float64).reshape(t.shape)
        result[t] = t.grad
    return result
