"""Tensors and the operation tape.

Operations only record onto a tape while one is active::

    with Tape() as tape:
        loss = ops.sum(ops.matmul(x, w))
    grads = tape.backward(loss)

Outside a tape, ops evaluate eagerly with no bookkeeping (inference mode).
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

_local = threading.local()


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; ops are imported lazily to avoid a cycle.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.slice(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("out", "inputs", "vjp", "op")

    def __init__(self, out, inputs, vjp, op):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp
        self.op = op


class Tape:
    """Ordered record of primitive operations for reverse-mode differentiation."""

    def __init__(self):
        self.records: list[_Record] = []
        self._prev = None

    def __enter__(self) -> "Tape":
        self._prev = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._prev
        return False

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: Sequence[Tensor], vjp: Callable, op: str) -> None:
        self.records.append(_Record(out, tuple(inputs), vjp, op))

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Gradients of scalar *loss*, keyed by ``id`` of each leaf tensor.

        Leaves are tensors with ``requires_grad`` that no recorded op produced.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        produced = {id(r.out) for r in self.records}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, np.ndarray] = {}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            in_grads = rec.vjp(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    raise AssertionError(f"{rec.op}: gradient shape {gi.shape} != input shape {t.shape}")
                key = id(t)
                target = grads if key in produced else leaves
                if key in target:
                    target[key] = target[key] + gi
                else:
                    target[key] = gi
        return leaves


def active_tape() -> Tape | None:
    return getattr(_local, "tape", None)


def make_result(data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    """Wrap an op's forward value and record it when differentiation is live."""
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite value in forward pass of {op}")
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, inputs, vjp, op)
    return out


def backward(loss: Tensor, params: dict[str, Tensor], tape: Tape | None = None) -> dict[str, np.ndarray]:
    """Named gradients for *params*; parameters the loss never reached get zeros."""
    tape = tape or active_tape()
    if tape is None:
        raise RuntimeError("backward called without a recording tape")
    leaves = tape.backward(loss)
    return {name: leaves.get(id(p), np.zeros_like(p.data)) for name, p in params.items()}
