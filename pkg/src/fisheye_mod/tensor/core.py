"""Dense float64 tensor and the reverse-mode gradient tape.

Ops only record onto a tape while one is active::

    with GradTape() as tape:
        loss = model(x)
    tape.backward(loss)

Outside a tape every op is a plain numpy computation, which is what
inference and evaluation use.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..errors import NumericalError

_local = threading.local()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class GradTape:
    """Ordered log of executed ops; ``backward`` replays it in reverse."""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> GradTape:
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        self.records.append(_Record(out, inputs, backward))

    def backward(self, out: Tensor, grad: np.ndarray | None = None) -> None:
        """Accumulate d<out, grad>/d(input) into ``.grad`` of every tracked tensor.

        ``grad`` defaults to ones, i.e. plain d(out)/d(input) for a scalar.
        """
        seed = np.ones_like(out.data) if grad is None else np.asarray(grad, dtype=np.float64)
        if seed.shape != out.shape:
            raise ValueError(f"seed gradient shape {seed.shape} != output shape {out.shape}")
        _accumulate(out, seed)
        for rec in reversed(self.records):
            g = rec.out.grad
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is not None and inp.requires_grad:
                    _accumulate(inp, gi)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    t.grad = g.copy() if t.grad is None else t.grad + g


def _tape_stack() -> list[GradTape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> GradTape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def make_output(data: np.ndarray, inputs: tuple[Tensor, ...], backward, op: str) -> Tensor:
    """Wrap an op result, check finiteness, and record it if any input is tracked."""
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite values produced by {op}")
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward)
    return out
