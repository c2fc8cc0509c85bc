"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a contiguous numpy array. Running a computation inside a
Tape records every produced node in creation order (which is a topological
order), and Tape.backward replays the tape in reverse, visiting each node
once. Tapes are thread-confined; computations outside any tape run as pure
forward passes.
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = ["Tensor", "Tape", "EngineError", "ShapeError", "NonFiniteError", "set_finite_checks"]


class EngineError(Exception):
    pass


class ShapeError(EngineError):
    pass


class NonFiniteError(EngineError):
    pass


_local = threading.local()
_finite_checks = False


def set_finite_checks(enabled: bool) -> None:
    """Toggle per-op detection of non-finite forward outputs."""
    global _finite_checks
    _finite_checks = bool(enabled)


def finite_checks_enabled() -> bool:
    return _finite_checks


def current_tape() -> "Tape | None":
    return getattr(_local, "tape", None)


class Tensor:
    """Value-semantic dense array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._backward = None
        self._parents: tuple[Tensor, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # Arithmetic sugar is attached by the ops module to avoid an import cycle.


class Tape:
    """Records produced tensors in creation order for one backward pass."""

    def __init__(self):
        self._nodes: list[Tensor] = []
        self._prev = None

    def __enter__(self) -> "Tape":
        self._prev = current_tape()
        _local.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _local.tape = self._prev
        self._prev = None

    def record(self, node: Tensor) -> None:
        self._nodes.append(node)

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss)=1 and propagate through the tape in reverse.

        Gradients accumulate into every recorded node and reachable leaf with
        requires_grad set; nodes that do not contribute to `loss` keep a None
        grad and are skipped.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            if node.grad is None or node._backward is None:
                continue
            node._backward(node.grad)
