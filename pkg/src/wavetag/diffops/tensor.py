"""Dense tensors with reverse-mode gradients over a fixed op set.

This is deliberately *not* a general autodiff system: only the operators
defined in :mod:`wavetag.diffops.functional` build graph nodes, and every
operator supplies its own backward closure. Graphs are plain DAGs of
``Tensor`` nodes; ``backward()`` walks them once in reverse topological
order, so gradient accumulation order is fixed and runs are reproducible.

Training runs in float32; gradient checking switches the default dtype to
float64 via :func:`set_default_dtype`.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operator inputs whose shapes violate the op contract."""


class NumericsError(FloatingPointError):
    """NaN/Inf produced by a forward op while debug checks are enabled."""


_default_dtype: np.dtype = np.dtype(np.float32)
_grad_enabled: bool = True
_debug_checks: bool = False


def default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    """Set the dtype used for new parameters and data tensors.

    Only float32 (training) and float64 (gradient-check mode) are supported.
    """
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dt}; use float32 or float64")
    global _default_dtype
    _default_dtype = dt


@contextmanager
def using_dtype(dtype) -> Iterator[None]:
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def grad_enabled() -> bool:
    return _grad_enabled


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph construction (inference / data preparation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def debug_checks() -> bool:
    return _debug_checks


def set_debug_checks(on: bool) -> None:
    """Toggle NaN/Inf sentinels on every forward op output."""
    global _debug_checks
    _debug_checks = bool(on)


class Tensor:
    """A dense array plus an optional gradient and backward closure.

    ``data`` is always a numpy array. Leaf tensors created with
    ``requires_grad=True`` accumulate into ``grad`` during ``backward()``;
    interior nodes are created by the ops in ``functional``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            arr = arr.astype(_default_dtype)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        grad = "grad" if self.requires_grad else "no-grad"
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, {grad})"

    # -- autograd -----------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from a scalar node through the recorded graph."""
        if self.size != 1:
            raise ShapeError(f"backward() requires a scalar, got shape {self.shape}")
        order = self._toposort()
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            fn = node._backward_fn
            if fn is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, fn(node.grad)):
                if g is None:
                    continue
                if parent.grad is None:
                    parent.grad = np.ascontiguousarray(g, dtype=parent.data.dtype)
                else:
                    parent.grad += g

    def _toposort(self) -> list["Tensor"]:
        # Iterative DFS: model graphs run several hundred nodes deep, which
        # would overflow Python's recursion limit.
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return order


def make_op_output(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap an op result, attaching the backward closure when grads are live."""
    if _debug_checks and not np.all(np.isfinite(data)):
        raise NumericsError("non-finite value produced by a forward op")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._backward_fn is not None for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def parameter(data, name: str | None = None) -> Tensor:
    """A leaf tensor that accumulates gradients. Kept simple: name lives in
    the owning module's parameter dict, not on the tensor."""
    del name
    return Tensor(np.asarray(data, dtype=_default_dtype), requires_grad=True)
