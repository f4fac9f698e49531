"""Central finite-difference checking for the op set.

Checks are meant to run in float64 (``set_default_dtype(np.float64)`` or
tensors built from float64 arrays); in float32 the difference quotient is
dominated by rounding noise.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor

FD_STEP = 1e-5


def numeric_grad(
    fn: Callable[[], Tensor],
    wrt: np.ndarray,
    h: float = FD_STEP,
) -> np.ndarray:
    """Central-difference gradient of the scalar ``fn()`` w.r.t. ``wrt``.

    ``wrt`` is mutated coordinate by coordinate and restored; ``fn`` must
    re-run the forward pass reading the current contents of ``wrt``.
    """
    grad = np.zeros_like(wrt, dtype=np.float64)
    flat = wrt.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(fn().data)
        flat[i] = orig - h
        f_minus = float(fn().data)
        flat[i] = orig
        grad.reshape(-1)[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute difference normalized by the larger gradient magnitude."""
    denom = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-10)
    return float(np.max(np.abs(analytic - numeric)) / denom)


def check_gradients(
    build: Callable[[Sequence[Tensor]], Tensor],
    inputs: Sequence[np.ndarray],
    h: float = FD_STEP,
) -> list[float]:
    """Compare analytic vs numeric gradients of ``build(tensors)``.

    ``build`` receives one Tensor per input array and must return a scalar
    Tensor. Returns the relative error per input.
    """
    tensors = [Tensor(np.asarray(a, dtype=np.float64), requires_grad=True) for a in inputs]
    loss = build(tensors)
    loss.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    errors = []
    for t, a_grad in zip(tensors, analytic):
        n_grad = numeric_grad(lambda: build(tensors), t.data, h=h)
        errors.append(relative_error(a_grad, n_grad))
    return errors
