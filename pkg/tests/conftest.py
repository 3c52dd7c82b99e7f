"""Shared test helpers: central-difference gradients and comparison utilities."""

from __future__ import annotations

import numpy as np
import pytest

from efficientmil.numeric import Tape, Tensor

FD_H = 1e-5


def fd_gradient(fn, tensor: Tensor, h: float = FD_H) -> np.ndarray:
    """Central finite differences of scalar-valued ``fn`` w.r.t. one tensor.

    ``fn`` must re-run the full forward pass from current tensor contents and
    return a python float. Stays independent of any tape machinery.
    """
    flat = tensor.data.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn()
        flat[i] = orig - h
        down = fn()
        flat[i] = orig
        grad[i] = (up - down) / (2.0 * h)
    return grad.reshape(tensor.data.shape)


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst elementwise error, relative where gradients are large."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom))


def check_op_gradients(build, tensors: list[Tensor], tol: float = 1e-4,
                       h: float = FD_H) -> float:
    """Gradcheck a tape op. ``build`` runs the op on a fresh tape and returns
    the scalar loss Tensor; gradients of every tensor in ``tensors`` are
    compared against central differences."""
    tape = Tape()
    loss = build(tape)
    for t in tensors:
        t.grad[...] = 0.0
    tape.backward(loss)
    worst = 0.0
    for t in tensors:
        analytic = t.grad.copy()
        numeric = fd_gradient(lambda: float(build(None).data), t, h)
        worst = max(worst, rel_err(analytic, numeric))
    assert worst < tol, f"gradient mismatch: worst rel err {worst:.3e} >= {tol}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
