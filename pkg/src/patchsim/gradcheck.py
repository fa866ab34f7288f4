"""Central finite-difference gradient oracle.

Used by the test suite to validate analytic gradients: the oracle only ever
calls the forward path, so it stays independent of the backward code it
checks.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor


def finite_difference(
    f: Callable[[], float], arrays: Sequence[np.ndarray], step: float = 1e-5
) -> list[np.ndarray]:
    """Central differences of f with respect to every element of arrays.

    ``f`` must read the arrays in place (they are perturbed and restored).
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = f()
            flat[i] = orig - step
            f_minus = f()
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * step)
        grads.append(g)
    return grads


def grad_mismatch(
    analytic: np.ndarray,
    numeric: np.ndarray,
    rel_tol: float = 1e-4,
    abs_floor: float = 1e-6,
) -> float:
    """Worst violation ratio (<= 1 means within tolerance)."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    # relative bound with an absolute floor for near-zero gradients
    bound = np.maximum(rel_tol * np.maximum(np.abs(a), np.abs(n)), abs_floor)
    err = np.abs(a - n)
    return float(np.max(err / bound)) if err.size else 0.0


def check_tensor_grads(
    loss_fn: Callable[[], "Tensor"],
    params: dict[str, Tensor],
    step: float = 1e-5,
    rel_tol: float = 1e-4,
    abs_floor: float = 1e-6,
) -> dict[str, float]:
    """Compare taped gradients against the finite-difference oracle.

    loss_fn runs a fresh forward pass (used both for taping and for the
    oracle's perturbed evaluations). Returns per-parameter worst ratios.
    """
    from .autodiff import Tape

    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}

    def forward() -> float:
        return float(loss_fn().data)

    ratios = {}
    for name, p in params.items():
        numeric = finite_difference(forward, [p.data], step=step)[0]
        ratios[name] = grad_mismatch(analytic[name], numeric, rel_tol, abs_floor)
    return ratios
