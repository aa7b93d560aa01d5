"""Central finite-difference oracle used to validate analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from duodet.tensor import Tensor


def numeric_grad(fn: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """d fn / d arr by central differences, perturbing one element at a time."""
    grad = np.zeros_like(arr)
    flat = arr.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = fn()
        flat[i] = keep - h
        fm = fn()
        flat[i] = keep
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_grads(build: Callable[[], Tensor], inputs: list[Tensor],
                rtol: float = 1e-4, h: float = 1e-5) -> float:
    """Compare backprop against finite differences for every input tensor.

    ``build`` must recompute the scalar loss from the inputs' current
    ``.data`` each call.  Returns the worst relative error seen.
    """
    for t in inputs:
        t.grad = None
    loss = build()
    loss.backward()
    worst = 0.0
    for t in inputs:
        assert t.grad is not None, "input received no gradient"
        analytic = t.grad.copy()
        numeric = numeric_grad(lambda: build().item(), t.data, h=h)
        err = max_rel_err(analytic, numeric)
        worst = max(worst, err)
        assert err < rtol, f"gradient mismatch: rel err {err:.3e} >= {rtol}"
    return worst
