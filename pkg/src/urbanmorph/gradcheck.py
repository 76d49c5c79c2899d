"""Independent verification of recorded gradients by central differences."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, backward, no_grad


def finite_difference_grad(f, x: Tensor, eps: float) -> np.ndarray:
    """Central-difference gradient of scalar f at x, one component at a time."""
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(x).data)
            flat[i] = orig - eps
            lo = float(f(x).data)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative gap between recorded and finite-difference gradients.

    f maps the leaf tensor x to a scalar Tensor.  Returns
    max_i |analytic_i - numeric_i| / max(1, |analytic_i|).  Raises if the
    forward value is non-finite or eps is outside [1e-7, 1e-3].
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"grad_check: eps {eps} outside [1e-7, 1e-3]")
    x.requires_grad = True
    x.zero_grad()
    y = f(x)
    if y.size != 1 or not np.isfinite(y.data).all():
        raise ValueError("grad_check: f must produce a finite scalar")
    backward(y)
    analytic = x.grad.copy()
    numeric = finite_difference_grad(f, x, eps)
    gap = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(gap.max())
