"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def finite_diff_check(f, point, h=1e-4):
    """Compare the reverse-mode gradient of scalar ``f`` at ``point`` against
    central differences and return the worst relative error.

    The relative error per coordinate uses max(|analytic|, |numeric|, 1e-8)
    as denominator. Gradient checks are meaningful only in double precision.
    """
    base = point.data if isinstance(point, Tensor) else np.asarray(point)
    base = np.array(base, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    out = f(x)
    if out.data.size != 1:
        raise ValueError("finite_diff_check requires a scalar-valued function")
    out.backward()
    analytic = x.grad if x.grad is not None else np.zeros_like(base)
    analytic = analytic.ravel()

    numeric = np.zeros(base.size, dtype=np.float64)
    flat = base.ravel()
    for i in range(base.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(base.copy())).data)
        flat[i] = orig - h
        fm = float(f(Tensor(base.copy())).data)
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
