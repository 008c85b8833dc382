"""Finite-difference gradient checking for scalar-valued tensor functions."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tape, Tensor


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor,
               eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be scalar-valued and differentiable at ``x``. The relative
    error per element is |analytic - numeric| / max(1e-8, |analytic| + |numeric|),
    so a constant function reports exactly 0. Run in float64 for meaningful
    tolerances.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    probe = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(probe)
        if out.data.size != 1:
            raise ValueError("grad_check: f must be scalar-valued")
        tape.backward(out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)

    flat = x.data.reshape(-1).copy()
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(Tensor(flat.reshape(x.shape))).item()
        flat[i] = orig - eps
        lo = f(Tensor(flat.reshape(x.shape))).item()
        flat[i] = orig
        numeric[i] = (hi - lo) / (2 * eps)

    a = analytic.reshape(-1)
    denom = np.maximum(1e-8, np.abs(a) + np.abs(numeric))
    return float(np.max(np.abs(a - numeric) / denom))
