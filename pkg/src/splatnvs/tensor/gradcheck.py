"""Central finite-difference gradient checking (f64 mode)."""

from __future__ import annotations

import numpy as np

from . import engine as T
from .engine import Tensor


def numeric_grad(fn, inputs, which, eps=1e-4):
    """d fn(inputs) / d inputs[which] by central differences. fn returns a scalar Tensor."""
    x = inputs[which]
    flat = x.data.reshape(-1)
    g = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        with T.no_grad():
            flat[i] = orig + eps
            hi = fn(*inputs).item()
            flat[i] = orig - eps
            lo = fn(*inputs).item()
        flat[i] = orig
        g[i] = (hi - lo) / (2 * eps)
    return g.reshape(x.data.shape)


def max_rel_error(analytic, numeric):
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)


def gradcheck(fn, inputs, eps=1e-4, rtol=1e-5):
    """Compare analytic grads of a scalar-valued fn against central differences.

    Inputs must be f64 tensors; those with requires_grad are checked.
    Returns the worst relative error observed.
    """
    for x in inputs:
        if x.dtype != np.float64:
            raise ValueError("gradcheck requires f64 inputs")
        x.grad = None
    out = fn(*inputs)
    T.backward(out)
    worst = 0.0
    for i, x in enumerate(inputs):
        if not x.requires_grad:
            continue
        num = numeric_grad(fn, inputs, i, eps)
        ana = x.grad if x.grad is not None else np.zeros_like(x.data)
        err = max_rel_error(ana, num)
        worst = max(worst, err)
        if err >= rtol:
            raise AssertionError(f"gradcheck failed on input {i}: rel err {err:.3e} >= {rtol:.0e}")
    return worst


def rand_tensor(rng, shape, scale=1.0, requires_grad=True):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=requires_grad)
