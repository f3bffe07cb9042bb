"""Finite-difference verification suites, shared by the CLI and the test suite.

Everything runs in float64; the analytic gradients must match central
differences to the stated relative tolerance.
"""

from __future__ import annotations

import numpy as np

from .camera import look_at_camera
from .regressor import GaussianCloud
from .renderer import render
from .tensor import engine as T
from .tensor.engine import Tensor
from .tensor.gradcheck import gradcheck, max_rel_error, numeric_grad
from .tensor.nn import Conv2d, GroupNorm


def run_tensor_gradcheck(rtol=1e-5, log=print):
    """Gradient-check every differentiable tensor op on small f64 inputs."""
    rng = np.random.default_rng(0)
    r = lambda *s: Tensor(rng.standard_normal(s), requires_grad=True)
    rp = lambda *s: Tensor(0.5 + rng.random(s), requires_grad=True)
    cases = {
        "add": (lambda a, b: T.sum_(a + b), [r(3, 4), r(3, 4)]),
        "add_broadcast": (lambda a, b: T.sum_(a + b), [r(3, 4), r(4)]),
        "sub": (lambda a, b: T.sum_(a - b), [r(3, 4), r(3, 4)]),
        "mul": (lambda a, b: T.sum_(a * b), [r(3, 4), r(3, 4)]),
        "div": (lambda a, b: T.sum_(a / b), [r(3, 4), rp(3, 4)]),
        "matmul": (lambda a, b: T.sum_(T.matmul(a, b)), [r(3, 4), r(4, 5)]),
        "pow": (lambda a: T.sum_(a ** 3.0), [r(3, 4)]),
        "relu": (lambda a: T.sum_(T.relu(a)), [rp(3, 4)]),
        "sigmoid": (lambda a: T.sum_(T.sigmoid(a)), [r(3, 4)]),
        "tanh": (lambda a: T.sum_(T.tanh(a)), [r(3, 4)]),
        "softplus": (lambda a: T.sum_(T.softplus(a)), [r(3, 4)]),
        "exp": (lambda a: T.sum_(T.exp(a)), [r(3, 4)]),
        "log": (lambda a: T.sum_(T.log(a)), [rp(3, 4)]),
        "sqrt": (lambda a: T.sum_(T.sqrt(a)), [rp(3, 4)]),
        "abs": (lambda a: T.sum_(T.abs_(a)), [rp(3, 4)]),
        "mean": (lambda a: T.sum_(T.mean(a, axis=1)), [r(3, 4)]),
        "reshape": (lambda a: T.sum_(T.reshape(a, (4, 3)) * 2.0), [r(3, 4)]),
        "transpose": (lambda a: T.sum_(T.transpose(a, (1, 0)) ** 2.0), [r(3, 4)]),
        "concat": (lambda a, b: T.sum_(T.concat([a, b], axis=1) ** 2.0), [r(3, 2), r(3, 3)]),
        "stack": (lambda a, b: T.sum_(T.stack([a, b], axis=0) ** 2.0), [r(3, 4), r(3, 4)]),
        "getitem": (lambda a: T.sum_(a[1:, :2] ** 2.0), [r(3, 4)]),
        "gather_rows": (lambda a: T.sum_(T.gather_rows(a, np.array([0, 2, 2])) ** 2.0), [r(3, 4)]),
        "pad2d": (lambda a: T.sum_(T.pad2d(a, 1) ** 2.0), [r(1, 2, 3, 3)]),
        "softmax": (lambda a: T.sum_(T.softmax(a, axis=1) ** 2.0), [r(3, 4)]),
        "clamp": (lambda a: T.sum_(T.clamp(a, lo=-0.5, hi=0.5) ** 2.0), [r(3, 4)]),
        "conv2d": (lambda x, w, b: T.sum_(T.conv2d(x, w, b, stride=1, padding=1) ** 2.0),
                   [r(1, 2, 5, 5), r(3, 2, 3, 3), r(3)]),
        "conv2d_s2": (lambda x, w: T.sum_(T.conv2d(x, w, stride=2, padding=2) ** 2.0),
                      [r(1, 2, 8, 8), r(3, 2, 5, 5)]),
        "bilinear_upsample": (lambda x: T.sum_(T.bilinear_upsample(x, 2) ** 2.0),
                              [r(1, 2, 3, 4)]),
        "correlation_volume": (lambda a, b: T.sum_(T.correlation_volume(a, b) ** 2.0),
                               [r(1, 4, 3, 5), r(1, 4, 3, 5)]),
        "corr_lookup": (lambda v, d: T.sum_(T.corr_lookup(v, d, radius=2, level=0) ** 2.0),
                        [r(1, 4, 6, 6), rp(1, 1, 4, 6)]),
    }
    worst = 0.0
    for name, (fn, inputs) in cases.items():
        err = gradcheck(fn, inputs, rtol=rtol)
        worst = max(worst, err)
        log(f"gradcheck {name}: rel err {err:.3e}")
    return worst


def _random_cloud(rng, n, dtype=np.float64):
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianCloud(
        Tensor((rng.standard_normal((n, 3)) * 0.3).astype(dtype), requires_grad=True),
        Tensor(rng.random((n, 3)).astype(dtype), requires_grad=True),
        Tensor(q.astype(dtype), requires_grad=True),
        Tensor((0.05 + 0.1 * rng.random((n, 3))).astype(dtype), requires_grad=True),
        Tensor((0.3 + 0.6 * rng.random(n)).astype(dtype), requires_grad=True),
        np.zeros((n, 3), dtype=np.int64),
    )


def run_renderer_gradcheck(n_gaussians=12, size=32, rtol=1e-3, eps=1e-5, log=print):
    """Central-difference check of the full rasterizer on a small scene."""
    assert n_gaussians <= 16 and size <= 32
    rng = np.random.default_rng(0)
    K = np.array([[40.0, 0, size / 2], [0, 40.0, size / 2], [0, 0, 1.0]])
    cam = look_at_camera(np.array([0.0, 0.0, -2.0]), np.zeros(3), K, size, size)
    cloud = _random_cloud(rng, n_gaussians)
    weights = rng.random((size, size, 3))

    def loss_value():
        with T.no_grad():
            out = render(cloud, cam, background=(0.1, 0.2, 0.3))
            return float(np.sum(out.image.data * weights))

    out = render(cloud, cam, background=(0.1, 0.2, 0.3))
    T.backward(T.sum_(out.image * Tensor(weights)))
    worst = 0.0
    fields = [("position", cloud.position), ("rotation", cloud.rotation),
              ("scale", cloud.scale), ("color", cloud.color), ("opacity", cloud.opacity)]
    for name, tensor in fields:
        analytic = tensor.grad.reshape(-1)
        flat = tensor.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = loss_value()
            flat[i] = old - eps
            dn = loss_value()
            flat[i] = old
            num[i] = (up - dn) / (2 * eps)
        err = max_rel_error(analytic, num)
        worst = max(worst, err)
        log(f"renderer gradcheck {name}: rel err {err:.3e}")
        if err > rtol:
            raise AssertionError(f"renderer grad {name}: rel err {err:.3e} > {rtol}")
    return worst


def run_all(log=print):
    worst_t = run_tensor_gradcheck(log=log)
    worst_r = run_renderer_gradcheck(log=log)
    log(f"tensor ops worst rel err {worst_t:.3e} (tol 1e-5); "
        f"rasterizer worst rel err {worst_r:.3e} (tol 1e-3)")
    return worst_t, worst_r
