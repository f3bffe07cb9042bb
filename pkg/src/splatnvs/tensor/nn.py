"""Layers and parameter containers built on the autodiff engine."""

from __future__ import annotations

import numpy as np

from . import engine as T
from .engine import Tensor


class Parameter(Tensor):
    __slots__ = ("name", "exp_avg", "exp_avg_sq")

    def __init__(self, data, name=""):
        super().__init__(np.asarray(data, dtype=np.float32), requires_grad=True)
        self.name = name
        self.exp_avg = np.zeros_like(self.data)
        self.exp_avg_sq = np.zeros_like(self.data)


class Module:
    def modules(self):
        for v in vars(self).values():
            if isinstance(v, Module):
                yield v
            elif isinstance(v, (list, tuple)):
                for m in v:
                    if isinstance(m, Module):
                        yield m

    def named_parameters(self, prefix=""):
        for k, v in vars(self).items():
            if isinstance(v, Parameter):
                yield (f"{prefix}{k}", v)
            elif isinstance(v, Module):
                yield from v.named_parameters(f"{prefix}{k}.")
            elif isinstance(v, (list, tuple)):
                for i, m in enumerate(v):
                    if isinstance(m, Module):
                        yield from m.named_parameters(f"{prefix}{k}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix=""):
        """Bake qualified names onto parameters; names must be unique."""
        names = set()
        for name, p in self.named_parameters(prefix):
            if name in names:
                raise ValueError(f"duplicate parameter name {name}")
            names.add(name)
            p.name = name

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        for name, p in self.named_parameters():
            if name not in state:
                raise KeyError(f"missing parameter {name} in state dict")
            arr = np.asarray(state[name], dtype=np.float32)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.copy()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, cin, cout, k, stride=1, padding=0, bias=True, rng=None):
        rng = rng or np.random.default_rng(0)
        fan_in = cin * k * k
        bound = 1.0 / np.sqrt(fan_in)
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(rng.uniform(-bound, bound, (cout, cin, k, k)))
        self.bias = Parameter(rng.uniform(-bound, bound, (cout,))) if bias else None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class GroupNorm(Module):
    def __init__(self, groups, channels, eps=1e-5):
        if channels % groups:
            raise ValueError(f"channels {channels} not divisible by groups {groups}")
        self.groups = groups
        self.eps = eps
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))

    def forward(self, x):
        n, c, h, w = x.shape
        g = self.groups
        xg = T.reshape(x, (n, g, c // g * h * w))
        m = T.mean(xg, axis=2, keepdims=True)
        xc = xg - m
        v = T.mean(xc * xc, axis=2, keepdims=True)
        y = xc / T.sqrt(v + self.eps)
        y = T.reshape(y, (n, c, h, w))
        return y * T.reshape(self.weight, (1, c, 1, 1)) + T.reshape(self.bias, (1, c, 1, 1))


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class ReLU(Module):
    def forward(self, x):
        return T.relu(x)


class ResidualBlock(Module):
    """Two 3x3 convs with group norm; optional strided downsample + channel change."""

    def __init__(self, cin, cout, stride=1, rng=None):
        self.conv1 = Conv2d(cin, cout, 3, stride=stride, padding=1, rng=rng)
        self.norm1 = GroupNorm(_gn_groups(cout), cout)
        self.conv2 = Conv2d(cout, cout, 3, padding=1, rng=rng)
        self.norm2 = GroupNorm(_gn_groups(cout), cout)
        if stride != 1 or cin != cout:
            self.skip = Conv2d(cin, cout, 1, stride=stride, rng=rng)
        else:
            self.skip = None

    def forward(self, x):
        y = T.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        s = self.skip(x) if self.skip is not None else x
        return T.relu(y + s)


def _gn_groups(channels):
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1
