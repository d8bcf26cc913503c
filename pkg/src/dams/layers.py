"""Thin stateful wrappers over the kernel ops.

Each layer owns its Parameters and a cache stack so the same layer instance
can be applied several times per forward pass (e.g. a descriptor MLP shared
across pyramid branches). Backward calls must mirror forward calls in exact
reverse order; `backward` pops the most recent cache.
"""

from __future__ import annotations

import math

import numpy as np

from . import kernel
from .kernel import BatchNormState, Parameter


def uniform_init(rng, shape, fan_in):
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    def params(self):
        return []

    def zero_grads(self):
        for p in self.params():
            p.zero_grad()


class Conv1d(Layer):
    def __init__(self, cin, cout, kernel_size, padding, rng, name,
                 bias_init=None, weight_scale=1.0):
        fan_in = cin * kernel_size
        self.w = Parameter(
            weight_scale * uniform_init(rng, (cout, cin, kernel_size), fan_in),
            f"{name}.w")
        if bias_init is None:
            b = uniform_init(rng, (cout,), fan_in)
        else:
            b = np.full(cout, float(bias_init))
        self.b = Parameter(b, f"{name}.b")
        self.padding = padding
        self._caches = []

    def forward(self, x):
        out, cache = kernel.conv1d(x, self.w.value, self.b.value, self.padding)
        self._caches.append(cache)
        return out

    def backward(self, g):
        dx, dw, db = kernel.conv1d_backward(g, self._caches.pop())
        self.w.grad += dw
        self.b.grad += db
        return dx

    def params(self):
        return [self.w, self.b]


class Linear(Layer):
    def __init__(self, din, dout, rng, name, bias_init=None, weight_scale=1.0):
        # bias_init: optional constant bias. Gating MLPs that only ever see
        # nonnegative pooled descriptors use a positive constant so no hidden
        # unit starts permanently dead behind its relu. weight_scale < 1 lets
        # gate output layers start near-neutral (gate ~ 0.5, fusion ~ uniform).
        self.w = Parameter(weight_scale * uniform_init(rng, (dout, din), din),
                           f"{name}.w")
        if bias_init is None:
            b = uniform_init(rng, (dout,), din)
        else:
            b = np.full(dout, float(bias_init))
        self.b = Parameter(b, f"{name}.b")
        self._caches = []

    def forward(self, x):
        out, cache = kernel.linear(x, self.w.value, self.b.value)
        self._caches.append(cache)
        return out

    def backward(self, g):
        dx, dw, db = kernel.linear_backward(g, self._caches.pop())
        self.w.grad += dw
        self.b.grad += db
        return dx

    def params(self):
        return [self.w, self.b]


class BatchNorm1d(Layer):
    def __init__(self, channels, name, momentum=0.9, eps=1e-5):
        self.gamma = Parameter(np.ones(channels), f"{name}.gamma")
        self.beta = Parameter(np.zeros(channels), f"{name}.beta")
        self.state = BatchNormState.create(channels, momentum, eps)
        self.name = name
        self._caches = []

    def forward(self, x, train):
        out, cache = kernel.batch_norm1d(x, self.gamma.value, self.beta.value,
                                         self.state, train)
        self._caches.append(cache)
        return out

    def backward(self, g):
        dx, dgamma, dbeta = kernel.batch_norm1d_backward(g, self._caches.pop())
        self.gamma.grad += dgamma
        self.beta.grad += dbeta
        return dx

    def params(self):
        return [self.gamma, self.beta]

    def state_arrays(self):
        return {f"{self.name}.running_mean": self.state.running_mean,
                f"{self.name}.running_var": self.state.running_var}


class Relu(Layer):
    def __init__(self):
        self._caches = []

    def forward(self, x):
        out, cache = kernel.relu(x)
        self._caches.append(cache)
        return out

    def backward(self, g):
        return kernel.relu_backward(g, self._caches.pop())


class Sigmoid(Layer):
    def __init__(self):
        self._caches = []

    def forward(self, x):
        out, cache = kernel.sigmoid(x)
        self._caches.append(cache)
        return out

    def backward(self, g):
        return kernel.sigmoid_backward(g, self._caches.pop())
