"""Differentiable layers with explicit forward and backward passes.

``forward(x, train=True, record=True)`` caches what ``backward`` needs; with
``record=False`` the pass leaves caches and running statistics alone, which is
what candidate sampling and diagnostics use. ``backward`` adds (never assigns)
parameter gradients into each :class:`~lamina.kaku.Parameter`'s buffer.
"""

from __future__ import annotations

import copy

import numpy as np

from lamina.errors import OrderingError, ShapeError
from lamina.kaku import Parameter
from lamina.numerics import Rng, as_matrix


class Layer:
    def forward(self, x, train=True, record=True):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def infer(self, x):
        return self.forward(x, train=False, record=False)

    def parameters(self):
        return []

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def clone(self):
        return copy.deepcopy(self)

    def _need_cache(self, attr):
        value = getattr(self, attr, None)
        if value is None:
            raise OrderingError(f"{type(self).__name__}.backward called before forward")
        return value

    @staticmethod
    def _check_grad(grad, out_shape, name):
        grad = as_matrix(grad, "upstream gradient")
        if grad.shape != out_shape:
            raise ShapeError(f"{name}: upstream gradient {grad.shape} != output {out_shape}")
        return grad


class Linear(Layer):
    """``y = x W^T + b`` with ``W`` of shape ``[out, in]``."""

    def __init__(self, in_features, out_features, rng=None, bias=True):
        self.in_features = in_features
        self.out_features = out_features
        rng = rng if rng is not None else Rng(0)
        bound = np.sqrt(6.0 / in_features)
        self.weight = Parameter(rng.uniform(-bound, bound, (out_features, in_features)), "weight")
        self.bias = Parameter(np.zeros((1, out_features)), "bias") if bias else None
        self._x = None

    def forward(self, x, train=True, record=True):
        x = as_matrix(x, "input")
        if x.shape[1] != self.in_features:
            raise ShapeError(f"Linear expects {self.in_features} input features, got {x.shape}")
        y = x @ self.weight.value.T
        if self.bias is not None:
            y = y + self.bias.value
        if record:
            self._x = x
        return y

    def backward(self, grad):
        x = self._need_cache("_x")
        grad = self._check_grad(grad, (x.shape[0], self.out_features), "Linear")
        self.weight.grad += grad.T @ x
        if self.bias is not None:
            self.bias.grad += grad.sum(axis=0, keepdims=True)
        return grad @ self.weight.value

    def parameters(self):
        return [self.weight] if self.bias is None else [self.weight, self.bias]


class ReLU(Layer):
    def __init__(self):
        self._mask = None

    def forward(self, x, train=True, record=True):
        x = as_matrix(x, "input")
        mask = x > 0
        if record:
            self._mask = mask
        return np.where(mask, x, 0.0)

    def backward(self, grad):
        mask = self._need_cache("_mask")
        grad = self._check_grad(grad, mask.shape, "ReLU")
        return grad * mask

    def derivative(self):
        return self._need_cache("_mask").astype(np.float64)


class Dropout(Layer):
    """Inverted dropout: kept units are scaled by ``1 / (1 - p)``."""

    def __init__(self, p=0.5, rng=None):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self.rng = rng if rng is not None else Rng(0)
        self._mask = None

    def forward(self, x, train=True, record=True):
        x = as_matrix(x, "input")
        if not train or self.p == 0.0:
            mask = np.ones_like(x)
        else:
            mask = (self.rng.random(x.shape) >= self.p) / (1.0 - self.p)
        if record:
            self._mask = mask
        return x * mask

    def backward(self, grad):
        mask = self._need_cache("_mask")
        grad = self._check_grad(grad, mask.shape, "Dropout")
        return grad * mask


class BatchNorm1d(Layer):
    """Per-feature batch normalization.

    Training mode normalizes with the biased batch variance; the running
    variance is updated with the unbiased estimate. Evaluation mode uses the
    running statistics only.
    """

    def __init__(self, num_features, momentum=0.1, eps=1e-5):
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones((1, num_features)), "gamma")
        self.beta = Parameter(np.zeros((1, num_features)), "beta")
        self.running_mean = np.zeros((1, num_features))
        self.running_var = np.ones((1, num_features))
        self._cache = None

    def forward(self, x, train=True, record=True):
        x = as_matrix(x, "input")
        if x.shape[1] != self.num_features:
            raise ShapeError(f"BatchNorm1d expects {self.num_features} features, got {x.shape}")
        if train:
            mean = x.mean(axis=0, keepdims=True)
            var = x.var(axis=0, keepdims=True)
            if record:
                n = x.shape[0]
                unbiased = var * n / (n - 1) if n > 1 else var
                m = self.momentum
                self.running_mean = (1 - m) * self.running_mean + m * mean
                self.running_var = (1 - m) * self.running_var + m * unbiased
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        x_hat = (x - mean) * inv_std
        if record:
            self._cache = (x_hat, inv_std, train)
        return self.gamma.value * x_hat + self.beta.value

    def backward(self, grad):
        x_hat, inv_std, train = self._need_cache("_cache")
        grad = self._check_grad(grad, x_hat.shape, "BatchNorm1d")
        self.gamma.grad += (grad * x_hat).sum(axis=0, keepdims=True)
        self.beta.grad += grad.sum(axis=0, keepdims=True)
        g_hat = grad * self.gamma.value
        if not train:
            return g_hat * inv_std
        return inv_std * (
            g_hat - g_hat.mean(axis=0, keepdims=True) - x_hat * (g_hat * x_hat).mean(axis=0, keepdims=True)
        )

    def parameters(self):
        return [self.gamma, self.beta]


class Sequential(Layer):
    """Layers applied in order; ``backward`` runs them in reverse.

    After ``backward``, ``output_grads[i]`` holds the gradient that arrived at
    the output of layer ``i``.
    """

    def __init__(self, *layers):
        if len(layers) == 1 and isinstance(layers[0], (list, tuple)):
            layers = tuple(layers[0])
        self.layers = list(layers)
        self.output_grads = []

    def forward(self, x, train=True, record=True):
        for layer in self.layers:
            x = layer.forward(x, train, record)
        return x

    def backward(self, grad):
        grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            grads[i] = grad
            grad = self.layers[i].backward(grad)
        self.output_grads = grads
        return grad

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def __getitem__(self, i):
        return self.layers[i]

    def __len__(self):
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)


class Identity(Layer):
    def __init__(self):
        self._shape = None

    def forward(self, x, train=True, record=True):
        x = as_matrix(x, "input")
        if record:
            self._shape = x.shape
        return x

    def backward(self, grad):
        shape = self._need_cache("_shape")
        return self._check_grad(grad, shape, "Identity")
