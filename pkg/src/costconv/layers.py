"""Minimal stateful layer framework on top of :mod:`costconv.tensor`.

Each :class:`Module` caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into ``Param.grad`` during ``backward``.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T


class Param:
    """A tensor plus its gradient.

    ``role`` names what the tensor is (``"conv_weight"``, ``"bn_gamma"``,
    ``"coeff_logits"``...). ``decay`` marks tensors that receive weight decay;
    ``trainable=False`` marks buffers such as BN running statistics.
    """

    __slots__ = ("data", "grad", "role", "decay", "trainable")

    def __init__(self, data, role, decay=False, trainable=True):
        self.data = data
        self.grad = np.zeros_like(data) if trainable else None
        self.role = role
        self.decay = decay
        self.trainable = trainable

    def __repr__(self):
        return f"Param({self.role}, shape={self.data.shape})"


class Module:
    def named_tensors(self, prefix=""):
        """Yield ``(qualified_name, Param)`` for every parameter and buffer."""
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Param):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_tensors(name + ".")
            elif isinstance(val, list) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    yield from m.named_tensors(f"{name}.{i}.")

    def named_parameters(self, prefix=""):
        return [(n, p) for n, p in self.named_tensors(prefix) if p.trainable]

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, list) and val and isinstance(val[0], Module):
                for m in val:
                    yield from m.modules()

    def zero_grad(self):
        for p in self.parameters():
            p.grad[...] = 0.0

    def num_params(self):
        return sum(p.data.size for p in self.parameters())

    def __call__(self, x, train=False):
        return self.forward(x, train)


def kaiming(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv3d(Module):
    """Bias-free 3D convolution (channels-last)."""

    def __init__(self, c_in, c_out, ksize=(1, 1, 1), stride=(1, 1, 1), rng=None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.ksize = T._triple(ksize)
        self.stride = T._triple(stride)
        fan_in = c_in * int(np.prod(self.ksize))
        self.weight = Param(kaiming(rng, (c_out, c_in) + self.ksize, fan_in, dtype), "conv_weight", decay=True)
        self.out_shape = None
        self.need_input_grad = True

    def forward(self, x, train=False):
        y, cols = T.conv3d(x, self.weight.data, self.stride, "same", return_cols=True)
        self._cache = (x, cols)
        self.out_shape = y.shape
        return y

    def backward(self, dy):
        x, cols = self._cache
        dx, dw = T.conv3d_backward(dy, x, self.weight.data, self.stride, "same", cols=cols,
                                   need_dx=self.need_input_grad)
        self.weight.grad += dw
        return dx


class BatchNorm(Module):
    def __init__(self, c, zero_gamma=False, dtype=np.float64):
        self.gamma = Param((np.zeros if zero_gamma else np.ones)(c, dtype=dtype), "bn_gamma")
        self.beta = Param(np.zeros(c, dtype=dtype), "bn_beta")
        self.running_mean = Param(np.zeros(c, dtype=dtype), "bn_running_mean", trainable=False)
        self.running_var = Param(np.ones(c, dtype=dtype), "bn_running_var", trainable=False)

    def forward(self, x, train=False):
        y, cache = T.batch_norm(x, self.gamma.data, self.beta.data,
                                self.running_mean.data, self.running_var.data, train)
        self._cache = (x, cache)
        return y

    def backward(self, dy):
        x, cache = self._cache
        if cache is None:
            scale = self.gamma.data / np.sqrt(self.running_var.data + T.BN_EPS)
            xhat = (x - self.running_mean.data) / np.sqrt(self.running_var.data + T.BN_EPS)
            axes = tuple(range(dy.ndim - 1))
            self.gamma.grad += (dy * xhat).sum(axis=axes)
            self.beta.grad += dy.sum(axis=axes)
            return dy * scale
        dx, dg, db = T.batch_norm_backward(dy, cache)
        self.gamma.grad += dg
        self.beta.grad += db
        return dx


class ReLU(Module):
    def forward(self, x, train=False):
        self._y = T.relu(x)
        return self._y

    def backward(self, dy):
        return T.relu_backward(dy, self._y)


class MaxPool3d(Module):
    def __init__(self, window, stride, padding="same"):
        self.window, self.stride, self.padding = T._triple(window), T._triple(stride), padding

    def forward(self, x, train=False):
        y, idx = T.max_pool(x, self.window, self.stride, self.padding, return_index=True)
        self._cache = (x.shape, idx)
        return y

    def backward(self, dy):
        shape, idx = self._cache
        return T.max_pool_backward(dy, shape, idx, self.window, self.stride, self.padding)


class GlobalAvgPool(Module):
    def forward(self, x, train=False):
        self._shape = x.shape
        return T.global_avg_pool_thw(x)

    def backward(self, dy):
        return T.global_avg_pool_thw_backward(dy, self._shape)


class Linear(Module):
    def __init__(self, d_in, d_out, rng=None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Param((rng.standard_normal((d_in, d_out)) / np.sqrt(d_in)).astype(dtype),
                            "linear_weight", decay=True)
        self.bias = Param(np.zeros(d_out, dtype=dtype), "linear_bias")

    def forward(self, x, train=False):
        self._x = x
        return T.linear(x, self.weight.data, self.bias.data)

    def backward(self, dy):
        dx, dw, db = T.linear_backward(dy, self._x, self.weight.data)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy
