"""Light parameter-container layer on top of the tensor ops."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


class Module:
    """Container whose attributes are scanned for parameters.

    Attribute insertion order fixes the parameter order, which makes
    checkpoint files deterministic.
    """

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            yield from _walk(value, prefix + name)

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix=""):
        """Non-trainable arrays that are still model state (e.g. frozen
        permutations), persisted alongside parameters."""
        for name, value in vars(self).items():
            yield from _walk_buffers(value, prefix + name)


def _walk(value, path):
    if isinstance(value, Parameter):
        yield path, value
    elif isinstance(value, Module):
        yield from value.named_parameters(path + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{path}.{i}")


def _walk_buffers(value, path):
    if isinstance(value, np.ndarray):
        yield path, value
    elif isinstance(value, Module):
        yield from value.named_buffers(path + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk_buffers(item, f"{path}.{i}")


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 *, rng=None, weight_scale=0.05):
        if rng is None or weight_scale == 0.0:
            w = np.zeros((out_channels, in_channels, kernel_size, kernel_size))
        else:
            w = rng.normal(0.0, weight_scale,
                           (out_channels, in_channels, kernel_size, kernel_size))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_channels))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Dense(Module):
    def __init__(self, in_features, out_features, *, rng=None, weight_scale=0.05):
        if rng is None or weight_scale == 0.0:
            w = np.zeros((out_features, in_features))
        else:
            w = rng.normal(0.0, weight_scale, (out_features, in_features))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_features))

    def __call__(self, x: Tensor) -> Tensor:
        return T.dense(x, self.weight, self.bias)
