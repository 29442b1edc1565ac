"""Parameter-owning convolution layers built on the numeric core."""

from __future__ import annotations

import numpy as np

from . import numeric as nm
from .numeric.tensor import Tensor


def _uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d:
    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0,
                 rng=None, name="conv"):
        rng = rng or np.random.default_rng(0)
        fan_in = in_channels * kernel * kernel
        self.stride = stride
        self.padding = padding
        self.weight = Tensor(
            _uniform_init(rng, (out_channels, in_channels, kernel, kernel), fan_in),
            requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(_uniform_init(rng, (out_channels,), fan_in),
                           requires_grad=True, name=f"{name}.bias")

    def parameters(self):
        return [self.weight, self.bias]

    def __call__(self, x):
        out = nm.conv2d(x, self.weight, self.stride, self.padding)
        return out + nm.reshape(self.bias, (1, -1, 1, 1))


class ConvTranspose2d:
    """Kernel layout (in_channels, out_channels, k, k); k=4, stride=2,
    padding=1 doubles the spatial extent exactly."""

    def __init__(self, in_channels, out_channels, kernel, stride=2, padding=1,
                 rng=None, name="deconv"):
        rng = rng or np.random.default_rng(0)
        fan_in = in_channels * kernel * kernel
        self.stride = stride
        self.padding = padding
        self.weight = Tensor(
            _uniform_init(rng, (in_channels, out_channels, kernel, kernel), fan_in),
            requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(_uniform_init(rng, (out_channels,), fan_in),
                           requires_grad=True, name=f"{name}.bias")

    def parameters(self):
        return [self.weight, self.bias]

    def __call__(self, x):
        out = nm.conv_transpose2d(x, self.weight, self.stride, self.padding)
        return out + nm.reshape(self.bias, (1, -1, 1, 1))
