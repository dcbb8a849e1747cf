"""Convolutional subnetworks used inside couplings and conditioners."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Parameter


class Conv2d:
    def __init__(self, in_channels, out_channels, kernel_size, rng=None, zero=False, name="conv"):
        if kernel_size not in (1, 3):
            raise ValueError("kernel size must be 1 or 3")
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        if zero or rng is None:
            w = np.zeros(shape)
        else:
            fan_in = in_channels * kernel_size * kernel_size
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        self.weight = Parameter(w, f"{name}.weight")
        self.bias = Parameter(np.zeros(out_channels), f"{name}.bias")

    def parameters(self):
        return [self.weight, self.bias]

    def __call__(self, x, channels_last=False):
        dtype = x.dtype
        conv = T.conv2d_nhwc if channels_last else T.conv2d
        return conv(x, self.weight.tensor(dtype), self.bias.tensor(dtype))


class DenseBlock:
    """DenseNet-style stack without normalization.

    Each layer is ``Conv1x1 -> ReLU -> Conv3x3 -> ReLU`` and its output is
    concatenated onto the running feature map.  A trailing 1x1 projection
    (zero-initialized, so the block starts out emitting its bias) maps the
    ``in + depth * growth`` features to ``out_channels``.
    """

    def __init__(self, in_channels, out_channels, depth=4, channels=64, growth=None,
                 rng=None, name="net"):
        if depth < 1:
            raise ValueError("depth must be >= 1")
        growth = channels if growth is None else growth
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.layers = []
        c = in_channels
        for i in range(depth):
            self.layers.append((
                Conv2d(c, channels, 1, rng, name=f"{name}.{i}.a"),
                Conv2d(channels, growth, 3, rng, name=f"{name}.{i}.b"),
            ))
            c += growth
        self.project = Conv2d(c, out_channels, 1, zero=True, name=f"{name}.out")

    def parameters(self):
        ps = []
        for a, b in self.layers:
            ps += a.parameters() + b.parameters()
        return ps + self.project.parameters()

    def __call__(self, x):
        """Apply to an (N, C, H, W) or (C, H, W) tensor."""
        squeeze = x.data.ndim == 3
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
        h = T.transpose(x, (0, 2, 3, 1))
        for a, b in self.layers:
            y = T.relu(b(T.relu(a(h, True)), True))
            h = T.concat([h, y], axis=3)
        out = T.transpose(self.project(h, True), (0, 3, 1, 2))
        return T.reshape(out, out.shape[1:]) if squeeze else out


def dense_block(x, depth, growth, out_channels, channels=None, rng=None):
    """One-shot helper: build a fresh block for `x` and apply it."""
    block = DenseBlock(x.shape[-3], out_channels, depth, channels or growth, growth, rng)
    return block(x)
