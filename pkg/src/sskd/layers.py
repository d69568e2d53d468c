"""Stateful layer and block wrappers around the functional ops.

Layers own their Parameters under full dotted names fixed at construction,
so a model's parameter names never change when its stage partition does.
Weights use fan-in-scaled normal initialization; batch-norm scale/shift
start at ones/zeros.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Parameter, Tensor


class Conv:
    def __init__(self, prefix, c_in, c_out, kernel, stride, padding, rng, bias=False):
        self.stride = stride
        self.padding = padding
        std = 1.0 / np.sqrt(c_in * kernel * kernel)
        w = rng.normal(0.0, std, size=(c_out, c_in, kernel, kernel)).astype(np.float32)
        self.weight = Parameter(f"{prefix}.weight", Tensor(w))
        self.bias = None
        if bias:
            self.bias = Parameter(f"{prefix}.bias", Tensor(np.zeros(c_out, dtype=np.float32)))

    def forward(self, x):
        b = self.bias.value if self.bias is not None else None
        return ops.conv2d(x, self.weight.value, b, stride=self.stride, padding=self.padding)

    def params(self):
        return [self.weight] if self.bias is None else [self.weight, self.bias]


class BatchNorm:
    """Per-channel batch norm; ``training`` selects batch vs running stats."""

    def __init__(self, prefix, channels, momentum=0.1, eps=1e-5):
        self.scale = Parameter(f"{prefix}.scale", Tensor(np.ones(channels, dtype=np.float32)))
        self.shift = Parameter(f"{prefix}.shift", Tensor(np.zeros(channels, dtype=np.float32)))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.momentum = momentum
        self.eps = eps
        self.training = True
        self._prefix = prefix

    def forward(self, x):
        return ops.batch_norm2d(
            x,
            self.scale.value,
            self.shift.value,
            self.running_mean,
            self.running_var,
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )

    def params(self):
        return [self.scale, self.shift]

    def buffers(self):
        return [
            (f"{self._prefix}.running_mean", self.running_mean),
            (f"{self._prefix}.running_var", self.running_var),
        ]


class Linear:
    def __init__(self, prefix, d_in, d_out, rng, bias=True):
        std = 1.0 / np.sqrt(d_in)
        w = rng.normal(0.0, std, size=(d_out, d_in)).astype(np.float32)
        self.weight = Parameter(f"{prefix}.weight", Tensor(w))
        self.bias = None
        if bias:
            self.bias = Parameter(f"{prefix}.bias", Tensor(np.zeros(d_out, dtype=np.float32)))
        self._shape = (d_out, d_in)

    def forward(self, x):
        b = self.bias.value if self.bias is not None else None
        return ops.linear(x, self.weight.value, b)

    def reinit(self, rng):
        """Overwrite weights in place with a fresh fan-in-scaled draw."""
        d_out, d_in = self._shape
        std = 1.0 / np.sqrt(d_in)
        self.weight.value.data[...] = rng.normal(0.0, std, size=(d_out, d_in)).astype(np.float32)
        if self.bias is not None:
            self.bias.value.data[...] = 0.0

    def params(self):
        return [self.weight] if self.bias is None else [self.weight, self.bias]


# ---------------------------------------------------------------------------
# backbone units
#
# Downsampling uses even kernels (4x4 stride-2 pad-1 main path, 2x2
# stride-2 projection, 2x2 pooling) so every spatial extent divides
# exactly; odd stride-2 kernels would leave fractional extents, which
# conv2d rejects.


class Stem:
    """First convolution (+ pooling for large inputs); always part of stage 1."""

    def __init__(self, prefix, c_in, width, rng, downsample):
        self.downsample = downsample
        if downsample:
            self.conv = Conv(f"{prefix}.conv", c_in, width, kernel=6, stride=2, padding=2, rng=rng)
        else:
            self.conv = Conv(f"{prefix}.conv", c_in, width, kernel=3, stride=1, padding=1, rng=rng)
        self.bn = BatchNorm(f"{prefix}.bn", width)
        self.out_channels = width

    def forward(self, x):
        out = ops.relu(self.bn.forward(self.conv.forward(x)))
        if self.downsample:
            out = ops.max_pool2d(out, kernel=2, stride=2)
        return out

    def spatial_factor(self):
        return 4 if self.downsample else 1

    def params(self):
        return self.conv.params() + self.bn.params()

    def bn_layers(self):
        return [self.bn]

    def buffers(self):
        return self.bn.buffers()


class PlainBlock:
    """conv-bn-relu; stride-2 variant uses a 4x4 kernel."""

    def __init__(self, prefix, c_in, c_out, stride, rng):
        kernel = 4 if stride == 2 else 3
        self.conv = Conv(f"{prefix}.conv", c_in, c_out, kernel, stride, padding=1, rng=rng)
        self.bn = BatchNorm(f"{prefix}.bn", c_out)
        self.stride = stride
        self.out_channels = c_out

    def forward(self, x):
        return ops.relu(self.bn.forward(self.conv.forward(x)))

    def spatial_factor(self):
        return self.stride

    def params(self):
        return self.conv.params() + self.bn.params()

    def bn_layers(self):
        return [self.bn]

    def buffers(self):
        return self.bn.buffers()


class ResidualBlock:
    """Two 3x3-equivalent convs with identity or projected shortcut."""

    def __init__(self, prefix, c_in, c_out, stride, rng):
        k1 = 4 if stride == 2 else 3
        self.conv1 = Conv(f"{prefix}.conv1", c_in, c_out, k1, stride, padding=1, rng=rng)
        self.bn1 = BatchNorm(f"{prefix}.bn1", c_out)
        self.conv2 = Conv(f"{prefix}.conv2", c_out, c_out, 3, 1, padding=1, rng=rng)
        self.bn2 = BatchNorm(f"{prefix}.bn2", c_out)
        self.proj = None
        self.proj_bn = None
        if stride != 1 or c_in != c_out:
            pk = 2 if stride == 2 else 1
            self.proj = Conv(f"{prefix}.proj", c_in, c_out, pk, stride, padding=0, rng=rng)
            self.proj_bn = BatchNorm(f"{prefix}.proj_bn", c_out)
        self.stride = stride
        self.out_channels = c_out

    def forward(self, x):
        out = ops.relu(self.bn1.forward(self.conv1.forward(x)))
        out = self.bn2.forward(self.conv2.forward(out))
        short = x if self.proj is None else self.proj_bn.forward(self.proj.forward(x))
        return ops.relu(ops.add(out, short))

    def spatial_factor(self):
        return self.stride

    def params(self):
        out = self.conv1.params() + self.bn1.params() + self.conv2.params() + self.bn2.params()
        if self.proj is not None:
            out += self.proj.params() + self.proj_bn.params()
        return out

    def bn_layers(self):
        bns = [self.bn1, self.bn2]
        if self.proj_bn is not None:
            bns.append(self.proj_bn)
        return bns

    def buffers(self):
        out = self.bn1.buffers() + self.bn2.buffers()
        if self.proj_bn is not None:
            out += self.proj_bn.buffers()
        return out


class Head:
    """Task head: global average pool followed by one fully-connected layer."""

    def __init__(self, prefix, channels, num_classes, rng):
        self.fc = Linear(f"{prefix}.fc", channels, num_classes, rng)

    def forward(self, feature):
        return self.fc.forward(ops.global_avg_pool(feature))

    def reinit(self, rng):
        self.fc.reinit(rng)

    def params(self):
        return self.fc.params()

    def bn_layers(self):
        return []

    def buffers(self):
        return []
