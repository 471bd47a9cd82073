"""Convolutional building blocks: Conv+BN+SiLU, depthwise-separable
convolutions, and the CSP-style bottleneck blocks built from them.

Every module exposes a ``budget(hw)`` method returning the closed-form
(parameter count, FLOP count, output spatial size) for one image, mirroring
exactly the op sequence its ``forward`` executes so the closed-form and
instrumented counters agree to the FLOP.
"""

from typing import NamedTuple

import numpy as np

from .errors import ConfigError
from .tensor import (
    Tensor,
    add,
    batchnorm,
    batchnorm_train,
    concat,
    conv2d,
    silu,
    split,
)


class Budget(NamedTuple):
    params: int
    flops: int
    out_hw: tuple


def conv_out_hw(hw, k, stride, padding):
    h, w = hw
    return ((h + 2 * padding - k) // stride + 1,
            (w + 2 * padding - k) // stride + 1)


class Module:
    """Minimal container: tracks child modules and parameter tensors by
    attribute (and list-of-module attributes), in insertion order."""

    def __init__(self):
        self.training = False

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_modules(self, prefix=""):
        yield prefix.rstrip("."), self
        for name, child in self._children():
            yield from child.named_modules(f"{prefix}{name}.")

    def named_tensors(self, prefix=""):
        """All parameter and buffer tensors, hierarchically named."""
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                yield f"{prefix}{name}", value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Tensor):
                        yield f"{prefix}{name}.{i}", item
        for name, child in self._children():
            yield from child.named_tensors(f"{prefix}{name}.")

    def named_parameters(self, prefix=""):
        for name, tensor in self.named_tensors(prefix):
            if tensor.requires_grad:
                yield name, tensor

    def parameters(self):
        for _, tensor in self.named_parameters():
            yield tensor

    def param_count(self):
        return sum(t.size for t in self.parameters())

    def set_training(self, flag):
        for _, module in self.named_modules():
            module.training = bool(flag)

    def zero_grad(self):
        for tensor in self.parameters():
            tensor.zero_grad()

    def budget(self, hw):
        raise NotImplementedError


def _fan_in_uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


class Conv(Module):
    """Bare 2-d convolution (optional bias, no normalization/activation)."""

    def __init__(self, rng, c1, c2, k=1, stride=1, groups=1, bias=False,
                 padding=None):
        super().__init__()
        if k % 2 == 0:
            raise ConfigError(f"convolution kernel must be odd, got {k}")
        self.c1, self.c2, self.k = c1, c2, k
        self.stride, self.groups = stride, groups
        self.padding = k // 2 if padding is None else padding
        fan_in = (c1 // groups) * k * k
        self.weight = _fan_in_uniform(rng, (c2, c1 // groups, k, k), fan_in)
        self.bias = _fan_in_uniform(rng, (c2,), fan_in) if bias else None

    def forward(self, x):
        return conv2d(x, self.weight, bias=self.bias, stride=self.stride,
                      padding=self.padding, groups=self.groups)

    def budget(self, hw):
        out_hw = conv_out_hw(hw, self.k, self.stride, self.padding)
        area = out_hw[0] * out_hw[1]
        params = self.weight.size
        flops = 2 * self.c2 * (self.c1 // self.groups) * self.k * self.k * area
        if self.bias is not None:
            params += self.c2
            flops += self.c2 * area
        return Budget(params, flops, out_hw)


class BatchNorm2d(Module):
    """Per-channel batch normalization; inference form uses the running
    statistics, training form folds batch statistics into them."""

    def __init__(self, channels, eps=1e-5, momentum=0.1):
        super().__init__()
        self.channels = channels
        if eps <= 0:
            raise ConfigError(f"batchnorm eps must be positive, got {eps}")
        self.eps = eps
        self.momentum = momentum
        self.scale = Tensor(np.ones(channels), requires_grad=True)
        self.shift = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = Tensor(np.zeros(channels))
        self.running_var = Tensor(np.ones(channels))

    def forward(self, x):
        if self.training:
            out, mean, var = batchnorm_train(x, self.scale, self.shift,
                                             eps=self.eps)
            m = self.momentum
            self.running_mean.data = (1 - m) * self.running_mean.data + m * mean
            self.running_var.data = (1 - m) * self.running_var.data + m * var
            return out
        return batchnorm(x, self.scale, self.shift, self.running_mean,
                         self.running_var, eps=self.eps)

    def budget(self, hw):
        return Budget(2 * self.channels, self.channels * hw[0] * hw[1], hw)


class ConvBN(Module):
    """Convolution + batch norm + optional SiLU, the default conv unit."""

    def __init__(self, rng, c1, c2, k=1, stride=1, groups=1, act=True):
        super().__init__()
        self.conv = Conv(rng, c1, c2, k, stride=stride, groups=groups)
        self.bn = BatchNorm2d(c2)
        self.act = act

    def forward(self, x):
        out = self.bn(self.conv(x))
        return silu(out) if self.act else out

    def budget(self, hw):
        conv = self.conv.budget(hw)
        bn = self.bn.budget(conv.out_hw)
        flops = conv.flops + bn.flops
        if self.act:
            flops += self.conv.c2 * conv.out_hw[0] * conv.out_hw[1]
        return Budget(conv.params + bn.params, flops, conv.out_hw)


class DSConv(Module):
    """Depthwise k x k convolution followed by a pointwise 1x1 projection,
    normalized and activated once after the separable pair."""

    def __init__(self, rng, c1, c2, k=3, stride=1):
        super().__init__()
        self.dw = Conv(rng, c1, c1, k, stride=stride, groups=c1)
        self.pw = ConvBN(rng, c1, c2, 1)

    def forward(self, x):
        return self.pw(self.dw(x))

    def budget(self, hw):
        dw = self.dw.budget(hw)
        pw = self.pw.budget(dw.out_hw)
        return Budget(dw.params + pw.params, dw.flops + pw.flops, pw.out_hw)


class DSBottleneck(Module):
    """Two chained separable convolutions (3x3 then large-kernel k x k) with
    a residual skip exactly when in/out channels match at stride 1."""

    def __init__(self, rng, c1, c2, k=5, shortcut=True):
        super().__init__()
        self.conv1 = DSConv(rng, c1, c2, 3)
        self.conv2 = DSConv(rng, c2, c2, k)
        self.add = shortcut and c1 == c2

    def forward(self, x):
        out = self.conv2(self.conv1(x))
        return add(out, x) if self.add else out

    def budget(self, hw):
        b1 = self.conv1.budget(hw)
        b2 = self.conv2.budget(b1.out_hw)
        flops = b1.flops + b2.flops
        if self.add:
            flops += self.conv2.pw.conv.c2 * b2.out_hw[0] * b2.out_hw[1]
        return Budget(b1.params + b2.params, flops, b2.out_hw)


class Bottleneck(Module):
    """Vanilla counterpart of DSBottleneck: two full convolutions."""

    def __init__(self, rng, c1, c2, k=5, shortcut=True):
        super().__init__()
        self.conv1 = ConvBN(rng, c1, c2, 3)
        self.conv2 = ConvBN(rng, c2, c2, k)
        self.add = shortcut and c1 == c2

    def forward(self, x):
        out = self.conv2(self.conv1(x))
        return add(out, x) if self.add else out

    def budget(self, hw):
        b1 = self.conv1.budget(hw)
        b2 = self.conv2.budget(b1.out_hw)
        flops = b1.flops + b2.flops
        if self.add:
            flops += self.conv2.conv.c2 * b2.out_hw[0] * b2.out_hw[1]
        return Budget(b1.params + b2.params, flops, b2.out_hw)


class DSC3k(Module):
    """CSP block: 1x1 reduce -> n cascaded bottlenecks beside a lateral 1x1
    branch, concatenated and restored by a 1x1 convolution. ``use_ds``
    selects separable or vanilla bottlenecks."""

    def __init__(self, rng, c1, c2, n=1, e=0.5, k=5, use_ds=True,
                 shortcut=True):
        super().__init__()
        if n < 1:
            raise ConfigError(f"bottleneck count must be >= 1, got {n}")
        if not 0 < e <= 1:
            raise ConfigError(f"hidden ratio must be in (0, 1], got {e}")
        ch = int(c2 * e)
        block = DSBottleneck if use_ds else Bottleneck
        self.cv1 = ConvBN(rng, c1, ch, 1)
        self.cv2 = ConvBN(rng, c1, ch, 1)
        self.blocks = [block(rng, ch, ch, k=k, shortcut=shortcut)
                       for _ in range(n)]
        self.cv3 = ConvBN(rng, 2 * ch, c2, 1)

    def forward(self, x):
        y = self.cv1(x)
        for blk in self.blocks:
            y = blk(y)
        return self.cv3(concat([y, self.cv2(x)], axis=1))

    def budget(self, hw):
        params = flops = 0
        b = self.cv1.budget(hw)
        params, flops = params + b.params, flops + b.flops
        inner_hw = b.out_hw
        for blk in self.blocks:
            b = blk.budget(inner_hw)
            params, flops, inner_hw = params + b.params, flops + b.flops, b.out_hw
        b = self.cv2.budget(hw)
        params, flops = params + b.params, flops + b.flops
        b = self.cv3.budget(inner_hw)
        return Budget(params + b.params, flops + b.flops, b.out_hw)


class DSC3k2(Module):
    """Split-path CSP block: a 1x1 unifying convolution, an untouched
    shortcut half, a processed half passed through chained DSC3k modules,
    then concat and a 1x1 fuse."""

    def __init__(self, rng, c1, c2, n=1, e=0.5, k=5, use_ds=True,
                 inner_n=2, shortcut=True):
        super().__init__()
        ch = int(c2 * e)
        if ch < 1:
            raise ConfigError(f"hidden width collapsed to zero (c2={c2}, e={e})")
        self.ch = ch
        self.cv1 = ConvBN(rng, c1, 2 * ch, 1)
        self.blocks = [
            DSC3k(rng, ch, ch, n=inner_n, e=e, k=k, use_ds=use_ds,
                  shortcut=shortcut)
            for _ in range(n)
        ]
        self.cv2 = ConvBN(rng, 2 * ch, c2, 1)

    def forward(self, x):
        a, b = split(self.cv1(x), [self.ch, self.ch], axis=1)
        for blk in self.blocks:
            b = blk(b)
        return self.cv2(concat([a, b], axis=1))

    def budget(self, hw):
        b = self.cv1.budget(hw)
        params, flops, inner_hw = b.params, b.flops, b.out_hw
        for blk in self.blocks:
            bb = blk.budget(inner_hw)
            params, flops, inner_hw = params + bb.params, flops + bb.flops, bb.out_hw
        bb = self.cv2.budget(inner_hw)
        return Budget(params + bb.params, flops + bb.flops, bb.out_hw)


class Sequential(Module):
    def __init__(self, blocks):
        super().__init__()
        self.blocks = list(blocks)

    def forward(self, x):
        for blk in self.blocks:
            x = blk(x)
        return x

    def budget(self, hw):
        params = flops = 0
        for blk in self.blocks:
            b = blk.budget(hw)
            params, flops, hw = params + b.params, flops + b.flops, b.out_hw
        return Budget(params, flops, hw)
