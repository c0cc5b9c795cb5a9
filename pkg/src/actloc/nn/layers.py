"""Stateful layer wrappers around :mod:`actloc.nn.functional`.

A layer keeps the record of its last forward pass; ``backward`` consumes it,
accumulates parameter gradients into ``grads`` and returns the input gradient.
"""
import math

import numpy as np

from actloc.nn import functional as F


class ForwardRecordError(RuntimeError):
    """Raised when backward is called without a matching forward pass."""


class Module:
    def __init__(self):
        self.params = {}
        self.buffers = {}
        self.grads = {}
        self.children = {}
        self._record = None

    def add(self, name, module):
        self.children[name] = module
        return module

    def named_parameters(self, prefix=""):
        for name, value in self.params.items():
            yield prefix + name, value
        for cname, child in self.children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_modules(self, prefix=""):
        yield prefix, self
        for cname, child in self.children.items():
            yield from child.named_modules(f"{prefix}{cname}.")

    def named_buffers(self, prefix=""):
        for name, value in self.buffers.items():
            yield prefix + name, value
        for cname, child in self.children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def named_grads(self, prefix=""):
        for name in self.params:
            yield prefix + name, self.grads.get(name)
        for cname, child in self.children.items():
            yield from child.named_grads(f"{prefix}{cname}.")

    def state(self):
        """Every stored array (parameters and buffers) keyed by dotted name."""
        out = dict(self.named_parameters())
        out.update(self.named_buffers())
        return out

    def load_state(self, arrays):
        """Copy arrays into this module in place; names and shapes must match."""
        own = self.state()
        for name, value in own.items():
            if name not in arrays:
                raise KeyError(f"missing parameter {name!r}")
            if arrays[name].shape != value.shape:
                raise ValueError(
                    f"parameter {name!r}: shape {arrays[name].shape} != expected {value.shape}"
                )
            value[...] = arrays[name]
        extra = sorted(set(arrays) - set(own))
        if extra:
            raise KeyError(f"unexpected parameter {extra[0]!r}")

    def zero_grad(self):
        for name, value in self.params.items():
            self.grads[name] = np.zeros_like(value)
        for child in self.children.values():
            child.zero_grad()

    def _accumulate(self, name, grad):
        if name in self.grads and self.grads[name] is not None:
            self.grads[name] += grad
        else:
            self.grads[name] = grad.copy()

    def _take_record(self):
        if self._record is None:
            raise ForwardRecordError(f"{type(self).__name__}.backward called without forward")
        record, self._record = self._record, None
        return record

    def __call__(self, x, train=True):
        return self.forward(x, train=train)


def uniform_init(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv3d(Module):
    def __init__(self, c_in, c_out, kernel, stride=1, padding="same", rng=None):
        super().__init__()
        kernel = F._triple(kernel)
        self.stride = F._triple(stride)
        self.padding = padding
        # the first layer of a network has no use for an input gradient
        self.input_grad = True
        fan_in = c_in * int(np.prod(kernel))
        shape = (*kernel, c_in, c_out)
        if rng is None:
            self.params["weight"] = np.zeros(shape)
            self.params["bias"] = np.zeros(c_out)
        else:
            self.params["weight"] = uniform_init(rng, shape, fan_in)
            self.params["bias"] = uniform_init(rng, (c_out,), fan_in)

    def forward(self, x, train=True):
        out, record = F.conv3d_forward(
            x, self.params["weight"], self.params["bias"], self.stride, self.padding
        )
        self._record = record if train else None
        return out

    def backward(self, g):
        dx, dw, db = F.conv3d_backward(
            g, self.params["weight"], self._take_record(), self.input_grad
        )
        self._accumulate("weight", dw)
        self._accumulate("bias", db)
        return dx


class MaxPool3d(Module):
    def __init__(self, window, stride=None):
        super().__init__()
        self.window = F._triple(window)
        self.stride = self.window if stride is None else F._triple(stride)

    def forward(self, x, train=True):
        out, record = F.maxpool3d_forward(x, self.window, self.stride)
        self._record = record if train else None
        return out

    def backward(self, g):
        return F.maxpool3d_backward(g, self._take_record())


class FrozenBatchNorm(Module):
    """Per-channel affine map from stored statistics.

    Statistics live in ``buffers`` and never change during training; scale
    and offset have gradients but the trainer leaves them fixed unless told
    otherwise.
    """

    def __init__(self, channels):
        super().__init__()
        self.params["scale"] = np.ones(channels)
        self.params["offset"] = np.zeros(channels)
        self.buffers["mean"] = np.zeros(channels)
        self.buffers["var"] = np.ones(channels)

    def forward(self, x, train=True):
        out, record = F.batchnorm_frozen_forward(
            x, self.params["scale"], self.params["offset"],
            self.buffers["mean"], self.buffers["var"],
        )
        self._record = record if train else None
        return out

    def backward(self, g):
        dx, dscale, doffset = F.batchnorm_frozen_backward(
            g, self.params["scale"], self._take_record()
        )
        self._accumulate("scale", dscale)
        self._accumulate("offset", doffset)
        return dx


class ReLU(Module):
    def forward(self, x, train=True):
        out, record = F.relu_forward(x)
        self._record = record if train else None
        return out

    def backward(self, g):
        return F.relu_backward(g, self._take_record())


class Sigmoid(Module):
    def forward(self, x, train=True):
        out, record = F.sigmoid_forward(x)
        self._record = record if train else None
        return out

    def backward(self, g):
        return F.sigmoid_backward(g, self._take_record())


class Linear(Module):
    def __init__(self, d_in, d_out, rng=None):
        super().__init__()
        if rng is None:
            self.params["weight"] = np.zeros((d_in, d_out))
            self.params["bias"] = np.zeros(d_out)
        else:
            self.params["weight"] = uniform_init(rng, (d_in, d_out), d_in)
            self.params["bias"] = uniform_init(rng, (d_out,), d_in)

    def forward(self, x, train=True):
        out, record = F.linear_forward(x, self.params["weight"], self.params["bias"])
        self._record = record if train else None
        return out

    def backward(self, g):
        dx, dw, db = F.linear_backward(g, self.params["weight"], self._take_record())
        self._accumulate("weight", dw)
        self._accumulate("bias", db)
        return dx


class GlobalAvgPool(Module):
    def forward(self, x, train=True):
        out, record = F.global_avg_pool_forward(x)
        self._record = record if train else None
        return out

    def backward(self, g):
        return F.global_avg_pool_backward(g, self._take_record())


class Sequential(Module):
    def __init__(self, *named_layers):
        super().__init__()
        self.order = []
        for name, layer in named_layers:
            self.add(name, layer)
            self.order.append(name)

    def forward(self, x, train=True):
        for name in self.order:
            x = self.children[name].forward(x, train=train)
        return x

    def backward(self, g):
        for name in reversed(self.order):
            g = self.children[name].backward(g)
        return g
