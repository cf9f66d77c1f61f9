"""Minimal layer/parameter containers on top of :mod:`hiresketch.tensor`."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Base container.  Parameters are ``Tensor`` attributes with
    ``requires_grad``; sub-modules are attributes (or list entries) that are
    themselves ``Module`` instances; buffers are registered by name."""

    def __init__(self):
        self.training = True
        self._buffers: dict[str, np.ndarray] = OrderedDict()

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self._buffers.items():
            yield prefix + name, value
        for name, child in self._children():
            yield from child.named_buffers(prefix + name + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())
        state.update((n, b.copy()) for n, b in self.named_buffers())
        return state

    def load_state_dict(self, state) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)[:5]}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data[...] = state[name]
        for name, b in bufs.items():
            b[...] = state[name]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def kaiming_uniform(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    """He-uniform init with ReLU gain: U(-sqrt(6/fan_in), sqrt(6/fan_in))."""
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding: int = 0,
                 bias: bool = False, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_ch * kernel * kernel
        self.weight = Tensor(kaiming_uniform((out_ch, in_ch, kernel, kernel), fan_in, rng), requires_grad=True)
        self.bias = None
        if bias:
            bound = 1.0 / math.sqrt(fan_in)
            self.bias = Tensor(rng.uniform(-bound, bound, size=out_ch), requires_grad=True)
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.padding = kernel, stride, padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def weight_count(self) -> int:
        return self.weight.data.size

    def __repr__(self):
        return f"Conv2d({self.in_ch}, {self.out_ch}, k={self.kernel}, s={self.stride}, p={self.padding})"


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self._buffers["running_mean"] = np.zeros(channels)
        self._buffers["running_var"] = np.ones(channels)
        self.momentum, self.eps = momentum, eps

    def forward(self, x: Tensor) -> Tensor:
        return T.batchnorm(x, self.gamma, self.beta, self._buffers["running_mean"],
                           self._buffers["running_var"], self.training, self.momentum, self.eps)


class Identity(Module):
    def forward(self, x: Tensor) -> Tensor:
        return x


# Inputs at least this large trade an extra conv in backward for memory.
RECOMPUTE_BYTES = 16 * 2**20


class ConvNorm(Module):
    """Conv followed by batchnorm (conv bias off), or a biased conv when
    normalisation is disabled."""

    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0, norm=True, rng=None):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, kernel, stride, padding, bias=not norm, rng=rng)
        self.norm = BatchNorm2d(out_ch) if norm else Identity()

    def forward(self, x: Tensor, relu: bool = False) -> Tensor:
        """Conv, norm and optionally a trailing relu.  Large batchnormed
        maps go through one fused tape node that does not keep the conv
        output alive; small ones use the plain op chain, which is faster."""
        if isinstance(self.norm, BatchNorm2d) and x.data.nbytes >= RECOMPUTE_BYTES:
            c, bn = self.conv, self.norm
            return T.conv_norm(x, c.weight, bn.gamma, bn.beta, bn._buffers["running_mean"],
                               bn._buffers["running_var"], self.training, c.stride, c.padding,
                               relu, bn.momentum, bn.eps)
        h = self.norm(self.conv(x))
        return T.relu(h) if relu else h
