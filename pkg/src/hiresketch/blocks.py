"""Residual building blocks: the plain two-conv block and the two-branch
multi-scale block with randomised branch activation."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .nn import ConvNorm, Identity, Module
from .tensor import Tensor


def projection(in_ch: int, out_ch: int, stride: int, norm: bool = True, rng=None) -> Module:
    """1x1 strided projection for a skip path whose shape changes."""
    return ConvNorm(in_ch, out_ch, 1, stride, 0, norm=norm, rng=rng)


def _needs_projection(in_ch, out_ch, stride) -> bool:
    return stride != 1 or in_ch != out_ch


class BasicBlock(Module):
    """conv3x3-bn-relu-conv3x3-bn, plus skip, then relu."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1, norm: bool = True,
                 activation: bool = True, rng=None):
        super().__init__()
        self.conv1 = ConvNorm(in_ch, out_ch, 3, stride, 1, norm=norm, rng=rng)
        self.conv2 = ConvNorm(out_ch, out_ch, 3, 1, 1, norm=norm, rng=rng)
        self.skip = projection(in_ch, out_ch, stride, norm, rng) if _needs_projection(in_ch, out_ch, stride) else Identity()
        self.activation = activation

    def residual(self, x: Tensor) -> Tensor:
        return self.conv2(self.conv1(x, relu=self.activation))

    def forward(self, x: Tensor, rng=None) -> Tensor:
        y = T.add(self.skip(x), self.residual(x))
        return T.relu(y) if self.activation else y

    def branch_convs(self):
        return [self.conv1.conv, self.conv2.conv]


class MultiScaleBlock(Module):
    """Two residual branches over the same input.

    The left branch is two 3x3 convs (5x5 receptive field), the right branch
    is a single 3x3 conv.  In eval mode the branches are fused as
    ``skip + alpha*left + (1-alpha)*right``.  In training mode exactly one
    branch runs per forward pass: the left one with probability ``alpha``.

    Set ``record = True`` to keep the last branch outputs in ``self.last``.
    """

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1, alpha: float = 0.75,
                 norm: bool = True, activation: bool = True, rng=None):
        super().__init__()
        if not 0.0 <= alpha <= 1.0:
            raise ContractError(f"alpha must lie in [0, 1], got {alpha}")
        self.left1 = ConvNorm(in_ch, out_ch, 3, stride, 1, norm=norm, rng=rng)
        self.left2 = ConvNorm(out_ch, out_ch, 3, 1, 1, norm=norm, rng=rng)
        self.right = ConvNorm(in_ch, out_ch, 3, stride, 1, norm=norm, rng=rng)
        self.skip = projection(in_ch, out_ch, stride, norm, rng) if _needs_projection(in_ch, out_ch, stride) else Identity()
        self.alpha = float(alpha)
        self.activation = activation
        self.record = False
        self.last: dict = {}
        self.last_choice: str | None = None

    def left_branch(self, x: Tensor) -> Tensor:
        return self.left2(self.left1(x, relu=self.activation))

    def right_branch(self, x: Tensor) -> Tensor:
        return self.right(x)

    def forward(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        if self.training:
            if rng is None:
                raise ContractError("training-mode forward needs a seeded rng for branch sampling")
            return self.forward_train(x, rng)
        return self.forward_eval(x)

    def _finish(self, skip: Tensor, residual: Tensor) -> Tensor:
        pre = T.add(skip, residual)
        if self.record:
            self.last.update(skip=skip.data, preact=pre.data)
        return T.relu(pre) if self.activation else pre

    def forward_eval(self, x: Tensor) -> Tensor:
        left, right = self.left_branch(x), self.right_branch(x)
        if left.shape != right.shape:
            raise DimensionError(f"branch shapes differ: {left.shape} vs {right.shape}")
        if self.record:
            self.last = {"left": left.data, "right": right.data}
        self.last_choice = None
        fused = T.add(T.scale(left, self.alpha), T.scale(right, 1.0 - self.alpha))
        return self._finish(self.skip(x), fused)

    def forward_train(self, x: Tensor, rng: np.random.Generator) -> Tensor:
        use_left = rng.random() < self.alpha
        self.last_choice = "left" if use_left else "right"
        branch = self.left_branch(x) if use_left else self.right_branch(x)
        if self.record:
            self.last = {self.last_choice: branch.data}
        return self._finish(self.skip(x), branch)

    def branch_convs(self):
        return [self.left1.conv, self.left2.conv, self.right.conv]

    def active_convs(self, choice: str):
        return [self.left1.conv, self.left2.conv] if choice == "left" else [self.right.conv]


def param_count(block: Module) -> int:
    """Conv weights on the residual branches (skip projection, biases and
    norm parameters excluded)."""
    return sum(c.weight.data.size for c in block.branch_convs())


def expected_active_params(n_p: float, alpha: float) -> float:
    """Mean number of conv weights exercised per training step when a
    plain-block network has ``n_p`` of them: ``n_p * (alpha + 1) / 2``."""
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must lie in [0, 1], got {alpha}")
    if n_p < 0:
        raise ContractError("parameter count must be non-negative")
    return n_p * (alpha + 1.0) / 2.0
