"""Central finite-difference checks for every differentiable operator.

Each check builds seeded random inputs, reduces the operator output to a
scalar through a fixed random projection (so every output element matters)
and compares the autodiff gradient of every input element against
``(f(x + h) - f(x - h)) / 2h``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .. import tensor as T
from ..blocks import BasicBlock, MultiScaleBlock
from ..losses import CenterBank, ctcl_loss, ctcl_feature_grad, tcl_loss
from ..network import HierarchicalResNet, NetworkConfig
from ..tensor import Tensor

STEP = 1e-4
TOLERANCE = 1e-4
MAX_REDRAWS = 5


@dataclass
class GradCheckResult:
    name: str
    seed: int
    max_rel_error: float
    checked: int
    tolerance: float
    redraws: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tolerance)

    def to_dict(self) -> dict:
        return {"name": self.name, "seed": self.seed, "max_rel_error": self.max_rel_error,
                "checked": self.checked, "redraws": self.redraws, "passed": self.passed}


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Elementwise |a - b| / max(|a|, |b|, floor)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


class KinkError(ArithmeticError):
    """A non-differentiable point lies inside the difference stencil."""


def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = STEP,
                   kink_tol: float | None = None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``x``, perturbed in place.

    With ``kink_tol`` the one-sided slopes are compared as well; a jump
    larger than ``kink_tol * max(1, |slope|)`` means a relu or max switched
    inside the stencil and raises :class:`KinkError`.
    """
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    base = f() if kink_tol is not None else 0.0
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2.0 * h)
        if kink_tol is not None:
            right, left = (up - base) / h, (base - down) / h
            if abs(right - left) > kink_tol * max(1.0, abs(gflat[i])):
                raise KinkError(f"kink at element {i}")
    return grad


def check(name: str, build: Callable[[list[Tensor]], Tensor], inputs: list[np.ndarray],
          seed: int, h: float = STEP, tolerance: float = TOLERANCE,
          kink_tol: float | None = 0.1) -> GradCheckResult:
    """Compare autodiff and finite differences of ``sum(build(inputs) * R)``."""
    proj_rng = np.random.default_rng([seed, 99])
    leaves = [Tensor(x, requires_grad=True) for x in inputs]
    out = build(leaves)
    weights = proj_rng.normal(size=out.shape) if out.ndim else np.ones(())

    def value() -> float:
        with T.no_grad():
            return float(np.sum(build(leaves).data * weights))

    loss = T.tsum(T.mul(out, Tensor(weights))) if out.ndim else out
    loss.backward()
    worst, count = 0.0, 0
    for leaf in leaves:
        num = numerical_grad(value, leaf.data, h, kink_tol)
        ana = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        err = rel_error(ana, num)
        worst = max(worst, float(err.max()) if err.size else 0.0)
        count += err.size
    return GradCheckResult(name, seed, worst, count, tolerance)


def _distinct(rng, shape, gap: float = 0.01) -> np.ndarray:
    """Values that differ pairwise by at least ``gap``, so max-pool and the
    nearest-center choice cannot flip under a finite-difference step."""
    n = int(np.prod(shape))
    return (rng.permutation(n) - n / 2).reshape(shape) * gap


def _away_from_zero(rng, shape, margin: float = 0.05) -> np.ndarray:
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _conv(rng):
    x = rng.normal(size=(2, 2, 6, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    return lambda t: T.conv2d(t[0], t[1], t[2], stride=2, padding=1), [x, w, b]


def _conv_unpadded(rng):
    x = rng.normal(size=(1, 3, 5, 5))
    w = rng.normal(size=(2, 3, 3, 3))
    return lambda t: T.conv2d(t[0], t[1]), [x, w]


def _conv_outer(rng):
    x = rng.normal(size=(1, 2, 16, 16))
    w = rng.normal(size=(2, 2, 9, 9))
    return lambda t: T.conv2d(t[0], t[1], stride=8, padding=1), [x, w]


def _maxpool(rng):
    return lambda t: T.maxpool2d(t[0], 3, 2, 1), [_distinct(rng, (1, 2, 6, 6))]


def _avgpool(rng):
    return lambda t: T.avgpool2d(t[0], 3, 3), [rng.normal(size=(2, 2, 6, 6))]


def _relu(rng):
    return lambda t: T.relu(t[0]), [_away_from_zero(rng, (4, 5))]


def _elementwise(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    return lambda t: T.add(T.mul(t[0], t[1]), T.scale(T.sub(t[0], t[1]), 0.7)), [a, b]


def _matmul(rng):
    return lambda t: T.matmul(t[0], t[1]), [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]


def _reductions(rng):
    return (lambda t: T.tsum(T.reshape(T.take_rows(t[0], [2, 0, 2]), (2, 6)), axis=1),
            [rng.normal(size=(3, 4))])


def _batchnorm_train(rng):
    x = rng.normal(size=(3, 2, 3, 3))
    g, b = rng.normal(size=2), rng.normal(size=2)
    rm, rv = np.zeros(2), np.ones(2)
    return lambda t: T.batchnorm(t[0], t[1], t[2], rm, rv, training=True), [x, g, b]


def _batchnorm_eval(rng):
    x = rng.normal(size=(2, 3, 2, 2))
    g, b = rng.normal(size=3), rng.normal(size=3)
    rm, rv = rng.normal(size=3), rng.uniform(0.5, 2.0, size=3)
    return lambda t: T.batchnorm(t[0], t[1], t[2], rm, rv, training=False), [x, g, b]


def _conv_norm(rng):
    x = rng.normal(size=(3, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    g, b = rng.normal(size=3), rng.normal(size=3)
    rm, rv = np.zeros(3), np.ones(3)
    return (lambda t: T.conv_norm(t[0], t[1], t[2], t[3], rm, rv, True, stride=2, padding=1, relu_out=True),
            [x, w, g, b])


def _cross_entropy(rng):
    labels = rng.integers(0, 10, size=4)
    return lambda t: T.softmax_cross_entropy(t[0], labels), [rng.normal(size=(4, 10))]


def _ctcl(rng):
    c = rng.normal(size=(5, 3))
    bank = CenterBank(c, margin=4.5, eta=0.5)
    labels = rng.integers(0, 5, size=6)
    neg = (labels + rng.integers(1, 5, size=6)) % 5
    # halfway between the two centers, so every hinge is active
    x = 0.5 * (c[labels] + c[neg]) + 0.1 * rng.normal(size=(6, 3))
    return lambda t: ctcl_loss(t[0], labels, bank, negatives=neg).loss, [x]


def _tcl(rng):
    # centers well inside the margin of each other keep every hinge active
    bank = CenterBank(_distinct(rng, (5, 3), gap=0.1), margin=5.0, eta=0.5)
    labels = rng.integers(0, 5, size=6)
    x = bank.centers[labels] + 0.3 * rng.normal(size=(6, 3))
    return lambda t: tcl_loss(t[0], labels, bank).loss, [x]


def _composite(rng):
    x = rng.normal(size=(2, 1, 8, 8))
    w = rng.normal(size=(3, 1, 3, 3)) * 0.5
    v = rng.normal(size=(4, 3))
    labels = rng.integers(0, 4, size=2)

    def build(t):
        h = T.maxpool2d(T.relu(T.conv2d(t[0], t[1], padding=1)), 2, 2)
        pooled = T.reshape(T.avgpool2d(h, 4, 4), (2, 3))
        return T.softmax_cross_entropy(T.matmul(pooled, T.reshape(t[2], (3, 4))), labels)

    return build, [x, w, v.T.copy()]


def _block_module(block, x, rng_factory=None):
    """Check w.r.t. the block input and every parameter; leaves are swapped
    into the module so the same graph is rebuilt on each evaluation."""
    named = list(block.named_parameters())

    def build(t):
        for (name, _), leaf in zip(named, t[1:]):
            _set_param(block, name, leaf)
        return block(t[0], rng_factory() if rng_factory else None)

    return build, [x] + [p.data.copy() for _, p in named]


def _set_param(module, dotted: str, value: Tensor) -> None:
    *path, last = dotted.split(".")
    obj = module
    for part in path:
        obj = obj[int(part)] if part.isdigit() else getattr(obj, part)
    setattr(obj, last, value)


def _multiscale_eval(rng):
    block = MultiScaleBlock(2, 3, stride=2, alpha=0.75, rng=rng).eval()
    return _block_module(block, rng.normal(size=(2, 2, 5, 5)))


def _multiscale_train(rng):
    block = MultiScaleBlock(2, 2, stride=1, alpha=0.5, rng=rng).train()
    seed = int(rng.integers(1 << 30))
    return _block_module(block, rng.normal(size=(2, 2, 4, 4)), lambda: np.random.default_rng(seed))


def _basic(rng):
    block = BasicBlock(2, 2, stride=1, rng=rng).eval()
    return _block_module(block, rng.normal(size=(1, 2, 4, 4)))


def _network(rng):
    cfg = NetworkConfig(input_side=16, stages=((2, 1), (2, 1), (2, 1), (2, 1)), num_classes=3,
                        seed=int(rng.integers(1 << 30)), outer_kernel=4, outer_stride=4, outer_padding=0)
    model = HierarchicalResNet(cfg).eval()
    labels = rng.integers(0, 3, size=1)
    x = rng.normal(size=(1, 1, 16, 16))

    def build(t):
        return T.softmax_cross_entropy(model(t[0]).logits, labels)

    return build, [x]


OPERATORS: dict[str, Callable] = {
    "conv2d": _conv,
    "conv2d_unpadded": _conv_unpadded,
    "conv2d_outer_projection": _conv_outer,
    "maxpool2d": _maxpool,
    "avgpool2d": _avgpool,
    "relu": _relu,
    "add_sub_mul_scale": _elementwise,
    "matmul": _matmul,
    "take_reshape_sum": _reductions,
    "batchnorm_train": _batchnorm_train,
    "batchnorm_eval": _batchnorm_eval,
    "conv_norm_relu": _conv_norm,
    "softmax_cross_entropy": _cross_entropy,
    "ctcl_loss": _ctcl,
    "tcl_loss": _tcl,
    "conv_relu_pool_ce": _composite,
    "multiscale_block_eval": _multiscale_eval,
    "multiscale_block_train": _multiscale_train,
    "basic_block": _basic,
}

# Slow checks are left out of the default sweep.
EXTRA_OPERATORS: dict[str, Callable] = {"network_input": _network}


def run_operator(name: str, seed: int, h: float = STEP, tolerance: float = TOLERANCE) -> GradCheckResult:
    factory = OPERATORS.get(name) or EXTRA_OPERATORS.get(name)
    if factory is None:
        raise KeyError(f"unknown operator {name!r}")
    for attempt in range(MAX_REDRAWS + 1):
        rng = np.random.default_rng(seed if attempt == 0 else [seed, attempt])
        build, inputs = factory(rng)
        try:
            result = check(name, build, inputs, seed, h, tolerance)
        except KinkError:
            continue
        result.redraws = attempt
        return result
    raise KinkError(f"{name}: every draw for seed {seed} had a kink inside the stencil")


def run_all(seeds=range(20), names=None, h: float = STEP, tolerance: float = TOLERANCE) -> list[GradCheckResult]:
    names = list(OPERATORS) if names is None else list(names)
    return [run_operator(n, s, h, tolerance) for n in names for s in seeds]


def feature_grad_agreement(n: int = 100, seed: int = 0, dim: int = 8) -> float:
    """Worst relative error between the autodiff feature gradient of the
    compact loss and ``2 / eta`` times the closed-form feature update, over
    ``n`` random hinge-active instances."""
    rng = np.random.default_rng(seed)
    worst, done = 0.0, 0
    while done < n:
        m = float(rng.uniform(1.5, 6.0))
        eta = float(rng.uniform(0.05, 1.0))
        x, c_pos, c_neg = rng.normal(size=(3, dim))
        if m * np.sum((x - c_pos) ** 2) - np.sum((x - c_neg) ** 2) <= 0:
            continue
        bank = CenterBank(np.stack([c_pos, c_neg]), margin=m, eta=eta)
        feat = Tensor(x[None, :], requires_grad=True)
        ctcl_loss(feat, [0], bank, negatives=[1]).loss.backward()
        closed = 2.0 / eta * ctcl_feature_grad(x, c_pos, c_neg, m, eta)
        worst = max(worst, float(rel_error(feat.grad[0], closed, floor=1e-300).max()))
        done += 1
    return worst


def timed(fn, *args, **kwargs):
    start = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - start
