"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation that touches a tensor requiring gradients records itself on
the output (parents + backward closure) and receives a monotonically
increasing sequence number.  ``Tensor.backward`` collects the reachable
sub-graph and replays it in strictly decreasing sequence order, which is the
exact reverse of execution order.

Spatial operators take ``(N, C, H, W)`` inputs; a ``(C, H, W)`` input is
treated as a batch of one and the batch axis is dropped again on output.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError

_sequence = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """N-dimensional array of float64 values with an optional gradient slot."""

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = next(_sequence)
        self._released = False
        self._retain = False

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    @property
    def is_leaf(self) -> bool:
        return self._backward is None and not self._released

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def retain_grad(self) -> "Tensor":
        """Keep the gradient of a non-leaf tensor after backward."""
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autodiff ------------------------------------------------------
    def backward(self) -> None:
        """Populate ``grad`` on every reachable leaf that requires it.

        The graph is released afterwards; a second call raises.
        """
        if self._released:
            raise RuntimeError("backward already ran through this graph; run a fresh forward pass")
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss is not connected to any tensor that requires grad")

        nodes = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in nodes:
                continue
            if node._released:
                raise RuntimeError("graph contains a node whose backward already ran")
            nodes[id(node)] = node
            stack.extend(p for p in node._parents if p.requires_grad)

        grads = {id(self): np.ones_like(self.data)}
        # popped one at a time so finished interior nodes can be freed early
        order = sorted(nodes.values(), key=lambda n: n._seq)
        nodes.clear()
        while order:
            node = order.pop()
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if node._retain:
                node.grad = g.copy() if node.grad is None else node.grad + g
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
            node._backward = None
            node._parents = ()
            node._released = True

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.shape), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)


def _as_tensor(x, shape=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if shape is not None and arr.ndim == 0:
        arr = np.full(shape, float(arr))
    return Tensor(arr)


def _record(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data, name=op)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# -- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    """Elementwise sum.  Tensor operands must have equal shapes; a python
    scalar is accepted on either side."""
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        s = float(b)
        return _record(a.data + s, (a,), lambda g: (g,), "add_scalar")
    _check_same_shape(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    a = _as_tensor(a, b.shape)
    _check_same_shape(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(t: Tensor, s: float) -> Tensor:
    s = float(s)
    return _record(t.data * s, (t,), lambda g: (g * s,), "scale")


def relu(t: Tensor) -> Tensor:
    out_data = np.maximum(t.data, 0.0)

    def backward(g):
        return (g * (out_data > 0),)

    return _record(out_data, (t,), backward, "relu")


def tsum(t: Tensor, axis=None) -> Tensor:
    shape = t.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.asarray(t.data.sum(axis=axis)), (t,), backward, "sum")


def reshape(t: Tensor, shape) -> Tensor:
    old = t.shape
    return _record(t.data.reshape(shape), (t,), lambda g: (g.reshape(old),), "reshape")


def flatten(t: Tensor) -> Tensor:
    """Collapse every axis after the first."""
    return reshape(t, (t.shape[0], -1))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def take_rows(t: Tensor, index) -> Tensor:
    """Gather rows ``t[index]``; gradients scatter-add back."""
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= t.shape[0]):
        raise IndexError(f"row index out of range for {t.shape[0]} rows")
    shape = t.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _record(t.data[index], (t,), backward, "take_rows")


# -- spatial -------------------------------------------------------------

def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise DimensionError(f"expected (C,H,W) or (N,C,H,W) input, got {x.shape}")
    return x, False


def _unbatch(out: Tensor, squeeze: bool) -> Tensor:
    return reshape(out, out.shape[1:]) if squeeze else out


def output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    """Spatial output extent: floor((size + 2*padding - kernel) / stride) + 1."""
    if stride < 1 or padding < 0 or kernel < 1:
        raise ContractError(f"bad window parameters k={kernel} s={stride} p={padding}")
    if size + 2 * padding < kernel:
        raise DimensionError(f"window {kernel} exceeds padded input {size + 2 * padding}")
    return (size + 2 * padding - kernel) // stride + 1


# Largest im2col matrix conv2d will materialise before switching to a
# per-offset loop.
IM2COL_BYTES = 256 * 2**20


def _windows(xp: np.ndarray, k: int, s: int) -> np.ndarray:
    # (N, C, Ho, Wo, k, k) strided view, no copy
    return sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]


def _scatter_windows(gwin: np.ndarray, padded_shape, k: int, s: int) -> np.ndarray:
    """Adjoint of ``_windows``: sum window gradients back onto the input grid."""
    out = np.zeros(padded_shape)
    ho, wo = gwin.shape[2], gwin.shape[3]
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += gwin[..., i, j]
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` with ``weight[C_out, C_in, k, k]``."""
    x, squeeze = _as_batch(x)
    n, c, h, w = x.shape
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise DimensionError(f"conv2d: weight must be (C_out, C_in, k, k), got {weight.shape}")
    c_out, c_in, k, _ = weight.shape
    if c_in != c:
        raise DimensionError(f"conv2d: weight expects {c_in} input channels, input has {c}")
    ho, wo = output_size(h, k, stride, padding), output_size(w, k, stride, padding)
    p, s = padding, stride

    wd = weight.data
    xd = x.data

    def padded():
        return np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd

    def tap(xp, i, j):
        # input pixels seen by kernel offset (i, j) at every output site
        return xp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]

    xp = padded()
    # one contraction over the im2col matrix when it is small; otherwise one
    # matmul per kernel offset, which keeps temporaries at input size
    im2col = n * ho * wo * c * k * k * 8 <= IM2COL_BYTES
    if im2col:
        out = np.tensordot(_windows(xp, k, s), wd, axes=([1, 4, 5], [1, 2, 3]))
    else:
        out = np.zeros((n, ho, wo, c_out))
        for i in range(k):
            for j in range(k):
                out += np.tensordot(tap(xp, i, j), wd[:, :, i, j], axes=([1], [1]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    del xp  # re-padded in backward rather than held by the tape
    if bias is not None:
        out += bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)
    need_x = x.requires_grad

    def backward(g):
        xp = padded()
        gxp = None
        if im2col:
            gw = np.tensordot(g, _windows(xp, k, s), axes=([0, 2, 3], [0, 2, 3]))
            if need_x:
                gwin = np.tensordot(g, wd, axes=([1], [0]))  # (N, Ho, Wo, C, k, k)
                gxp = _scatter_windows(gwin.transpose(0, 3, 1, 2, 4, 5), xp.shape, k, s)
        else:
            gw = np.empty_like(wd)
            gxp = np.zeros(xp.shape) if need_x else None
            for i in range(k):
                for j in range(k):
                    gw[:, :, i, j] = np.tensordot(g, tap(xp, i, j), axes=([0, 2, 3], [0, 2, 3]))
                    if need_x:
                        gtap = np.tensordot(wd[:, :, i, j], g, axes=([0], [1]))  # (C, N, Ho, Wo)
                        gxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += gtap.transpose(1, 0, 2, 3)
        gx = None
        if need_x:
            gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _unbatch(_record(out, parents, backward, "conv2d"), squeeze)


def maxpool2d(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    """Max pooling; ties resolve to the lowest flat index inside the window."""
    x, squeeze = _as_batch(x)
    n, c, h, w = x.shape
    k, s, p = kernel, stride, padding
    ho, wo = output_size(h, k, s, p), output_size(w, k, s, p)
    if p > k // 2:
        raise ContractError(f"maxpool2d: padding {p} would create all-padding windows for k={k}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf) if p else x.data
    flat = _windows(xp, k, s).reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    hp, wp = xp.shape[2], xp.shape[3]

    def backward(g):
        rows = np.arange(ho)[:, None] * s + arg // k
        cols = np.arange(wo)[None, :] * s + arg % k
        plane = (np.arange(n)[:, None] * c + np.arange(c)[None, :])[:, :, None, None]
        lin = (plane * hp + rows) * wp + cols
        gxp = np.bincount(lin.ravel(), weights=g.ravel(), minlength=n * c * hp * wp)
        gxp = gxp.reshape(n, c, hp, wp)
        return (gxp[:, :, p:p + h, p:p + w] if p else gxp,)

    return _unbatch(_record(out, (x,), backward, "maxpool2d"), squeeze)


def avgpool2d(x: Tensor, kernel: int, stride: int) -> Tensor:
    x, squeeze = _as_batch(x)
    n, c, h, w = x.shape
    k, s = kernel, stride
    output_size(h, k, s, 0)
    output_size(w, k, s, 0)
    out = _windows(x.data, k, s).mean(axis=(-2, -1))

    def backward(g):
        gwin = np.broadcast_to((g / (k * k))[..., None, None], g.shape + (k, k))
        return (_scatter_windows(gwin, x.shape, k, s),)

    return _unbatch(_record(out, (x,), backward, "avgpool2d"), squeeze)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation over every axis except axis 1.

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance, exponential ``momentum``).
    """
    if x.ndim not in (2, 4):
        raise DimensionError(f"batchnorm expects (N,C) or (N,C,H,W), got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm: affine params must be ({c},)")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    count = x.data.size // c

    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        unbiased = var * count / max(count - 1, 1)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mean, var = running_mean.copy(), running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    mean_b, inv_b = mean.reshape(bshape), inv.reshape(bshape)
    gamma_b = gamma.data.reshape(bshape)
    out = (x.data - mean_b) * inv_b * gamma_b + beta.data.reshape(bshape)
    xd = x.data

    def backward(g):
        xhat = (xd - mean_b) * inv_b
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma_b
        if training:
            gx = (inv_b / count) * (
                count * gxhat
                - gxhat.sum(axis=axes).reshape(bshape)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = gxhat * inv_b
        return gx, ggamma, gbeta

    return _record(out, (x, gamma, beta), backward, "batchnorm")


def conv_norm(
    x: Tensor,
    weight: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    stride: int = 1,
    padding: int = 0,
    relu_out: bool = False,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """conv2d -> batchnorm (-> relu) as one tape node.

    Same values and gradients as the three ops chained, but only the input
    and the final output stay alive between forward and backward: the
    intermediate maps are rebuilt from the input when backward runs.
    """
    xd, wd, gd, bd = x.data, weight.data, gamma.data, beta.data
    with no_grad():
        h = batchnorm(conv2d(Tensor(xd), Tensor(wd), None, stride, padding),
                      Tensor(gd), Tensor(bd), running_mean, running_var, training, momentum, eps)
        if relu_out:
            h = relu(h)
    if not (_grad_enabled and any(t.requires_grad for t in (x, weight, gamma, beta))):
        return h
    # batch statistics as used above, so the replay normalises identically
    rm, rv = running_mean.copy(), running_var.copy()

    def backward(g):
        global _grad_enabled
        previous, _grad_enabled = _grad_enabled, True
        try:
            leaves = [Tensor(t.data, requires_grad=t.requires_grad) for t in (x, weight, gamma, beta)]
            xt, wt, gt, bt = leaves
            y = batchnorm(conv2d(xt, wt, None, stride, padding), gt, bt, rm.copy(), rv.copy(),
                          training, momentum, eps)
            if relu_out:
                y = relu(y)
            tsum(mul(y, Tensor(g))).backward()
        finally:
            _grad_enabled = previous
        return tuple(t.grad for t in leaves)

    return _record(h.data, (x, weight, gamma, beta), backward, "conv_norm")


# -- losses --------------------------------------------------------------

def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """-log softmax(logits)[label], averaged (or summed) over the batch.

    ``logits`` is ``(K,)`` with an int label or ``(N, K)`` with N labels.
    """
    single = logits.ndim == 1
    z = logits.data[None, :] if single else logits.data
    if z.ndim != 2:
        raise DimensionError(f"logits must be (K,) or (N,K), got {logits.shape}")
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, k = z.shape
    if y.shape != (n,):
        raise DimensionError(f"expected {n} labels, got {y.shape}")
    if y.min() < 0 or y.max() >= k:
        raise IndexError(f"label out of range for {k} classes")
    logp = log_softmax(z)
    picked = logp[np.arange(n), y]
    if reduction == "mean":
        value, norm = -picked.mean(), 1.0 / n
    elif reduction == "sum":
        value, norm = -picked.sum(), 1.0
    else:
        raise ContractError(f"unknown reduction {reduction!r}")

    def backward(g):
        grad = np.exp(logp)
        grad[np.arange(n), y] -= 1.0
        grad *= norm * g
        return (grad[0] if single else grad,)

    return _record(np.asarray(value), (logits,), backward, "softmax_cross_entropy")
