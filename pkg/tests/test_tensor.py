import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import correlate2d

from hiresketch import tensor as T
from hiresketch.errors import ContractError, DimensionError
from hiresketch.harness.gradcheck import check, numerical_grad, rel_error
from hiresketch.tensor import Tensor


def conv_oracle(x, w, b, stride, padding):
    """Independent reference: scipy cross-correlation per channel pair."""
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    full = np.stack([sum(correlate2d(xp[ci], w[co, ci], mode="valid") for ci in range(x.shape[0]))
                     for co in range(w.shape[0])])
    out = full[:, ::stride, ::stride]
    return out + (0 if b is None else b[:, None, None])


def maxpool_oracle(x, k, s, p):
    c, h, w = x.shape
    xp = np.full((c, h + 2 * p, w + 2 * p), -np.inf)
    xp[:, p:p + h, p:p + w] = x
    ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
    out = np.empty((c, ho, wo))
    for ch in range(c):
        for i in range(ho):
            for j in range(wo):
                out[ch, i, j] = xp[ch, i * s:i * s + k, j * s:j * s + k].max()
    return out


# -- shapes ----------------------------------------------------------------

@pytest.mark.parametrize("size,k,s,p,expected", [
    (224, 7, 2, 3, 112),   # stem
    (112, 3, 2, 1, 56),    # front-end pool
    (56, 9, 8, 1, 7),      # outer projection
    (56, 3, 2, 1, 28),
    (28, 3, 2, 1, 14),
    (14, 3, 2, 1, 7),
    (7, 7, 7, 0, 1),       # head pooling
])
def test_output_size_table_rows(size, k, s, p, expected):
    assert T.output_size(size, k, s, p) == expected


@given(size=st.integers(1, 80), k=st.integers(1, 9), s=st.integers(1, 8), p=st.integers(0, 4))
def test_output_size_law(size, k, s, p):
    if size + 2 * p < k:
        with pytest.raises(DimensionError):
            T.output_size(size, k, s, p)
    else:
        assert T.output_size(size, k, s, p) == math.floor((size + 2 * p - k) / s) + 1


def test_conv_stem_shape():
    x = Tensor(np.zeros((1, 224, 224)))
    w = Tensor(np.zeros((64, 1, 7, 7)))
    assert T.conv2d(x, w, stride=2, padding=3).shape == (64, 112, 112)


def test_conv_outer_projection_shape():
    x = Tensor(np.zeros((64, 56, 56)))
    w = Tensor(np.zeros((512, 64, 9, 9)))
    assert T.conv2d(x, w, stride=8, padding=1).shape == (512, 7, 7)


def test_conv_identity_kernel():
    out = T.conv2d(Tensor([[[3.5]]]), Tensor(np.ones((1, 1, 1, 1))))
    assert out.shape == (1, 1, 1) and out.data[0, 0, 0] == 3.5


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.zeros((2, 5, 5))), Tensor(np.zeros((3, 4, 3, 3))))


def test_conv_window_larger_than_input():
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.zeros((1, 3, 3))), Tensor(np.zeros((1, 1, 7, 7))))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), stride=st.integers(1, 3), padding=st.integers(0, 2),
       k=st.sampled_from([1, 3, 5]), bias=st.booleans())
def test_conv_matches_scipy(seed, stride, padding, k, bias):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 7, 8))
    w = rng.normal(size=(3, 2, k, k))
    b = rng.normal(size=3) if bias else None
    out = T.conv2d(Tensor(x), Tensor(w), None if b is None else Tensor(b), stride, padding)
    np.testing.assert_allclose(out.data, conv_oracle(x, w, b, stride, padding), rtol=1e-12, atol=1e-12)


# -- pooling ---------------------------------------------------------------

def test_maxpool_front_end_shape():
    assert T.maxpool2d(Tensor(np.zeros((64, 112, 112))), 3, 2, 1).shape == (64, 56, 56)


def test_maxpool_enumerated():
    out = T.maxpool2d(Tensor([[[1.0, 2.0], [3.0, 4.0]]]), 2, 2, 0)
    assert out.data.tolist() == [[[4.0]]]


def test_maxpool_constant_input_first_index_tie_break():
    x = Tensor(np.full((1, 4, 4), 2.0), requires_grad=True)
    out = T.maxpool2d(x, 2, 2)
    assert np.all(out.data == 2.0)
    T.tsum(out).backward()
    expected = np.zeros((4, 4))
    expected[::2, ::2] = 1.0  # top-left cell of every window wins
    np.testing.assert_array_equal(x.grad[0], expected)


def test_maxpool_window_too_large():
    with pytest.raises(DimensionError):
        T.maxpool2d(Tensor(np.zeros((1, 2, 2))), 5, 1, 0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(2, 3), s=st.integers(1, 3))
def test_maxpool_matches_loops(seed, k, s):
    x = np.random.default_rng(seed).normal(size=(2, 7, 6))
    p = k // 2
    np.testing.assert_array_equal(T.maxpool2d(Tensor(x), k, s, p).data, maxpool_oracle(x, k, s, p))


def test_avgpool_head_shapes():
    assert T.avgpool2d(Tensor(np.zeros((250, 7, 7))), 7, 7).shape == (250, 1, 1)
    assert T.avgpool2d(Tensor(np.zeros((512, 7, 7))), 7, 7).shape == (512, 1, 1)


def test_avgpool_all_ones():
    assert T.avgpool2d(Tensor(np.ones((1, 7, 7))), 7, 7).data.item() == 1.0


# -- elementwise -----------------------------------------------------------

def test_relu_values():
    assert T.relu(Tensor([-1.0, 2.0])).data.tolist() == [0.0, 2.0]


def test_scale_multiplies_every_element():
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(T.scale(Tensor(x), 0.7).data, x * 0.7)


def test_add_unequal_shapes_rejected():
    with pytest.raises(DimensionError):
        T.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


def test_batchnorm_zero_variance_channel():
    x = Tensor(np.full((2, 1, 3, 3), 5.0))
    out = T.batchnorm(x, Tensor([1.0]), Tensor([0.0]), np.zeros(1), np.ones(1), training=True)
    np.testing.assert_array_equal(out.data, 0.0)


def test_batchnorm_running_stats_and_eval():
    rng = np.random.default_rng(0)
    x = rng.normal(2.0, 3.0, size=(4, 2, 3, 3))
    rm, rv = np.zeros(2), np.ones(2)
    T.batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True, momentum=1.0)
    np.testing.assert_allclose(rm, x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, x.var(axis=(0, 2, 3), ddof=1))
    out = T.batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=False, eps=0.0)
    np.testing.assert_allclose(out.data, (x - rm[None, :, None, None]) / np.sqrt(rv)[None, :, None, None])


# -- cross-entropy ---------------------------------------------------------

def test_cross_entropy_uniform_250():
    loss = T.softmax_cross_entropy(Tensor(np.zeros(250)), 17)
    assert loss.item() == pytest.approx(math.log(250), rel=1e-14)
    assert loss.item() == pytest.approx(5.5215, abs=1e-4)


def test_cross_entropy_dominant_class():
    logits = np.zeros(10)
    logits[3] = 800.0
    assert T.softmax_cross_entropy(Tensor(logits), 3).item() == pytest.approx(0.0, abs=1e-300)


def test_cross_entropy_gradient_is_softmax_minus_one_hot():
    z = np.random.default_rng(1).normal(size=10)
    t = Tensor(z, requires_grad=True)
    T.softmax_cross_entropy(t, 4).backward()
    expected = np.exp(z) / np.exp(z).sum()
    expected[4] -= 1.0
    np.testing.assert_allclose(t.grad, expected, rtol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_cross_entropy_finite_differences(seed):
    z = np.random.default_rng(seed).normal(size=(1, 10))
    res = check("ce", lambda t: T.softmax_cross_entropy(t[0], [seed % 10]), [z], seed)
    assert res.max_rel_error <= 1e-4


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        T.softmax_cross_entropy(Tensor(np.zeros(5)), 5)


# -- backward --------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)), requires_grad=True)
    T.tsum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_squared_norm():
    x = Tensor([1.0, 2.0], requires_grad=True)
    T.tsum(T.mul(x, x)).backward()
    assert x.grad.tolist() == [2.0, 4.0]


def test_backward_twice_raises():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = T.tsum(T.mul(x, x))
    loss.backward()
    with pytest.raises(RuntimeError):
        loss.backward()


def test_backward_non_scalar_raises():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        T.mul(x, x).backward()


def test_grad_has_same_length_as_values():
    x = Tensor(np.ones((3, 4)), requires_grad=True)
    T.tsum(T.relu(x)).backward()
    assert x.grad.reshape(-1).shape == x.values.shape


def test_composite_conv_relu_pool_ce_finite_differences():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 2, 6, 6))
    w = rng.normal(size=(4, 2, 3, 3))

    def build(t):
        h = T.maxpool2d(T.relu(T.conv2d(t[0], t[1], padding=1)), 2, 2)
        logits = T.reshape(T.avgpool2d(h, 3, 3), (1, 4))
        return T.softmax_cross_entropy(logits, [2])

    assert check("composite", build, [x, w], 3).max_rel_error <= 1e-3


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_backward_linearity(seed, a, b):
    rng = np.random.default_rng(seed)
    w0 = rng.normal(size=(3, 2, 3, 3))
    x = Tensor(rng.normal(size=(2, 2, 5, 5)))
    r = Tensor(rng.normal(size=(2, 3, 5, 5)))

    def grads(ca, cb):
        w = Tensor(w0, requires_grad=True)
        out = T.conv2d(x, w, padding=1)
        l1 = T.tsum(T.mul(out, r))
        l2 = T.tsum(T.mul(out, out))
        T.add(T.scale(l1, ca), T.scale(l2, cb)).backward()
        return w.grad

    combined = grads(a, b)
    np.testing.assert_allclose(combined, a * grads(1.0, 0.0) + b * grads(0.0, 1.0), rtol=1e-9, atol=1e-9)


def test_forward_is_deterministic():
    rng = np.random.default_rng(5)
    x, w = rng.normal(size=(2, 3, 9, 9)), rng.normal(size=(4, 3, 3, 3))
    a = T.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
    b = T.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
    assert np.array_equal(a, b)


def test_no_grad_builds_no_graph():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad


def test_intermediate_grad_retained_on_request():
    x = Tensor([1.0, -2.0], requires_grad=True)
    h = T.scale(x, 3.0).retain_grad()
    T.tsum(T.mul(h, h)).backward()
    np.testing.assert_array_equal(h.grad, 2 * 3.0 * np.array([1.0, -2.0]))


def test_numerical_grad_helper_quadratic():
    x = np.array([1.0, -2.0, 0.5])
    g = numerical_grad(lambda: float(np.sum(x ** 2)), x)
    assert rel_error(g, 2 * x).max() < 1e-9


@pytest.mark.parametrize("training,relu", [(True, True), (True, False), (False, True)])
def test_fused_conv_norm_matches_chained_ops(training, relu):
    rng = np.random.default_rng(11)
    data = [rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4), rng.normal(size=4)]
    stats = [rng.normal(size=4), rng.uniform(0.5, 2.0, size=4)]
    results = []
    for fused in (True, False):
        leaves = [Tensor(d, requires_grad=True) for d in data]
        rm, rv = stats[0].copy(), stats[1].copy()
        if fused:
            y = T.conv_norm(*leaves, rm, rv, training, stride=2, padding=1, relu_out=relu)
        else:
            y = T.batchnorm(T.conv2d(leaves[0], leaves[1], None, 2, 1), leaves[2], leaves[3], rm, rv, training)
            y = T.relu(y) if relu else y
        T.tsum(T.mul(y, Tensor(np.linspace(-1, 1, y.data.size).reshape(y.shape)))).backward()
        results.append((y.data, [t.grad for t in leaves], rm, rv))
    (ya, ga, rma, rva), (yb, gb, rmb, rvb) = results
    np.testing.assert_allclose(ya, yb, rtol=1e-12, atol=1e-12)
    for a, b in zip(ga, gb):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)
    # running statistics move once, during forward only
    np.testing.assert_array_equal(rma, rmb)
    np.testing.assert_array_equal(rva, rvb)
