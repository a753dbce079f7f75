import numpy as np
import pytest

from inceptkit import nnops
from inceptkit.nnops import BatchNormAttrs, ConvAttrs, PoolAttrs
from inceptkit.tensor import Prng


def conv(x, w, b=None, stride=1, padding="valid"):
    return nnops.conv2d_forward(x, w, b, ConvAttrs(w.shape[0], w.shape[1], stride, padding, w.shape[3], b is not None))


def test_pointwise_conv_scales():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
    y, _ = conv(x, np.full((1, 1, 1, 1), 2.0))
    assert y.reshape(2, 2).tolist() == [[2, 4], [6, 8]]


def test_window_sum():
    y, _ = conv(np.ones((1, 3, 3, 1)), np.ones((3, 3, 1, 1)))
    assert y.shape == (1, 1, 1, 1) and y.item() == 9


@pytest.mark.parametrize("stride,padding", [(1, "valid"), (2, "valid"), (1, "same"), (2, "same"), (3, "same")])
@pytest.mark.parametrize("kh,kw", [(3, 3), (1, 3), (3, 1), (2, 2), (5, 5)])
def test_conv_matches_naive_loop(kh, kw, stride, padding):
    p = Prng(kh * 10 + kw)
    x = p.normal((2, 7, 6, 3))
    w = p.normal((kh, kw, 3, 4))
    b = p.normal((4,))
    y, _ = conv(x, w, b, stride, padding)
    ref = nnops.conv2d_naive(x, w, b, stride, padding)
    assert y.shape == ref.shape
    np.testing.assert_allclose(y, ref, atol=1e-12, rtol=0)


def test_same_padding_is_tf_style():
    assert nnops.out_size(35, 3, 2, "same") == 18
    assert nnops.pad_amounts(6, 2, 1, "same") == (0, 1)
    assert nnops.pad_amounts(7, 3, 2, "same") == (1, 1)
    assert nnops.out_size(299, 3, 2, "valid") == 149
    with pytest.raises(ValueError):
        nnops.out_size(2, 3, 1, "valid")


def test_conv_backward_zero_and_pointwise():
    p = Prng(2)
    x = p.normal((2, 4, 4, 3))
    w = p.normal((1, 1, 3, 2))
    y, cache = conv(x, w)
    attrs = ConvAttrs(1, 1, 1, "valid", 2)
    dx, dw, db = nnops.conv2d_backward(np.zeros_like(y), cache, attrs)
    assert not dx.any() and not dw.any() and db is None
    g = p.normal(y.shape)
    _, dw, _ = nnops.conv2d_backward(g, cache, attrs)
    np.testing.assert_allclose(dw[0, 0], np.einsum("bhwi,bhwo->io", x, g), atol=1e-12)


def test_pool_shapes_and_values():
    x = np.zeros((1, 147, 147, 64))
    y, _ = nnops.pool2d_forward(x, PoolAttrs(3, 3, 2, "max"))
    assert y.shape == (1, 73, 73, 64)
    a = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
    y, _ = nnops.pool2d_forward(a, PoolAttrs(2, 2, 2, "avg"))
    assert y.item() == 2.5
    y, _ = nnops.global_avg_pool_forward(np.ones((2, 8, 8, 2048)))
    assert y.shape == (2, 1, 1, 2048)


def test_avg_same_excludes_padding():
    x = np.ones((1, 3, 3, 1))
    y, _ = nnops.pool2d_forward(x, PoolAttrs(3, 3, 1, "avg", "same"))
    assert np.allclose(y, 1.0)


def test_max_pool_ties_go_to_first_index_and_mass_is_conserved():
    x = np.ones((1, 2, 2, 1))
    y, cache = nnops.pool2d_forward(x, PoolAttrs(2, 2, 2, "max"))
    dx = nnops.pool2d_backward(np.ones_like(y), cache, PoolAttrs(2, 2, 2, "max"))
    assert dx.reshape(-1).tolist() == [1, 0, 0, 0]
    p = Prng(4)
    x = p.normal((2, 7, 7, 3))
    attrs = PoolAttrs(3, 3, 2, "max")
    y, cache = nnops.pool2d_forward(x, attrs)
    g = p.normal(y.shape)
    assert np.isclose(nnops.pool2d_backward(g, cache, attrs).sum(), g.sum())


def test_batchnorm_train_statistics():
    p = Prng(5)
    x = p.normal((8, 4, 4, 3), mean=3.0, std=2.0)
    state = {"moving_mean": np.zeros(3), "moving_var": np.ones(3)}
    y, _ = nnops.batchnorm_forward(x, np.ones(3), np.zeros(3), state, BatchNormAttrs(), True)
    assert np.abs(y.mean(axis=(0, 1, 2))).max() < 1e-6
    var = x.var(axis=(0, 1, 2))
    assert np.allclose(y.var(axis=(0, 1, 2)), var / (var + 1e-3), atol=1e-5)


def test_batchnorm_constant_channel_gives_zero():
    state = {"moving_mean": np.zeros(1), "moving_var": np.ones(1)}
    y, _ = nnops.batchnorm_forward(np.full((4, 2, 2, 1), 5.0), np.ones(1), np.zeros(1), state, BatchNormAttrs(), True)
    assert np.abs(y).max() == 0


def test_batchnorm_moving_stats_converge_geometrically():
    x = Prng(6).normal((4, 3, 3, 2), mean=2.0)
    state = {"moving_mean": np.zeros(2), "moving_var": np.ones(2)}
    attrs = BatchNormAttrs()
    n = 50
    for _ in range(n):
        nnops.batchnorm_forward(x, np.ones(2), np.zeros(2), state, attrs, True)
    mean = x.mean(axis=(0, 1, 2))
    np.testing.assert_allclose(mean - state["moving_mean"], attrs.momentum**n * mean, atol=1e-12)


def test_batchnorm_needs_two_examples_in_training():
    state = {"moving_mean": np.zeros(1), "moving_var": np.ones(1)}
    with pytest.raises(ValueError):
        nnops.batchnorm_forward(np.ones((1, 2, 2, 1)), np.ones(1), np.zeros(1), state, BatchNormAttrs(), True)


def test_batchnorm_inference_is_affine():
    p = Prng(7)
    state = {"moving_mean": p.normal((3,)), "moving_var": p.uniform((3,), 0.5, 2.0)}
    gamma, beta = p.normal((3,)), p.normal((3,))

    def f(x):
        return nnops.batchnorm_forward(x, gamma, beta, state, BatchNormAttrs(), False)[0]

    a, b = p.normal((2, 3, 3, 3)), p.normal((2, 3, 3, 3))
    np.testing.assert_allclose(f(a) + f(b) - f(np.zeros_like(a)), f(a + b), atol=1e-10)


def test_relu_and_concat():
    y, _ = nnops.relu_forward(np.array([-1.0, 2.0]))
    assert y.tolist() == [0, 2]
    assert np.array_equal(nnops.relu_forward(y)[0], y)
    c, _ = nnops.concat_forward([np.zeros((1, 8, 8, 320)), np.zeros((1, 8, 8, 768))])
    assert c.shape == (1, 8, 8, 1088)


def test_softmax_xent_values():
    loss, probs, _ = nnops.softmax_xent_forward(np.zeros((1, 4)), np.eye(4)[[2]])
    assert abs(loss - np.log(4)) < 1e-12
    z = Prng(8).normal((3, 5))
    q = np.eye(5)[[0, 3, 4]]
    l1, p1, _ = nnops.softmax_xent_forward(z, q)
    l2, p2, _ = nnops.softmax_xent_forward(z + 7.5, q)
    assert abs(l1 - l2) < 1e-12 and np.allclose(p1, p2)
    g = nnops.softmax_xent_backward(1.0, p1, q) * 3
    np.testing.assert_allclose(g, p1 - q, atol=1e-15)


def test_softmax_rows_sum_to_one():
    z = Prng(10).uniform((50, 12), -100, 100)
    p = np.exp(nnops.log_softmax(z))
    assert np.abs(p.sum(axis=1) - 1).max() < 1e-12


def test_injected_fault_changes_conv_gradient():
    p = Prng(11)
    x, w = p.normal((1, 5, 5, 1)), p.normal((3, 3, 1, 1))
    y, cache = conv(x, w)
    attrs = ConvAttrs(3, 3, 1, "valid", 1)
    good = nnops.conv2d_backward(np.ones_like(y), cache, attrs)[0]
    with nnops.inject_fault("conv_stride"):
        bad = nnops.conv2d_backward(np.ones_like(y), cache, attrs)[0]
    assert not np.allclose(good, bad)
