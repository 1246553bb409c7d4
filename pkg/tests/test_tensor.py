"""Core op contracts: frozen hand values, gradients vs finite differences."""

import numpy as np
import pytest

from adapterforge.errors import ShapeError, StateError
from adapterforge.tensor import (
    BatchNormParams,
    ConvParams,
    Tensor,
    add,
    backward,
    batchnorm_forward,
    concat_channels,
    conv2d_forward,
    make_bn,
    maxpool2x2,
    reduce_sum,
    relu,
    upsample_nearest2x,
)

from util import check_grads, rand_arrays


def _conv(weight, bias=None, stride=1, padding=0):
    return ConvParams(
        weight=Tensor(np.asarray(weight, np.float32), requires_grad=True),
        bias=None if bias is None else Tensor(np.asarray(bias, np.float32), requires_grad=True),
        stride=stride, padding=padding)


class TestConvForward:
    def test_hand_convolution_center(self):
        # 3x3 ramp input, all-ones 3x3 kernel, padding 1: centre = 1+2+...+9
        x = Tensor(np.arange(1, 10, dtype=np.float32).reshape(1, 1, 3, 3))
        p = _conv(np.ones((1, 1, 3, 3)), padding=1)
        y = conv2d_forward(x, p)
        assert y.shape == (1, 1, 3, 3)
        assert y.data[0, 0, 1, 1] == 45.0

    def test_zero_weight_gives_zero_output(self):
        x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 8, 8)).astype(np.float32))
        p = _conv(np.zeros((4, 3, 3, 3)), padding=1)
        assert np.all(conv2d_forward(x, p).data == 0)

    def test_identity_1x1(self):
        x = Tensor(np.random.default_rng(1).standard_normal((2, 4, 6, 6)).astype(np.float32))
        p = _conv(np.eye(4, dtype=np.float32).reshape(4, 4, 1, 1))
        assert np.array_equal(conv2d_forward(x, p).data, x.data)

    def test_output_shape_formula(self):
        x = Tensor(np.zeros((1, 2, 9, 9), np.float32))
        p = _conv(np.zeros((5, 2, 3, 3)), stride=2, padding=1)
        y = conv2d_forward(x, p)
        assert y.shape == (1, 5, (9 + 2 - 3) // 2 + 1, (9 + 2 - 3) // 2 + 1)

    def test_channel_mismatch_raises(self):
        x = Tensor(np.zeros((1, 2, 4, 4), np.float32))
        with pytest.raises(ShapeError):
            conv2d_forward(x, _conv(np.zeros((1, 3, 3, 3)), padding=1))

    def test_linearity(self):
        rng = np.random.default_rng(2)
        xa = rng.standard_normal((1, 3, 7, 7)).astype(np.float32)
        xb = rng.standard_normal((1, 3, 7, 7)).astype(np.float32)
        p = _conv(rng.standard_normal((4, 3, 3, 3)).astype(np.float32), padding=1)
        a, b = 1.7, -0.6
        lhs = conv2d_forward(Tensor(a * xa + b * xb), p).data
        rhs = a * conv2d_forward(Tensor(xa), p).data + b * conv2d_forward(Tensor(xb), p).data
        assert np.allclose(lhs, rhs, rtol=1e-5, atol=1e-4)

    def test_determinism(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        p = _conv(rng.standard_normal((4, 3, 3, 3)).astype(np.float32), padding=1)
        y1 = conv2d_forward(Tensor(x), p).data
        y2 = conv2d_forward(Tensor(x), p).data
        assert np.array_equal(y1, y2)


class TestBatchNorm:
    def test_hand_eval_value(self):
        # x=2, mu=1, var=1, gamma=3, beta=0.5 -> 3/sqrt(1+1e-5) + 0.5
        p = BatchNormParams(
            gamma=Tensor(np.array([3.0], np.float32)),
            beta=Tensor(np.array([0.5], np.float32)),
            running_mean=np.array([1.0], np.float32),
            running_var=np.array([1.0], np.float32))
        y = batchnorm_forward(Tensor(np.full((1, 1, 1, 1), 2.0, np.float32)), p, training=False)
        assert abs(float(y.data) - 3.49998) < 1e-4

    def test_identity_parameters(self):
        p = BatchNormParams(
            gamma=Tensor(np.ones(3, np.float32)),
            beta=Tensor(np.zeros(3, np.float32)),
            running_mean=np.zeros(3, np.float32),
            running_var=np.full(3, 1.0 - 1e-5, np.float32))
        x = np.random.default_rng(4).standard_normal((2, 3, 4, 4)).astype(np.float32)
        y = batchnorm_forward(Tensor(x), p, training=False)
        assert np.allclose(y.data, x, rtol=1e-6, atol=1e-6)

    def test_constant_input_train_mode_gives_beta(self):
        p = make_bn(2)
        p.beta.data = np.array([0.7, -1.2], np.float32)
        x = Tensor(np.full((3, 2, 4, 4), 5.0, np.float32))
        y = batchnorm_forward(x, p, training=True)
        assert np.allclose(y.data, p.beta.data[None, :, None, None], atol=1e-6)

    def test_running_stats_update(self):
        p = make_bn(1, momentum=0.1)
        x = Tensor(np.full((1, 1, 2, 2), 10.0, np.float32))
        batchnorm_forward(x, p, training=True)
        assert np.isclose(p.running_mean[0], 0.9 * 0.0 + 0.1 * 10.0)

    def test_eval_affine_property(self):
        rng = np.random.default_rng(5)
        p = BatchNormParams(
            gamma=Tensor(rng.standard_normal(3).astype(np.float32)),
            beta=Tensor(rng.standard_normal(3).astype(np.float32)),
            running_mean=rng.standard_normal(3).astype(np.float32),
            running_var=np.abs(rng.standard_normal(3)).astype(np.float32) + 0.5)
        x = rng.standard_normal((2, 3, 5, 5)).astype(np.float32)
        a = 2.5

        def bn(v):
            return batchnorm_forward(Tensor(v.astype(np.float32)), p, training=False).data

        zero = bn(np.zeros_like(x))
        assert np.allclose(bn(a * x) - zero, a * (bn(x) - zero), rtol=1e-4, atol=1e-4)

    def test_empty_batch_raises(self):
        p = make_bn(2)
        with pytest.raises(ShapeError):
            batchnorm_forward(Tensor(np.zeros((0, 2, 4, 4), np.float32)), p, training=True)


class TestElementwiseStructural:
    def test_relu(self):
        y = relu(Tensor(np.array([-1.0, 0.0, 2.0], np.float32).reshape(1, 1, 1, 3)))
        assert np.array_equal(y.data.ravel(), [0.0, 0.0, 2.0])

    def test_maxpool(self):
        y = maxpool2x2(Tensor(np.array([[1, 2], [3, 4]], np.float32).reshape(1, 1, 2, 2)))
        assert float(y.data) == 4.0

    def test_add_identity(self):
        x = Tensor(np.random.default_rng(6).standard_normal((1, 2, 4, 4)).astype(np.float32))
        y = add(x, Tensor(np.zeros_like(x.data)))
        assert np.array_equal(y.data, x.data)

    def test_upsample(self):
        x = Tensor(np.array([[1, 2], [3, 4]], np.float32).reshape(1, 1, 2, 2))
        y = upsample_nearest2x(x)
        assert np.array_equal(y.data[0, 0], [[1, 1, 2, 2], [1, 1, 2, 2],
                                             [3, 3, 4, 4], [3, 3, 4, 4]])

    def test_concat_shape_mismatch(self):
        a = Tensor(np.zeros((1, 2, 4, 4), np.float32))
        b = Tensor(np.zeros((1, 2, 4, 6), np.float32))
        with pytest.raises(ShapeError):
            concat_channels([a, b])


class TestBackward:
    def test_conv_weight_grad_sum_of_patches(self):
        # All-ones input, single-weight kernel: dloss/dw = number of positions
        # the weight touches.  Oracle: central finite differences, step 1e-3.
        x = np.ones((1, 1, 4, 4), np.float32)
        w = Tensor(np.array([[[[0.5]]]], np.float32), requires_grad=True)
        p = ConvParams(weight=w)
        loss = reduce_sum(conv2d_forward(Tensor(x), p))
        backward(loss)
        h = 1e-3
        num = []
        for delta in (h, -h):
            p2 = _conv(np.array([[[[0.5 + delta]]]], np.float32))
            num.append(float(reduce_sum(conv2d_forward(Tensor(x), p2)).data))
        fd = (num[0] - num[1]) / (2 * h)
        assert abs(float(w.grad) - 16.0) < 1e-3
        assert abs(float(w.grad) - fd) < 1e-2

    def test_frozen_params_get_no_grad(self):
        rng = np.random.default_rng(7)
        w = Tensor(rng.standard_normal((2, 1, 3, 3)).astype(np.float32), requires_grad=False)
        x = Tensor(rng.standard_normal((1, 1, 4, 4)).astype(np.float32), requires_grad=True)
        loss = reduce_sum(conv2d_forward(x, ConvParams(weight=w, padding=1)))
        backward(loss)
        assert w.grad is None
        assert x.grad is not None

    def test_constant_loss_zero_grads(self):
        x = Tensor(np.ones((1, 1, 2, 2), np.float32), requires_grad=True)
        loss = reduce_sum(conv2d_forward(x, _conv(np.zeros((1, 1, 1, 1)))))
        backward(loss)
        assert np.all(x.grad == 0)

    def test_backward_without_forward_raises(self):
        with pytest.raises(StateError):
            backward(Tensor(np.float32(1.0)))

    def test_backward_needs_scalar(self):
        x = Tensor(np.ones((1, 1, 2, 2), np.float32), requires_grad=True)
        y = relu(x)
        with pytest.raises(ShapeError):
            backward(y)


class TestGradcheck:
    """Analytic gradients vs central differences at f32 (rel err <= 1e-2)."""

    def test_conv_grads(self):
        arrays = rand_arrays({"x": (2, 3, 6, 6), "w": (4, 3, 3, 3), "b": (4,)}, seed=11)

        def make(t):
            p = ConvParams(weight=t["w"], bias=t["b"], stride=1, padding=1)
            return conv2d_forward(t["x"], p)

        check_grads(make, arrays, seed=11)

    def test_conv_stride2_grads(self):
        arrays = rand_arrays({"x": (1, 2, 8, 8), "w": (3, 2, 3, 3)}, seed=12)

        def make(t):
            return conv2d_forward(t["x"], ConvParams(weight=t["w"], stride=2, padding=1))

        check_grads(make, arrays, seed=12)

    def test_batchnorm_train_grads(self):
        arrays = rand_arrays({"x": (2, 3, 4, 4), "g": (3,), "b": (3,)}, seed=13)

        def make(t):
            p = BatchNormParams(gamma=t["g"], beta=t["b"],
                                running_mean=np.zeros(3, np.float32),
                                running_var=np.ones(3, np.float32))
            return batchnorm_forward(t["x"], p, training=True)

        check_grads(make, arrays, seed=13)

    def test_batchnorm_eval_grads(self):
        arrays = rand_arrays({"x": (2, 3, 4, 4), "g": (3,), "b": (3,)}, seed=14)
        mean = np.random.default_rng(14).standard_normal(3).astype(np.float32)
        var = np.abs(np.random.default_rng(15).standard_normal(3)).astype(np.float32) + 0.3

        def make(t):
            p = BatchNormParams(gamma=t["g"], beta=t["b"],
                                running_mean=mean.copy(), running_var=var.copy())
            return batchnorm_forward(t["x"], p, training=False)

        check_grads(make, arrays, seed=14)

    def test_pool_up_relu_chain_grads(self):
        arrays = rand_arrays({"x": (2, 2, 8, 8)}, seed=16)

        def make(t):
            return upsample_nearest2x(maxpool2x2(relu(t["x"])))

        check_grads(make, arrays, seed=16)

    def test_concat_add_grads(self):
        arrays = rand_arrays({"a": (1, 2, 4, 4), "b": (1, 3, 4, 4), "c": (1, 5, 4, 4)}, seed=17)

        def make(t):
            return add(concat_channels([t["a"], t["b"]]), t["c"])

        check_grads(make, arrays, seed=17)
