"""Tensor kernels against loop-level oracles and pinned examples."""
import math

import numpy as np
import pytest

from casvit import ops
from casvit.tensor import ConfigError, ConvSpec, ShapeError, Tensor

from _oracles import (avg_pool2d_loops, batchnorm_two_pass, conv2d_loops,
                      global_avg_pool_loops, matmul_loops, softmax_loops)

F64 = np.float64


def T(a, dtype=F64):
    return Tensor(np.asarray(a), dtype=dtype)


class TestTensor:
    def test_creation_and_layout(self):
        t = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert t.shape == (2, 2)
        assert t.dtype == np.float64
        assert t.data.flags["C_CONTIGUOUS"]
        assert t.size == 4

    def test_dtype_discipline(self):
        assert Tensor(np.ones(3, dtype=np.float32)).dtype == np.float32
        assert Tensor([1, 2, 3]).dtype == np.float64
        with pytest.raises(ConfigError):
            Tensor(np.ones(3), dtype=np.int32)

    def test_astype_roundtrip(self):
        t = Tensor(np.arange(4.0))
        assert t.astype(np.float32).dtype == np.float32


class TestConvSpec:
    def test_out_extent(self):
        spec = ConvSpec(kernel=(3, 3), stride=(2, 2), padding=(1, 1))
        assert spec.out_extent(224, 224) == (112, 112)
        assert spec.out_extent(32, 32) == (16, 16)

    def test_rejects_bad_geometry(self):
        with pytest.raises(ConfigError):
            ConvSpec(kernel=(0, 3))
        with pytest.raises(ConfigError):
            ConvSpec(kernel=(3, 3), groups=0)
        with pytest.raises(ConfigError):
            ConvSpec(kernel=(3, 3), pad_mode="mirror")
        with pytest.raises(ShapeError):
            ConvSpec(kernel=(5, 5)).out_extent(3, 3)


class TestConv2d:
    def test_all_ones_pinned_example(self):
        x = T(np.ones((1, 1, 3, 3)))
        w = T(np.ones((1, 1, 3, 3)))
        y = ops.conv2d(x, w, spec=ConvSpec(kernel=(3, 3), padding=(1, 1)))
        assert y.data[0, 0, 1, 1] == 9.0
        for r, s in [(0, 0), (0, 2), (2, 0), (2, 2)]:
            assert y.data[0, 0, r, s] == 4.0

    @pytest.mark.parametrize("geom", [
        dict(b=2, cin=3, cout=4, h=6, w=7, k=(3, 3), s=(1, 1), p=(1, 1), g=1),
        dict(b=1, cin=3, cout=5, h=8, w=8, k=(3, 3), s=(2, 2), p=(1, 1), g=1),
        dict(b=2, cin=4, cout=4, h=5, w=6, k=(3, 3), s=(1, 1), p=(1, 1), g=4),
        dict(b=1, cin=6, cout=6, h=7, w=5, k=(3, 3), s=(2, 2), p=(1, 1), g=6),
        dict(b=2, cin=4, cout=6, h=6, w=6, k=(1, 1), s=(1, 1), p=(0, 0), g=2),
        dict(b=1, cin=5, cout=1, h=4, w=4, k=(1, 1), s=(1, 1), p=(0, 0), g=1),
        dict(b=1, cin=2, cout=3, h=9, w=9, k=(5, 5), s=(3, 3), p=(2, 2), g=1),
    ])
    def test_matches_loop_oracle(self, rng, geom):
        x = rng.standard_normal((geom["b"], geom["cin"], geom["h"], geom["w"]))
        w = rng.standard_normal((geom["cout"], geom["cin"] // geom["g"], *geom["k"]))
        b = rng.standard_normal(geom["cout"])
        spec = ConvSpec(kernel=geom["k"], stride=geom["s"], padding=geom["p"], groups=geom["g"])
        y = ops.conv2d(T(x), T(w), T(b), spec=spec)
        ref = conv2d_loops(x, w, b, geom["s"], geom["p"], geom["g"])
        np.testing.assert_allclose(y.data, ref, rtol=1e-12, atol=1e-12)

    def test_circular_matches_loop_oracle(self, rng):
        x = rng.standard_normal((2, 3, 5, 6))
        w = rng.standard_normal((4, 3, 3, 3))
        spec = ConvSpec(kernel=(3, 3), padding=(1, 1), pad_mode="circular")
        y = ops.conv2d(T(x), T(w), spec=spec)
        ref = conv2d_loops(x, w, None, (1, 1), (1, 1), 1, pad_mode="circular")
        np.testing.assert_allclose(y.data, ref, rtol=1e-12, atol=1e-12)

    def test_circular_shift_equivariance(self, rng):
        x = rng.standard_normal((1, 4, 8, 8))
        w = rng.standard_normal((4, 1, 3, 3))
        spec = ConvSpec(kernel=(3, 3), padding=(1, 1), groups=4, pad_mode="circular")
        y = ops.conv2d(T(x), T(w), spec=spec).data
        xs = np.roll(x, (3, 5), axis=(2, 3))
        ys = ops.conv2d(T(xs), T(w), spec=spec).data
        np.testing.assert_allclose(ys, np.roll(y, (3, 5), axis=(2, 3)), atol=1e-12)

    def test_shape_errors(self, rng):
        x = T(rng.standard_normal((1, 3, 4, 4)))
        w = T(rng.standard_normal((2, 4, 3, 3)))
        with pytest.raises(ShapeError):
            ops.conv2d(x, w, spec=ConvSpec(kernel=(3, 3), padding=(1, 1)))
        with pytest.raises(ConfigError):
            ops.conv2d(x, T(rng.standard_normal((2, 3, 3, 3))),
                       spec=ConvSpec(kernel=(3, 3), padding=(1, 1), groups=2))

    def test_output_shape_is_function_of_spec(self, rng):
        for _ in range(25):
            h, w = rng.integers(3, 12, size=2)
            k = int(rng.integers(1, min(h, w) + 1))
            s = int(rng.integers(1, 3))
            p = int(rng.integers(0, 2))
            if (h + 2 * p - k) < 0 or (w + 2 * p - k) < 0:
                continue
            spec = ConvSpec(kernel=(k, k), stride=(s, s), padding=(p, p))
            x = T(rng.standard_normal((1, 2, h, w)))
            wt = T(rng.standard_normal((3, 2, k, k)))
            y = ops.conv2d(x, wt, spec=spec)
            assert y.shape == (1, 3, *spec.out_extent(int(h), int(w)))

    def test_dtype_preserved_and_deterministic(self, rng):
        x32 = T(rng.standard_normal((2, 3, 6, 6)), dtype=np.float32)
        w32 = T(rng.standard_normal((4, 3, 3, 3)), dtype=np.float32)
        spec = ConvSpec(kernel=(3, 3), padding=(1, 1))
        y1 = ops.conv2d(x32, w32, spec=spec)
        y2 = ops.conv2d(x32, w32, spec=spec)
        assert y1.dtype == np.float32
        assert np.array_equal(y1.data, y2.data)


class TestPooling:
    def test_global_avg_pool_pinned_example(self):
        x = T(np.array([[[[1.0, 3.0], [5.0, 7.0]]]]))
        y = ops.global_avg_pool(x)
        assert y.shape == (1, 1, 1, 1)
        assert y.data[0, 0, 0, 0] == 4.0

    def test_global_avg_pool_matches_oracle(self, rng):
        x = rng.standard_normal((2, 5, 4, 6))
        np.testing.assert_allclose(ops.global_avg_pool(T(x)).data,
                                   global_avg_pool_loops(x), atol=1e-12)

    def test_avg_pool_constant_input(self):
        x = T(np.full((1, 2, 5, 5), 3.25))
        y = ops.avg_pool2d(x, kernel=3)
        np.testing.assert_allclose(y.data, 3.25, atol=0)

    @pytest.mark.parametrize("k,s", [(3, 1), (2, 2), (3, 2)])
    def test_avg_pool_matches_oracle(self, rng, k, s):
        x = rng.standard_normal((2, 3, 7, 6))
        y = ops.avg_pool2d(T(x), kernel=k, stride=s)
        ref = avg_pool2d_loops(x, k, stride=s)
        np.testing.assert_allclose(y.data, ref, rtol=1e-12, atol=1e-12)

    def test_avg_pool_circular_matches_oracle(self, rng):
        x = rng.standard_normal((1, 2, 5, 5))
        y = ops.avg_pool2d(T(x), kernel=3, pad_mode="circular")
        ref = avg_pool2d_loops(x, 3, pad_mode="circular")
        np.testing.assert_allclose(y.data, ref, rtol=1e-12, atol=1e-12)


class TestBatchNorm:
    def _buffers(self, c):
        return Tensor(np.zeros(c)), Tensor(np.ones(c))

    def test_eval_identity_with_fresh_stats(self, rng):
        x = rng.standard_normal((2, 4, 5, 5))
        rm, rv = self._buffers(4)
        y = ops.batchnorm2d(T(x), T(np.ones(4)), T(np.zeros(4)), rm, rv, training=False)
        np.testing.assert_allclose(y.data, x, atol=1e-4)

    def test_train_normalizes_batch(self, rng):
        x = rng.standard_normal((4, 3, 6, 6)) * 3.0 + 1.5
        rm, rv = self._buffers(3)
        y = ops.batchnorm2d(T(x), T(np.ones(3)), T(np.zeros(3)), rm, rv, training=True)
        assert np.abs(y.data.mean(axis=(0, 2, 3))).max() < 1e-10
        np.testing.assert_allclose(y.data.var(axis=(0, 2, 3)), 1.0, atol=1e-4)

    def test_train_matches_two_pass_oracle(self, rng):
        x = rng.standard_normal((3, 4, 5, 5))
        gamma = rng.standard_normal(4)
        beta = rng.standard_normal(4)
        rm, rv = self._buffers(4)
        y = ops.batchnorm2d(T(x), T(gamma), T(beta), rm, rv, training=True)
        ref = batchnorm_two_pass(x, gamma, beta)
        np.testing.assert_allclose(y.data, ref, rtol=1e-10, atol=1e-10)

    def test_running_stats_ema(self, rng):
        x = rng.standard_normal((8, 2, 4, 4)) * 2.0 + 0.5
        rm, rv = self._buffers(2)
        ops.batchnorm2d(T(x), T(np.ones(2)), T(np.zeros(2)), rm, rv,
                        training=True, momentum=0.1)
        np.testing.assert_allclose(rm.data, 0.1 * x.mean(axis=(0, 2, 3)), atol=1e-12)
        np.testing.assert_allclose(rv.data, 0.9 + 0.1 * x.var(axis=(0, 2, 3)), atol=1e-12)

    def test_eval_does_not_touch_buffers(self, rng):
        x = rng.standard_normal((2, 2, 3, 3))
        rm, rv = self._buffers(2)
        before = (rm.data.copy(), rv.data.copy())
        ops.batchnorm2d(T(x), T(np.ones(2)), T(np.zeros(2)), rm, rv, training=False)
        assert np.array_equal(rm.data, before[0]) and np.array_equal(rv.data, before[1])


class TestActivations:
    def test_relu(self):
        y = ops.relu(T([-2.0, 0.0, 3.0]))
        np.testing.assert_array_equal(y.data, [0.0, 0.0, 3.0])

    def test_sigmoid_pinned_value(self):
        y = ops.sigmoid(T([math.log(3.0)]))
        np.testing.assert_allclose(y.data, [0.75], atol=1e-12)

    def test_gelu_exact_erf_values(self):
        y = ops.gelu(T([0.0, 10.0, -10.0]))
        assert y.data[0] == 0.0
        np.testing.assert_allclose(y.data[1], 10.0, atol=1e-6)
        np.testing.assert_allclose(y.data[2], 0.0, atol=1e-6)
        x = np.array([0.5])
        expected = 0.5 * x * (1 + math.erf(0.5 / math.sqrt(2)))
        np.testing.assert_allclose(ops.gelu(T(x)).data, expected, atol=1e-12)

    def test_no_nonfinite_from_finite_inputs(self, rng):
        x = rng.standard_normal((3, 4, 5, 5)) * 50
        for kind in ("relu", "sigmoid", "gelu"):
            assert np.isfinite(ops.activation(T(x), kind).data).all()


class TestLinearAlgebra:
    def test_matmul_pinned_example(self):
        y = ops.matmul(T([[1.0, 2.0], [3.0, 4.0]]), T([[5.0], [6.0]]))
        np.testing.assert_array_equal(y.data, [[17.0], [39.0]])

    def test_matmul_matches_loop_oracle(self, rng):
        a = rng.standard_normal((2, 5, 4))
        b = rng.standard_normal((4, 6))
        np.testing.assert_allclose(ops.matmul(T(a), T(b)).data,
                                   matmul_loops(a, b), rtol=1e-12, atol=1e-12)

    def test_matmul_shape_error(self, rng):
        with pytest.raises(ShapeError):
            ops.matmul(T(rng.standard_normal((2, 3))), T(rng.standard_normal((4, 2))))

    def test_softmax_pinned_example(self):
        y = ops.softmax(T([[0.0, math.log(3.0)]]))
        np.testing.assert_allclose(y.data, [[0.25, 0.75]], atol=1e-12)

    def test_softmax_properties(self, rng):
        x = rng.standard_normal((3, 7)) * 10
        y = ops.softmax(T(x)).data
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
        shifted = ops.softmax(T(x + 123.0)).data
        np.testing.assert_allclose(y, shifted, atol=1e-12)
        np.testing.assert_allclose(ops.softmax(T(x)).data, softmax_loops(x), atol=1e-12)

    def test_l2_normalize(self, rng):
        x = rng.standard_normal((4, 6))
        y = ops.l2_normalize(T(x)).data
        np.testing.assert_allclose((y ** 2).sum(axis=-1), 1.0, atol=1e-12)
        z = ops.l2_normalize(T(np.zeros((2, 3)))).data
        assert np.isfinite(z).all() and np.array_equal(z, np.zeros((2, 3)))


class TestElementwise:
    def test_add_mul_broadcast(self, rng):
        a = rng.standard_normal((2, 3, 4, 4))
        b = rng.standard_normal((1, 3, 1, 1))
        np.testing.assert_allclose(ops.add(T(a), T(b)).data, a + b)
        np.testing.assert_allclose(ops.mul(T(a), T(b)).data, a * b)
        with pytest.raises(ShapeError):
            ops.add(T(np.zeros((2, 3))), T(np.zeros((4,))))

    def test_scale_and_sums(self, rng):
        x = rng.standard_normal((3, 4))
        np.testing.assert_allclose(ops.scale(T(x), -2.0).data, -2.0 * x)
        np.testing.assert_allclose(ops.sum_all(T(x)).item(), x.sum())
        np.testing.assert_allclose(ops.sum_axis(T(x), 1).data, x.sum(1, keepdims=True))

    def test_reshape_swapaxes(self, rng):
        x = rng.standard_normal((2, 3, 4))
        assert ops.reshape(T(x), (6, 4)).shape == (6, 4)
        np.testing.assert_array_equal(ops.swapaxes(T(x), 1, 2).data, x.swapaxes(1, 2))


class TestCrossEntropy:
    def test_uniform_logits(self):
        logits = np.zeros((4, 5))
        loss = ops.cross_entropy(T(logits), np.zeros(4, dtype=int))
        np.testing.assert_allclose(loss.item(), math.log(5.0), atol=1e-12)

    def test_confident_correct_prediction(self):
        logits = np.full((2, 3), -50.0)
        logits[0, 1] = 50.0
        logits[1, 2] = 50.0
        loss = ops.cross_entropy(T(logits), np.array([1, 2]))
        assert loss.item() < 1e-6

    def test_label_smoothing_shifts_optimum(self):
        logits = np.full((1, 4), -30.0)
        logits[0, 0] = 30.0
        plain = ops.cross_entropy(T(logits), np.array([0]), smoothing=0.0).item()
        smooth = ops.cross_entropy(T(logits), np.array([0]), smoothing=0.1).item()
        assert smooth > plain

    def test_label_range_checked(self):
        with pytest.raises(ShapeError):
            ops.cross_entropy(T(np.zeros((2, 3))), np.array([0, 3]))
