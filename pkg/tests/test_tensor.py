"""Unit tests for the reverse-mode autodiff core.

Expected values here are either worked by hand or come from the independent
finite-difference oracle in _gradcheck.py; nothing is copied from the
implementation under test.
"""

import numpy as np
import pytest

from cyclecast import tensor as T

from _gradcheck import check_grads, numeric_grad, max_rel_err


def rng(seed):
    return np.random.default_rng(seed)


class TestBasicOps:
    def test_add_mul_values(self):
        a = T.Tensor(np.array([1.0, 2.0]))
        b = T.Tensor(np.array([3.0, 4.0]))
        assert np.array_equal((a + b).data, [4.0, 6.0])
        assert np.array_equal((a * b).data, [3.0, 8.0])
        assert np.array_equal((a - b).data, [-2.0, -2.0])

    def test_multi_use_accumulation(self):
        # y = x*x + x -> dy/dx = 2x + 1; the same node feeds two ops.
        x = T.Tensor(np.array([3.0]), requires_grad=True, name="x")
        y = T.sum_(x * x + x)
        g = T.backward(y, {"x": x})
        assert np.allclose(g["x"], [7.0])

    def test_backward_rejects_nonscalar(self):
        x = T.Tensor(np.ones(3), requires_grad=True, name="x")
        with pytest.raises(ValueError):
            T.backward(x + x, {"x": x})

    def test_unreachable_param_gets_zeros(self):
        x = T.Tensor(np.ones(3), requires_grad=True, name="x")
        z = T.Tensor(np.ones(4), requires_grad=True, name="z")
        g = T.backward(T.sum_(x * x), {"x": x, "z": z})
        assert np.array_equal(g["z"], np.zeros(4))

    @pytest.mark.parametrize("seed", range(5))
    def test_broadcast_add_grad(self, seed):
        r = rng(seed)
        check_grads(lambda t: T.sum_(T.silu(t["a"] + t["b"])),
                    {"a": r.normal(size=(3, 4)), "b": r.normal(size=(4,))})

    def test_abs_grad_zero_at_zero(self):
        # subgradient convention sign(0) = 0
        x = T.Tensor(np.array([-2.0, 0.0, 3.0]), requires_grad=True, name="x")
        g = T.backward(T.sum_(T.abs_(x)), {"x": x})
        assert np.array_equal(g["x"], [-1.0, 0.0, 1.0])


class TestSilu:
    def test_value_and_slope_at_zero(self):
        # silu(0) = 0; silu'(0) = sigma(0) = 0.5
        x = T.Tensor(np.array([0.0]), requires_grad=True, name="x")
        y = T.silu(x)
        assert y.data[0] == 0.0
        g = T.backward(T.sum_(y), {"x": x})
        assert abs(g["x"][0] - 0.5) < 1e-12

    @pytest.mark.parametrize("seed", range(20))
    def test_grad(self, seed):
        r = rng(seed)
        check_grads(lambda t: T.sum_(T.silu(t["x"])),
                    {"x": r.normal(size=(2, 3, 4))})


class TestConv2d:
    def test_k2s2_hand_example(self):
        # all-ones 2x2 kernel, stride 2 on [[1,2],[3,4]] -> [[10]]
        x = T.Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        w = T.Tensor(np.ones((1, 1, 2, 2)))
        y = T.conv2d(x, w, None, stride=2, padding=0)
        assert y.data.shape == (1, 1, 1, 1)
        assert y.data[0, 0, 0, 0] == 10.0

    def test_padded_3x3_matches_naive(self):
        r = rng(1)
        x = r.normal(size=(2, 3, 5, 6))
        w = r.normal(size=(4, 3, 3, 3))
        b = r.normal(size=(4,))
        y = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride=1, padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros((2, 4, 5, 6))
        for n in range(2):
            for co in range(4):
                for i in range(5):
                    for j in range(6):
                        ref[n, co, i, j] = np.sum(xp[n, :, i:i + 3, j:j + 3] * w[co]) + b[co]
        assert np.allclose(y, ref, atol=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_grad(self, seed):
        r = rng(seed)
        stride = 1 if seed % 2 else 2
        pad = seed % 2
        k = 3 if stride == 1 else 2
        check_grads(
            lambda t: T.sum_(T.conv2d(t["x"], t["w"], t["b"], stride=stride, padding=pad)),
            {"x": r.normal(size=(1, 2, 4, 4)),
             "w": r.normal(size=(3, 2, k, k)),
             "b": r.normal(size=(3,))})


class TestLinear:
    @pytest.mark.parametrize("seed", range(20))
    def test_grad(self, seed):
        r = rng(seed)
        check_grads(lambda t: T.sum_(T.silu(T.matmul(t["x"], t["w"]) + t["b"])),
                    {"x": r.normal(size=(5, 3)),
                     "w": r.normal(size=(3, 4)),
                     "b": r.normal(size=(4,))})


class TestLayerNorm:
    def test_constant_rows_map_to_zero(self):
        # pre-affine output of a constant vector is exactly zero
        x = T.Tensor(np.full((2, 7), 3.25))
        g = T.Tensor(np.ones(7))
        b = T.Tensor(np.zeros(7))
        y = T.layer_norm(x, g, b, axis=-1)
        assert np.array_equal(y.data, np.zeros((2, 7)))

    def test_normalizes_mean_and_scale(self):
        r = rng(0)
        x = r.normal(size=(4, 16, 3, 5)) * 3.0 + 1.0
        y = T.layer_norm(T.Tensor(x), T.Tensor(np.ones(16)), T.Tensor(np.zeros(16)), axis=1).data
        assert np.allclose(y.mean(axis=1), 0.0, atol=1e-12)
        assert np.allclose(y.var(axis=1), 1.0, atol=1e-4)  # eps shifts variance slightly

    @pytest.mark.parametrize("seed", range(20))
    def test_grad(self, seed):
        r = rng(seed)
        axis = 1 if seed % 2 else -1
        shape = (2, 5, 3) if axis == 1 else (4, 5)
        n = 5
        check_grads(
            lambda t: T.sum_(T.abs_(T.layer_norm(t["x"], t["g"], t["b"], axis=axis))),
            {"x": r.normal(size=shape) * 2.0,
             "g": r.normal(size=(n,)),
             "b": r.normal(size=(n,))},
            tol=2e-5)


class TestPixelShuffle:
    def test_hand_permutation_r2(self):
        # channels [a,b,c,d] at one pixel -> 2x2 block [[a,b],[c,d]]
        x = np.arange(4.0).reshape(1, 4, 1, 1)
        y = T.pixel_shuffle(T.Tensor(x), 2).data
        assert y.shape == (1, 1, 2, 2)
        assert np.array_equal(y[0, 0], [[0.0, 1.0], [2.0, 3.0]])

    def test_index_law_random(self):
        r = rng(3)
        x = r.normal(size=(2, 2 * 9, 3, 4))
        y = T.pixel_shuffle(T.Tensor(x), 3).data
        for b in range(2):
            for c in range(2):
                for i in range(3):
                    for j in range(3):
                        for h in range(3):
                            for w in range(4):
                                assert y[b, c, h * 3 + i, w * 3 + j] == x[b, c * 9 + i * 3 + j, h, w]

    @pytest.mark.parametrize("seed", range(10))
    def test_roundtrip_bit_exact(self, seed):
        r = rng(seed)
        c = int(r.integers(1, 4))
        rr = int(r.integers(1, 5))
        h = int(r.integers(1, 6))
        w = int(r.integers(1, 6))
        x = r.normal(size=(1, c * rr * rr, h, w))
        y = T.pixel_unshuffle(T.pixel_shuffle(T.Tensor(x), rr), rr).data
        assert np.array_equal(y, x)
        x2 = r.normal(size=(1, c, h * rr, w * rr))
        z = T.pixel_shuffle(T.pixel_unshuffle(T.Tensor(x2), rr), rr).data
        assert np.array_equal(z, x2)

    @pytest.mark.parametrize("seed", range(20))
    def test_grad(self, seed):
        r = rng(seed)
        check_grads(lambda t: T.sum_(T.abs_(T.pixel_shuffle(t["x"], 2))),
                    {"x": r.normal(size=(1, 8, 2, 3))})


class TestConcat:
    @pytest.mark.parametrize("seed", range(20))
    def test_grad(self, seed):
        r = rng(seed)
        axis = seed % 3
        check_grads(
            lambda t: T.sum_(T.silu(T.concat([t["a"], t["b"]], axis=axis))),
            {"a": r.normal(size=(2, 3, 4)), "b": r.normal(size=(2, 3, 4))})

    def test_values(self):
        a = np.ones((1, 2, 2, 2))
        b = np.zeros((1, 3, 2, 2))
        y = T.concat([T.Tensor(a), T.Tensor(b)], axis=1).data
        assert y.shape == (1, 5, 2, 2)
        assert np.array_equal(y[:, :2], a) and np.array_equal(y[:, 2:], b)


class TestResize:
    def test_bilinear_rows_midpoints(self):
        # (C, H+1, W) -> (C, H, W); linear-in-row-index field -> exact midpoints
        H = 6
        col = np.arange(H + 1, dtype=np.float64)
        x = np.tile(col[None, :, None], (2, 1, 3))
        y = T.bilinear_resize_rows(T.Tensor(x), H).data
        want = np.tile((col[:-1] + 0.5)[None, :, None], (2, 1, 3))
        assert np.allclose(y, want, atol=1e-12)

    def test_bilinear_constant_preserved(self):
        x = np.full((1, 9, 4), 2.5)
        y = T.bilinear_resize_rows(T.Tensor(x), 8).data
        assert np.allclose(y, 2.5, atol=1e-15)

    @pytest.mark.parametrize("seed", range(20))
    def test_bilinear_grad(self, seed):
        r = rng(seed)
        check_grads(lambda t: T.sum_(T.abs_(T.bilinear_resize_rows(t["x"], 4))),
                    {"x": r.normal(size=(2, 5, 3))})

    def test_nearest_values(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        y = T.nearest_upsample(T.Tensor(x), 2).data
        want = np.array([[[[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]]], dtype=float)
        assert np.array_equal(y, want)

    @pytest.mark.parametrize("seed", range(20))
    def test_nearest_grad(self, seed):
        r = rng(seed)
        check_grads(lambda t: T.sum_(T.abs_(T.nearest_upsample(t["x"], 3))),
                    {"x": r.normal(size=(1, 2, 2, 3))})


class TestShapeOps:
    @pytest.mark.parametrize("seed", range(10))
    def test_reshape_transpose_grad(self, seed):
        r = rng(seed)
        check_grads(
            lambda t: T.sum_(T.abs_(T.transpose(T.reshape(t["x"], (3, 8)), (1, 0)))),
            {"x": r.normal(size=(2, 3, 4))})


class TestScatterMean:
    def test_duplicates_averaged(self):
        feats = np.array([[1.0, 10.0], [3.0, 30.0], [5.0, 50.0]])
        ids = np.array([2, 2, 0])
        out = T.scatter_mean(T.Tensor(feats), ids, 4).data
        assert np.array_equal(out[2], [2.0, 20.0])
        assert np.array_equal(out[0], [5.0, 50.0])
        assert np.array_equal(out[1], [0.0, 0.0])
        assert np.array_equal(out[3], [0.0, 0.0])

    @pytest.mark.parametrize("seed", range(10))
    def test_grad(self, seed):
        r = rng(seed)
        ids = r.integers(0, 5, size=7)
        check_grads(
            lambda t: T.sum_(T.abs_(T.scatter_mean(t["f"], ids, 5))),
            {"f": r.normal(size=(7, 3))})


class TestLayerForward:
    def test_dispatch_all_kinds(self):
        from cyclecast import layers
        r = rng(0)
        x4 = T.Tensor(r.normal(size=(1, 4, 4, 4)))
        cases = [
            layers.LayerSpec("conv2d", weight=r.normal(size=(2, 4, 3, 3)), bias=np.zeros(2),
                             stride=1, padding=1),
            layers.LayerSpec("silu"),
            layers.LayerSpec("layer-norm", gain=np.ones(4), bias=np.zeros(4), axis=1),
            layers.LayerSpec("pixel-shuffle", factor=2),
            layers.LayerSpec("nearest-resize", factor=2),
        ]
        for spec in cases:
            y = layers.layer_forward(spec, x4)
            assert y.data.ndim == 4
        y = layers.layer_forward(
            layers.LayerSpec("linear", weight=r.normal(size=(4, 6)), bias=np.zeros(6)),
            T.Tensor(r.normal(size=(5, 4))))
        assert y.data.shape == (5, 6)
        y = layers.layer_forward(layers.LayerSpec("concat", axis=1), [x4, x4])
        assert y.data.shape == (1, 8, 4, 4)
        y = layers.layer_forward(layers.LayerSpec("bilinear-resize", out_rows=3),
                                 T.Tensor(r.normal(size=(2, 4, 5))))
        assert y.data.shape == (2, 3, 5)

    def test_unknown_kind_rejected(self):
        from cyclecast import layers
        with pytest.raises(ValueError):
            layers.layer_forward(layers.LayerSpec("softmax"), T.Tensor(np.ones((1, 2, 2, 2))))

    def test_conv_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            T.conv2d(T.Tensor(np.ones((1, 3, 4, 4))), T.Tensor(np.ones((2, 4, 3, 3))), None, 1, 1)


class TestFloat64Discipline:
    def test_ops_stay_float64(self):
        r = rng(0)
        x = T.Tensor(np.asarray(r.normal(size=(1, 4, 4, 4)), dtype=np.float32))
        assert x.data.dtype == np.float64  # promoted on construction
        y = T.silu(T.conv2d(x, T.Tensor(r.normal(size=(2, 4, 3, 3))), None, 1, 1))
        assert y.data.dtype == np.float64
