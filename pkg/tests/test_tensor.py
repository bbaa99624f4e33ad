import numpy as np
import pytest
from hypothesis import given, strategies as st

from affnet import tensor as T
from affnet.errors import ContractError, GeometryError
from affnet.tensor import Tensor


def naive_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for i in range(n):
        for o in range(co):
            for y in range(ho):
                for z in range(wo):
                    win = xp[i, :, y * stride:y * stride + k, z * stride:z * stride + k]
                    out[i, o, y, z] = (win * w[o]).sum() + b[o]
    return out


def naive_pool(x, k, s):
    n, c, h, w = x.shape
    ho, wo = (h - k) // s + 1, (w - k) // s + 1
    out = np.zeros((n, c, ho, wo))
    for i in range(n):
        for j in range(c):
            for y in range(ho):
                for z in range(wo):
                    out[i, j, y, z] = x[i, j, y * s:y * s + k, z * s:z * s + k].max()
    return out


class TestConv2d:
    def test_all_ones_kernel_sums_window(self):
        x = Tensor(np.arange(1, 10, dtype=float).reshape(1, 1, 3, 3))
        out = T.conv2d(x, Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
        assert out.shape == (1, 1, 1, 1) and out.data.item() == 45

    def test_identity_kernel(self, rng):
        x = Tensor(rng.standard_normal((1, 3, 5, 4)))
        w = np.zeros((3, 3, 1, 1))
        w[range(3), range(3)] = 1
        np.testing.assert_array_equal(T.conv2d(x, Tensor(w), Tensor(np.zeros(3))).data, x.data)

    def test_eye_stream_first_layer_shape(self):
        x = Tensor(np.zeros((1, 3, 112, 112), dtype=np.float32))
        w = Tensor(np.zeros((24, 3, 5, 5), dtype=np.float32))
        assert T.conv2d(x, w, None, stride=2).shape == (1, 24, 54, 54)

    def test_unbatched_input(self, rng):
        x = rng.standard_normal((2, 6, 6))
        w, b = rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), 1, 1)
        np.testing.assert_allclose(out.data, naive_conv(x[None], w, b, 1, 1)[0], atol=1e-12)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ContractError):
            T.conv2d(Tensor(rng.standard_normal((1, 2, 5, 5))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_non_positive_extent(self):
        with pytest.raises(GeometryError):
            T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))

    @given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(1, 3),
           st.integers(0, 2), st.integers(4, 12), st.integers(4, 12), st.integers(0, 2**31))
    def test_matches_naive_oracle(self, c, co, k, stride, pad, h, w, seed):
        r = np.random.default_rng(seed)
        x, wt, b = r.standard_normal((2, c, h, w)), r.standard_normal((co, c, k, k)), r.standard_normal(co)
        out = T.conv2d(Tensor(x), Tensor(wt), Tensor(b), stride, pad)
        assert out.shape[2:] == ((h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1)
        np.testing.assert_allclose(out.data, naive_conv(x, wt, b, stride, pad), atol=1e-11)


class TestMaxPool:
    def test_ramp(self):
        x = Tensor(np.arange(16, dtype=float).reshape(1, 4, 4))
        out = T.maxpool2d(x, 3, 2)
        assert out.shape == (1, 1, 1) and out.data.item() == 10

    def test_constant(self):
        out = T.maxpool2d(Tensor(np.full((1, 2, 7, 7), 3.5)), 3, 2)
        assert np.all(out.data == 3.5)

    def test_eye_pool_shape(self):
        assert T.maxpool2d(Tensor(np.zeros((1, 50, 50))), 3, 2).shape == (1, 24, 24)

    def test_window_too_large(self):
        with pytest.raises(GeometryError):
            T.maxpool2d(Tensor(np.zeros((1, 1, 2, 5))), 3, 2)

    def test_tie_routes_to_first_max(self):
        x = Tensor(np.ones((1, 1, 3, 3)), requires_grad=True)
        T.backward(T.tsum(T.maxpool2d(x, 3, 2)))
        expected = np.zeros((1, 1, 3, 3))
        expected[0, 0, 0, 0] = 1
        np.testing.assert_array_equal(x.grad, expected)

    def test_overlapping_windows_accumulate(self):
        x = np.zeros((1, 1, 5, 5))
        x[0, 0, 2, 2] = 9  # shared by all four windows
        t = Tensor(x, requires_grad=True)
        T.backward(T.tsum(T.maxpool2d(t, 3, 2)))
        assert t.grad[0, 0, 2, 2] == 4 and t.grad.sum() == 4

    @given(st.integers(3, 16), st.integers(3, 16), st.integers(1, 3), st.integers(0, 2**31))
    def test_matches_naive_oracle(self, h, w, s, seed):
        x = np.random.default_rng(seed).standard_normal((2, 2, h, w))
        np.testing.assert_array_equal(T.maxpool2d(Tensor(x), 3, s).data, naive_pool(x, 3, s))


class TestDenseOps:
    def test_affine_hand_example(self):
        out = T.affine(Tensor([[1.0, 2.0]]), Tensor([[1.0, 1.0], [1.0, -1.0]]), Tensor([0.0, 1.0]))
        np.testing.assert_array_equal(out.data, [[3.0, 0.0]])

    def test_affine_identity_and_shape(self, rng):
        x = Tensor(rng.standard_normal((3, 4)))
        np.testing.assert_array_equal(T.affine(x, Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x.data)
        big = T.affine(Tensor(np.zeros((1, 1600))), Tensor(np.zeros((128, 1600))), Tensor(np.zeros(128)))
        assert big.shape == (1, 128)

    def test_affine_mismatch(self):
        with pytest.raises(ContractError):
            T.affine(Tensor(np.zeros((1, 3))), Tensor(np.zeros((2, 4))))

    def test_activations(self):
        np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
        assert T.sigmoid(Tensor([0.0])).data[0] == 0.5
        assert T.apply_activation(Tensor([-10.0]), "leaky_relu", 0.01).data[0] == pytest.approx(-0.1, abs=1e-15)
        s = T.sigmoid(Tensor([-800.0, 800.0])).data
        assert np.all(np.isfinite(s)) and s[0] == 0 and s[1] == 1

    def test_unknown_activation(self):
        with pytest.raises(ContractError):
            T.apply_activation(Tensor([1.0]), "tanh")

    def test_gap(self):
        assert T.global_avg_pool(Tensor(np.arange(4.0).reshape(1, 2, 2))).data.tolist() == [1.5]
        assert T.global_avg_pool(Tensor(np.full((2, 3, 4, 4), 7.0))).data.tolist() == [[7.0] * 3] * 2
        assert T.global_avg_pool(Tensor(np.zeros((64, 10, 10)))).shape == (64,)


class TestConcat:
    def test_four_eye_maps(self):
        parts = [Tensor(np.zeros((64, 10, 10))) for _ in range(4)]
        assert T.channel_concat(parts).shape == (256, 10, 10)

    def test_single_part(self, rng):
        a = Tensor(rng.standard_normal((3, 4, 4)))
        np.testing.assert_array_equal(T.channel_concat([a]).data, a.data)

    def test_mismatched_extent(self):
        with pytest.raises(GeometryError):
            T.channel_concat([Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 4, 5)))])

    @given(st.lists(st.integers(1, 5), min_size=1, max_size=5), st.integers(0, 2**31))
    def test_slice_round_trip(self, channels, seed):
        r = np.random.default_rng(seed)
        parts = [Tensor(r.standard_normal((2, c, 3, 3))) for c in channels]
        cat = T.channel_concat(parts)
        lo = 0
        for p in parts:
            np.testing.assert_array_equal(T.slice_axis(cat, lo, lo + p.shape[1]).data, p.data)
            lo += p.shape[1]


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        T.backward(T.tsum(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_sigmoid_at_zero(self):
        x = Tensor(np.zeros(5), requires_grad=True)
        T.backward(T.tsum(T.sigmoid(x)))
        np.testing.assert_array_equal(x.grad, np.full(5, 0.25))

    def test_non_scalar_rejected(self):
        with pytest.raises(ContractError):
            T.backward(T.relu(Tensor(np.ones(3), requires_grad=True)))

    def test_unused_leaf_gets_zero_grad(self):
        x, y = Tensor(np.ones(2), requires_grad=True), Tensor(np.ones(3), requires_grad=True)
        T.backward(T.tsum(x), leaves=[x, y])
        np.testing.assert_array_equal(y.grad, np.zeros(3))

    def test_diamond_graph_accumulates(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = T.mul(x, x)  # both parents are x
        T.backward(T.tsum(T.add(y, x)))
        assert x.grad[0] == 5.0  # 2x + 1

    def test_record_is_topological(self, rng):
        x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        out = T.tsum(T.relu(T.affine(x, Tensor(rng.standard_normal((4, 3))), None)))
        rec = T.ComputationRecord(out)
        position = {id(n): i for i, n in enumerate(rec.nodes)}
        for node in rec.nodes:
            for p in node._parents:
                assert position[id(p)] < position[id(node)]
        assert rec.nodes[-1] is out

    def test_no_grad_builds_no_graph(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            y = T.relu(x)
        assert not y.requires_grad

    def test_forward_bitwise_deterministic(self, rng):
        x, w = rng.standard_normal((2, 3, 9, 9)), rng.standard_normal((4, 3, 3, 3))
        a = T.conv2d(Tensor(x), Tensor(w), None, 2, 1).data
        b = T.conv2d(Tensor(x), Tensor(w), None, 2, 1).data
        assert a.tobytes() == b.tobytes()
