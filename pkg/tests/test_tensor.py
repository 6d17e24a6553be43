import numpy as np
import pytest

from evograph import tensor as T
from evograph.errors import ContractError, DimensionError, SequenceTooShortError
from evograph.gradcheck import assert_gradients_close, gradient_errors
from evograph.tensor import Tape, Tensor, no_grad


def t(data, rg=True):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=rg)


class TestMatmul:
    def test_identity(self):
        a = t(np.eye(2))
        b = t([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(T.matmul(a, b).data, [[1.0, 2.0], [3.0, 4.0]])

    def test_hand_product(self):
        out = T.matmul(t([[1.0, 2.0]]), t([[3.0], [4.0]]))
        assert out.data.tolist() == [[11.0]]

    def test_backward_hand(self):
        a, b = t([[2.0]]), t([[5.0]])
        with Tape() as tape:
            loss = T.reduce_sum(T.matmul(a, b))
        tape.backward(loss)
        assert a.grad.tolist() == [[5.0]]
        assert b.grad.tolist() == [[2.0]]

    def test_inner_mismatch(self):
        with pytest.raises(DimensionError):
            T.matmul(t(np.ones((2, 3))), t(np.ones((2, 3))))

    def test_batched_against_loop(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(4, 3, 5))
        b = rng.normal(size=(5, 2))
        out = T.matmul(t(a), t(b)).data
        for i in range(4):
            assert np.allclose(out[i], a[i] @ b)

    def test_batched_gradients(self):
        rng = np.random.default_rng(1)
        a = t(rng.normal(size=(3, 2, 4)))
        b = t(rng.normal(size=(4, 3)))
        assert_gradients_close(lambda: T.reduce_sum(T.matmul(a, b)), {"a": a, "b": b})


class TestConv1d:
    def test_identity_kernel(self):
        x = t([[1.0, 2.0, 3.0, 4.0]])
        k = t(np.ones((1, 1, 1)))
        assert T.conv1d(x, k).data.tolist() == [[1.0, 2.0, 3.0, 4.0]]

    def test_dilated_pairs(self):
        # kernel [1,1], dilation 2 pairs (3,1) and (4,2)
        x = t([[1.0, 2.0, 3.0, 4.0]])
        k = t(np.ones((1, 1, 2)))
        assert T.conv1d(x, k, dilation=2).data.tolist() == [[4.0, 6.0]]

    def test_length_law(self):
        x = t(np.zeros((1, 168)))
        k = t(np.zeros((1, 1, 7)))
        assert T.conv1d(x, k, dilation=2).shape == (1, 156)

    @pytest.mark.parametrize("tt,k,s", [(10, 3, 1), (10, 3, 4), (20, 7, 2), (5, 1, 3)])
    def test_length_law_param(self, tt, k, s):
        x = t(np.zeros((2, tt)))
        kr = t(np.zeros((3, 2, k)))
        assert T.conv1d(x, kr, dilation=s).shape == (3, tt - (k - 1) * s)

    def test_too_short(self):
        x = t(np.zeros((1, 4)))
        k = t(np.zeros((1, 1, 3)))
        with pytest.raises(SequenceTooShortError):
            T.conv1d(x, k, dilation=2)

    def test_matches_manual_sum(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, 9))
        k = rng.normal(size=(3, 2, 3))
        s = 2
        out = T.conv1d(t(x), t(k), dilation=s).data
        t_out = 9 - 2 * s
        for o in range(3):
            for j in range(t_out):
                ref = sum(
                    k[o, c, tau] * x[c, j + 2 * s - s * tau]
                    for c in range(2)
                    for tau in range(3)
                )
                assert out[o, j] == pytest.approx(ref, rel=1e-12)

    def test_strided(self):
        # stride subsamples output positions
        x = np.arange(10.0)[None, :]
        k = np.ones((1, 1, 2))
        out = T.conv1d(t(x), t(k), stride=3).data
        assert out.tolist() == [[1.0, 7.0, 13.0]]

    def test_gradients(self):
        rng = np.random.default_rng(3)
        x = t(rng.normal(size=(2, 3, 8)))
        k = t(rng.normal(size=(4, 3, 3)))
        assert_gradients_close(
            lambda: T.reduce_sum(T.conv1d(x, k, dilation=2)), {"x": x, "k": k}
        )

    def test_strided_gradients(self):
        rng = np.random.default_rng(4)
        x = t(rng.normal(size=(2, 12)))
        k = t(rng.normal(size=(3, 2, 4)))
        assert_gradients_close(
            lambda: T.reduce_sum(T.conv1d(x, k, stride=2)), {"x": x, "k": k}
        )


class TestElementwise:
    def test_sigmoid_zero(self):
        assert T.sigmoid(t([0.0])).data[0] == 0.5

    def test_sigmoid_extremes_finite(self):
        out = T.sigmoid(t([-1e4, 1e4])).data
        assert np.all(np.isfinite(out))
        assert out[0] == pytest.approx(0.0, abs=1e-12)
        assert out[1] == pytest.approx(1.0, abs=1e-12)

    def test_tanh_zero(self):
        assert T.tanh(t([0.0])).data[0] == 0.0

    def test_mul_hand(self):
        assert T.mul(t([1.0, 2.0]), t([3.0, 4.0])).data.tolist() == [3.0, 8.0]

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.add(t([1.0]), t([1.0, 2.0]))

    def test_scalar_ops(self):
        x = t([1.0, 2.0])
        assert (x * 2.0).data.tolist() == [2.0, 4.0]
        assert (x + 1.0).data.tolist() == [2.0, 3.0]
        assert (1.0 - x).data.tolist() == [0.0, -1.0]


class TestReduce:
    def test_mean_hand(self):
        assert T.reduce_mean(t([2.0, 4.0, 6.0]), axis=0).item() == 4.0

    def test_sum_zeros(self):
        assert T.reduce_sum(t(np.zeros((3, 4)))).item() == 0.0

    def test_mean_backward(self):
        x = t([1.0, 5.0])
        with Tape() as tape:
            loss = T.reduce_mean(x)
        tape.backward(loss)
        assert x.grad.tolist() == [0.5, 0.5]

    def test_invalid_axis(self):
        with pytest.raises(DimensionError):
            T.reduce_sum(t([1.0]), axis=3)

    def test_axis_tuple(self):
        x = np.arange(24.0).reshape(2, 3, 4)
        out = T.reduce_mean(t(x), axis=(0, 2))
        assert np.allclose(out.data, x.mean(axis=(0, 2)))


class TestConcatSlice:
    def test_concat_rows(self):
        out = T.concat([t([[1.0]]), t([[2.0]])], axis=0)
        assert out.data.tolist() == [[1.0], [2.0]]

    def test_channel_widths_sum(self):
        parts = [t(np.zeros((2, c))) for c in (1, 3, 2)]
        assert T.concat(parts, axis=1).shape == (2, 6)

    def test_grad_roundtrip_shapes(self):
        a, b = t(np.ones((2, 3))), t(np.ones((2, 2)))
        with Tape() as tape:
            loss = T.reduce_sum(T.concat([a, b], axis=1))
        tape.backward(loss)
        assert a.grad.shape == (2, 3) and b.grad.shape == (2, 2)
        assert np.all(a.grad == 1.0) and np.all(b.grad == 1.0)

    def test_incompatible(self):
        with pytest.raises(DimensionError):
            T.concat([t(np.zeros((2, 3))), t(np.zeros((3, 3)))], axis=1)

    def test_narrow_backward(self):
        x = t(np.arange(6.0))
        with Tape() as tape:
            loss = T.reduce_sum(T.narrow(x, 0, 2, 3))
        tape.backward(loss)
        assert x.grad.tolist() == [0.0, 0.0, 1.0, 1.0, 1.0, 0.0]

    def test_gather_scatter(self):
        x = t(np.arange(8.0).reshape(4, 2))
        idx = [0, 0, 3]
        with Tape() as tape:
            y = T.gather(x, idx, axis=0)
            loss = T.reduce_sum(y)
        assert y.shape == (3, 2)
        tape.backward(loss)
        assert x.grad[:, 0].tolist() == [2.0, 0.0, 0.0, 1.0]


class TestDropout:
    def test_rate_zero_identity(self):
        x = t(np.ones(10))
        out = T.dropout(x, 0.0, training=True, rng=np.random.default_rng(0))
        assert np.array_equal(out.data, x.data)

    def test_inference_identity(self):
        x = t(np.random.default_rng(0).normal(size=100))
        out = T.dropout(x, 0.9, training=False)
        assert np.array_equal(out.data, x.data)

    def test_survivor_fraction(self):
        rng = np.random.default_rng(7)
        x = t(np.ones(100_000))
        out = T.dropout(x, 0.3, training=True, rng=rng)
        frac = np.count_nonzero(out.data) / x.size
        assert frac == pytest.approx(0.7, abs=0.01)
        survivors = out.data[out.data != 0]
        assert np.allclose(survivors, 1.0 / 0.7)

    def test_needs_rng(self):
        with pytest.raises(ContractError):
            T.dropout(t(np.ones(3)), 0.5, training=True)


class TestLayerNorm:
    def test_constant_slice(self):
        x = t(np.full((2, 4), 3.0))
        out = T.layer_norm(x, t(np.ones(4)), t(np.zeros(4)))
        assert np.allclose(out.data, 0.0)

    def test_hand_normalization(self):
        x = t([[1.0, 3.0]])
        out = T.layer_norm(x, t(np.ones(2)), t(np.zeros(2)), eps=1e-16)
        assert np.allclose(out.data, [[-1.0, 1.0]])

    def test_mean_equals_bias(self):
        rng = np.random.default_rng(5)
        x = t(rng.normal(size=(3, 6)))
        bias = t(rng.normal(size=6))
        out = T.layer_norm(x, t(np.ones(6)), bias)
        assert np.allclose(out.data.mean(axis=-1), bias.data.mean())

    def test_gradients(self):
        rng = np.random.default_rng(6)
        x = t(rng.normal(size=(2, 5)))
        g = t(rng.normal(size=5))
        b = t(rng.normal(size=5))
        assert_gradients_close(
            lambda: T.reduce_sum(T.mul(T.layer_norm(x, g, b), T.layer_norm(x, g, b))),
            {"x": x, "g": g, "b": b},
        )


class TestRowNormalize:
    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(8)
        x = t(rng.random((4, 4)) + 0.1)
        out = T.row_normalize(x)
        assert np.allclose(out.data.sum(axis=-1), 1.0)

    def test_zero_row_passthrough(self):
        x = t([[0.0, 0.0], [2.0, 2.0]])
        out = T.row_normalize(x)
        assert out.data.tolist() == [[0.0, 0.0], [0.5, 0.5]]

    def test_gradients(self):
        rng = np.random.default_rng(9)
        x = t(rng.random((3, 4)) + 0.5)
        w = rng.normal(size=(3, 4))
        assert_gradients_close(
            lambda: T.reduce_sum(T.mul(T.row_normalize(x), Tensor(w))), {"x": x}
        )


class TestBackward:
    def test_square_derivative(self):
        x = t([3.0])
        with Tape() as tape:
            loss = T.reduce_sum(T.mul(x, x))
        tape.backward(loss)
        assert x.grad.tolist() == [6.0]

    def test_unreachable_leaf_zero(self):
        x, y = t([2.0]), t([5.0])
        with Tape() as tape:
            _dead = T.mul(y, y)
            loss = T.reduce_sum(T.mul(x, x))
        tape.backward(loss)
        assert y.grad.tolist() == [0.0]

    def test_non_scalar_loss_rejected(self):
        x = t([1.0, 2.0])
        with Tape() as tape:
            y = T.mul(x, x)
        with pytest.raises(ContractError):
            tape.backward(y)

    def test_reused_operand(self):
        x = t([2.0])
        with Tape() as tape:
            loss = T.reduce_sum(T.add(T.mul(x, x), x))
        tape.backward(loss)
        assert x.grad.tolist() == [5.0]

    def test_random_chains_match_fd(self):
        # random 3-op chains over the differentiable op set
        rng = np.random.default_rng(10)
        units = [
            lambda z: T.sigmoid(z),
            lambda z: T.tanh(z),
            lambda z: T.mul(z, z),
            lambda z: T.add(z, z),
        ]
        for trial in range(20):
            x = t(rng.uniform(-1, 1, size=(3, 3)))
            ops = [units[rng.integers(len(units))] for _ in range(3)]

            def loss_fn(x=x, ops=ops):
                z = x
                for op in ops:
                    z = op(z)
                return T.reduce_mean(z)

            errs = gradient_errors(loss_fn, {"x": x})
            assert errs["x"] <= 1e-4, f"trial {trial}: {errs}"

    def test_tape_determinism(self):
        def run():
            rng = np.random.default_rng(11)
            x = t(rng.normal(size=(4, 4)))
            w = t(rng.normal(size=(4, 2)))
            with Tape() as tape:
                y = T.tanh(T.matmul(x, w))
                loss = T.reduce_mean(T.mul(y, y))
            tape.backward(loss)
            return loss.item(), x.grad.copy(), w.grad.copy()

        l1, gx1, gw1 = run()
        l2, gx2, gw2 = run()
        assert l1 == l2
        assert np.array_equal(gx1, gx2)
        assert np.array_equal(gw1, gw2)

    def test_no_grad_skips_recording(self):
        x = t([1.0])
        with Tape() as tape:
            with no_grad():
                y = T.mul(x, x)
        assert len(tape) == 0
        assert not y.requires_grad

    def test_transpose_reshape_broadcast(self):
        rng = np.random.default_rng(12)
        x = t(rng.normal(size=(2, 3, 4)))
        w = rng.normal(size=(3, 2, 3, 4))

        def loss_fn():
            y = T.transpose(x, (1, 0, 2))
            y = T.reshape(y, (3, 8))
            y = T.reshape(y, (3, 2, 4))
            y = T.transpose(y, (1, 0, 2))
            y = T.broadcast_leading(y, 3)
            return T.reduce_sum(T.mul(y, Tensor(w)))

        assert_gradients_close(loss_fn, {"x": x})
